//! Training loops: joint marginalization training, fusion-in-decoder
//! training with a frozen (optionally warmed-up) retriever and top-k
//! annealing, and the uniform-sampling baselines.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::generator::{
    encode_pair, fid_sequence_logprob, fid_token_distributions, mar_sequence_logprob,
    mar_token_distributions, EncodedPair, FusionMode, GeneratorParams, GeneratorVars,
};
use crate::model::{ModelAnswerer, ModelConfig, SevitModel, RETRIEVER_FILE};
use crate::retriever::{
    anneal_schedule, build_index, encode_query, encode_query_on, select_annealed, select_top_k,
    uniform_sample_frames, AnnealState, FrameTable, FrameVectorStore, RetrieverParams,
    RetrieverVars,
};
use crate::synthbench::{evaluate, mix_seed, BenchmarkMetrics, QAPair, SyntheticDataset};
use crate::tensor::{Tape, Var};
use crate::vocab::{TokenId, Vocab, EOS};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Seed salt for test-time uniform sampling, distinct from any epoch salt.
const EVAL_SALT: u64 = 0x00E7_A100;

/// Sampling seed for evaluating a run trained with `seed`, kept apart from
/// every training-time sampling phase.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_SALT
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "mar", alias = "MAR")]
    Mar,
    #[serde(rename = "fid", alias = "FiD")]
    Fid,
    #[serde(rename = "mar-uniform", alias = "MAR⊗")]
    MarUniform,
    #[serde(rename = "fid-uniform", alias = "FiD⊗")]
    FidUniform,
}

impl TrainMode {
    pub fn fusion(self) -> FusionMode {
        match self {
            TrainMode::Mar | TrainMode::MarUniform => FusionMode::Mar,
            TrainMode::Fid | TrainMode::FidUniform => FusionMode::Fid,
        }
    }

    pub fn uses_retriever(self) -> bool {
        matches!(self, TrainMode::Mar | TrainMode::Fid)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mar => "mar",
            TrainMode::Fid => "fid",
            TrainMode::MarUniform => "mar-uniform",
            TrainMode::FidUniform => "fid-uniform",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeConfig {
    /// Must stay true: the frame store is pre-computed once.
    pub frame_encoder: bool,
    /// `None` picks the mode default: trainable under MAR, frozen otherwise.
    pub query_encoder: Option<bool>,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        FreezeConfig {
            frame_encoder: true,
            query_encoder: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub k_train: usize,
    pub k_test: usize,
    pub lr: f64,
    /// Mass spread uniformly over the vocabulary in the training target.
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Initial annealing window; FiD only.
    pub u0: usize,
    pub seed: u64,
    pub freeze: FreezeConfig,
    pub data_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// FiD only. `None` means true: start from a MAR-trained retriever.
    pub warm_up: Option<bool>,
    /// Run directory or retriever checkpoint of a finished MAR run.
    pub warm_up_source: Option<PathBuf>,
    /// Extra test-time k values for the accuracy-vs-k curve.
    pub k_curve: Vec<usize>,
    pub run_id: Option<String>,
    pub threads: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Mar,
            k_train: 5,
            k_test: 10,
            lr: 0.05,
            label_smoothing: 0.1,
            batch_size: 4,
            epochs: 5,
            u0: 2,
            seed: 0,
            freeze: FreezeConfig::default(),
            data_path: None,
            out_dir: None,
            warm_up: None,
            warm_up_source: None,
            k_curve: vec![1, 2, 5, 10],
            run_id: None,
            threads: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Query encoder trainable in this run.
    pub fn query_trainable(&self) -> bool {
        self.mode == TrainMode::Mar && !self.freeze.query_encoder.unwrap_or(false)
    }

    /// FiD starts from a MAR-trained retriever.
    pub fn warm_start(&self) -> bool {
        self.mode == TrainMode::Fid && self.warm_up.unwrap_or(true)
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| self.mode.name().to_string())
    }

    /// Rejects contradictory settings before any training happens.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.k_train == 0 || self.k_test == 0 || self.k_curve.contains(&0) {
            return bad("k_train, k_test and k_curve entries must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !self.freeze.frame_encoder {
            return bad(
                "the frame encoder is always frozen; freeze.frame_encoder=false is unsupported"
                    .into(),
            );
        }
        if self.mode != TrainMode::Mar && self.freeze.query_encoder == Some(false) {
            return bad(format!(
                "mode {} never updates the query encoder; freeze.query_encoder=false contradicts it",
                self.mode.name()
            ));
        }
        if self.mode != TrainMode::Fid && self.warm_up == Some(true) {
            return bad(format!(
                "warm_up applies to fid runs only, mode is {}",
                self.mode.name()
            ));
        }
        if self.warm_start() && self.warm_up_source.is_none() {
            return bad("fid with warm_up=true needs warm_up_source (a finished mar run)".into());
        }
        if !self.warm_start() && self.warm_up_source.is_some() {
            return bad("warm_up_source given but warm-up is disabled for this run".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-step optimization settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub k: usize,
    pub lr: f64,
    pub label_smoothing: f64,
}

impl StepConfig {
    pub fn new(k: usize, lr: f64) -> Self {
        StepConfig {
            k,
            lr,
            label_smoothing: 0.0,
        }
    }
}

impl From<&TrainConfig> for StepConfig {
    fn from(c: &TrainConfig) -> Self {
        StepConfig {
            k: c.k_train,
            lr: c.lr,
            label_smoothing: c.label_smoothing,
        }
    }
}

/// `(1 − ε)·Σᵢ log p(wᵢ) + (ε/V)·Σᵢ Σᵥ log p(v)` over teacher-forced
/// distributions `[n × V]`.
fn smoothed_logprob(tape: &mut Tape, dists: Var, target: &[TokenId], eps: f64) -> Result<Var> {
    let v = tape.shape(dists)[1];
    let logs = tape.log(dists)?;
    let picks: Vec<usize> = target
        .iter()
        .enumerate()
        .map(|(i, &w)| i * v + w as usize)
        .collect();
    let gold = tape.gather(logs, &picks)?;
    let gold = tape.sum(gold);
    let all = tape.sum(logs);
    let gold = tape.scale(gold, 1.0 - eps);
    let all = tape.scale(all, eps / v as f64);
    tape.add(gold, all)
}

fn fused_objective(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    scores: Option<Var>,
    target: &[TokenId],
    eps: f64,
) -> Result<Var> {
    match (scores, eps > 0.0) {
        (Some(s), false) => mar_sequence_logprob(tape, gv, pairs, s, target),
        (Some(s), true) => {
            let d = mar_token_distributions(tape, gv, pairs, s, target)?;
            smoothed_logprob(tape, d, target, eps)
        }
        (None, false) => fid_sequence_logprob(tape, gv, pairs, target),
        (None, true) => {
            let d = fid_token_distributions(tape, gv, pairs, target)?;
            smoothed_logprob(tape, d, target, eps)
        }
    }
}

/// One training example with tokens resolved.
struct Example<'a> {
    qa: &'a QAPair,
    query: Vec<TokenId>,
    target: Vec<TokenId>,
}

impl<'a> Example<'a> {
    fn new(qa: &'a QAPair, vocab: &Vocab) -> Result<Self> {
        let mut target = vocab.encode(&qa.answer);
        if target.is_empty() {
            return Err(Error::Validation(format!(
                "example {} has an empty answer",
                qa.video_id
            )));
        }
        target.push(EOS);
        Ok(Example {
            qa,
            query: vocab.encode(&qa.query),
            target,
        })
    }
}

/// How the frames of one example are obtained during training.
#[derive(Clone, Copy, Debug)]
enum FramePlan {
    Mar {
        k: usize,
    },
    Fid {
        k: usize,
        window: usize,
    },
    Uniform {
        fusion: FusionMode,
        k: usize,
        seed: u64,
    },
}

struct StepInputs<'a> {
    raw: &'a FrameTable,
    store: Option<&'a FrameVectorStore>,
}

fn example_logprob(
    tape: &mut Tape,
    gv: &GeneratorVars,
    retriever: Option<(&RetrieverParams, &RetrieverVars)>,
    inputs: &StepInputs<'_>,
    ex: &Example<'_>,
    plan: FramePlan,
    eps: f64,
) -> Result<Var> {
    let vid = &ex.qa.video_id;
    let video = inputs.raw.get(vid)?;
    let dim = inputs.raw.dim;
    let need = || Error::Contract("retrieval training needs a retriever and a frame store".into());
    let encode = |tape: &mut Tape, frames: &[usize]| -> Result<Vec<_>> {
        frames
            .iter()
            .map(|&f| encode_pair(tape, gv, video.row(f, dim), &ex.query))
            .collect()
    };
    match plan {
        FramePlan::Mar { k } => {
            let (params, vars) = retriever.ok_or_else(need)?;
            let store = inputs.store.ok_or_else(need)?;
            let q = encode_query_on(tape, vars, &ex.query)?;
            let sims = store.inner_products(vid, tape.value(q))?;
            let (picked, _) = select_top_k(&sims, k)?;
            let mut rows = Vec::with_capacity(picked.len() * store.dim());
            for &f in &picked {
                rows.extend_from_slice(store.frame_vector(vid, f)?);
            }
            let frames = tape.constant(vec![picked.len(), store.dim()], rows)?;
            let s = tape.matmul_bt(q, frames)?;
            let scores = tape.softmax(s, params.config.temperature, None)?;
            let pairs = encode(tape, &picked)?;
            fused_objective(tape, gv, &pairs, Some(scores), &ex.target, eps)
        }
        FramePlan::Fid { k, window } => {
            let (params, _) = retriever.ok_or_else(need)?;
            let store = inputs.store.ok_or_else(need)?;
            let q = encode_query(&ex.query, params)?;
            let sims = store.inner_products(vid, &q)?;
            let (picked, _, _) = select_annealed(&sims, k, window)?;
            let pairs = encode(tape, &picked)?;
            fused_objective(tape, gv, &pairs, None, &ex.target, eps)
        }
        FramePlan::Uniform { fusion, k, seed } => {
            let picked = uniform_sample_frames(inputs.raw, vid, k, seed)?.frame_indices();
            let pairs = encode(tape, &picked)?;
            match fusion {
                FusionMode::Mar => {
                    let n = pairs.len();
                    let scores = tape.constant(vec![1, n], vec![1.0 / n as f64; n])?;
                    fused_objective(tape, gv, &pairs, Some(scores), &ex.target, eps)
                }
                FusionMode::Fid => fused_objective(tape, gv, &pairs, None, &ex.target, eps),
            }
        }
    }
}

/// Forward, backward and one SGD update over a batch. Returns the mean
/// negative log-likelihood per example before the update.
fn sgd_batch(
    generator: &mut GeneratorParams,
    retriever: Option<&mut RetrieverParams>,
    inputs: &StepInputs<'_>,
    batch: &[Example<'_>],
    plans: &[FramePlan],
    step: &StepConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let gv = generator.attach(&mut tape);
    let rv = retriever.as_ref().map(|r| r.attach(&mut tape));
    let mut total: Option<Var> = None;
    for (ex, &plan) in batch.iter().zip(plans) {
        let r = retriever.as_deref().zip(rv.as_ref());
        let lp = example_logprob(&mut tape, &gv, r, inputs, ex, plan, step.label_smoothing)
            .map_err(|e| match e {
                Error::NumericDomain(_) => Error::NonFiniteLoss {
                    loss: f64::NAN,
                    example: ex.qa.video_id.clone(),
                },
                other => other,
            })?;
        let v = tape.scalar(lp);
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: -v,
                example: ex.qa.video_id.clone(),
            });
        }
        total = Some(match total {
            None => lp,
            Some(t) => tape.add(t, lp)?,
        });
    }
    let loss = tape.scale(total.unwrap(), -1.0 / batch.len() as f64);
    let value = tape.scalar(loss);
    tape.backward(loss)?;
    generator.collect_grads(&tape, &gv);
    generator.sgd_step(step.lr);
    if let (Some(r), Some(vars)) = (retriever, rv.as_ref()) {
        r.collect_grads(&tape, vars);
        r.sgd_step(step.lr);
    }
    Ok(value)
}

fn examples<'a>(batch: &[&'a QAPair]) -> Result<Vec<Example<'a>>> {
    let vocab = Vocab::default();
    batch.iter().map(|qa| Example::new(qa, &vocab)).collect()
}

/// One marginalization step: top-k retrieval with the current query
/// encoder, token-level mixture likelihood, and an SGD update of the
/// generator and (when trainable) the query encoder.
pub fn train_step_mar(
    generator: &mut GeneratorParams,
    retriever: &mut RetrieverParams,
    store: &FrameVectorStore,
    raw: &FrameTable,
    batch: &[&QAPair],
    step: &StepConfig,
) -> Result<f64> {
    let exs = examples(batch)?;
    let plans = vec![FramePlan::Mar { k: step.k }; exs.len()];
    let inputs = StepInputs {
        raw,
        store: Some(store),
    };
    sgd_batch(generator, Some(retriever), &inputs, &exs, &plans, step)
}

/// One fusion-in-decoder step with a frozen retriever. Frames come from
/// annealed top-k with the given window; only the generator is updated.
pub fn train_step_fid(
    generator: &mut GeneratorParams,
    retriever: &RetrieverParams,
    store: &FrameVectorStore,
    raw: &FrameTable,
    batch: &[&QAPair],
    step: &StepConfig,
    window: usize,
) -> Result<f64> {
    if retriever.query_trainable() {
        return Err(Error::Contract(
            "fid training needs a frozen retriever".into(),
        ));
    }
    let exs = examples(batch)?;
    let plans = vec![FramePlan::Fid { k: step.k, window }; exs.len()];
    let inputs = StepInputs {
        raw,
        store: Some(store),
    };
    let mut frozen = retriever.clone();
    sgd_batch(generator, Some(&mut frozen), &inputs, &exs, &plans, step)
}

/// One uniform-sampling step. `seeds[i]` fixes the sampling phase of
/// example `i`. No retriever is involved.
pub fn train_baseline(
    generator: &mut GeneratorParams,
    fusion: FusionMode,
    raw: &FrameTable,
    batch: &[&QAPair],
    seeds: &[u64],
    step: &StepConfig,
) -> Result<f64> {
    if seeds.len() != batch.len() {
        return Err(Error::Parameter(format!(
            "{} seeds for {} examples",
            seeds.len(),
            batch.len()
        )));
    }
    let exs = examples(batch)?;
    let plans: Vec<FramePlan> = seeds
        .iter()
        .map(|&seed| FramePlan::Uniform {
            fusion,
            k: step.k,
            seed,
        })
        .collect();
    let inputs = StepInputs { raw, store: None };
    sgd_batch(generator, None, &inputs, &exs, &plans, step)
}

/// Loads the retriever of a finished MAR run (a run directory or the
/// checkpoint file itself) and freezes it for fusion-in-decoder training.
pub fn warm_up_retriever(source: &Path) -> Result<RetrieverParams> {
    let path = if source.is_dir() {
        source.join(RETRIEVER_FILE)
    } else {
        source.to_path_buf()
    };
    Ok(RetrieverParams::load(&path)?.frozen())
}

/// Mean negative log-likelihood per target token of the current model on a
/// set of examples, with the training-time frame plan of `mode` (window 0).
pub fn mean_token_nll(
    model: &SevitModel,
    mode: TrainMode,
    store: Option<&FrameVectorStore>,
    raw: &FrameTable,
    batch: &[&QAPair],
    k: usize,
    seed: u64,
) -> Result<f64> {
    let exs = examples(batch)?;
    let mut tape = Tape::new();
    let gv = model.generator.attach(&mut tape);
    let rv = model.retriever.as_ref().map(|r| r.attach(&mut tape));
    let inputs = StepInputs { raw, store };
    let mut total = 0.0;
    let mut tokens = 0;
    for (i, ex) in exs.iter().enumerate() {
        let plan = match mode {
            TrainMode::Mar => FramePlan::Mar { k },
            TrainMode::Fid => FramePlan::Fid { k, window: 0 },
            _ => FramePlan::Uniform {
                fusion: mode.fusion(),
                k,
                seed: mix_seed(seed, i as u64),
            },
        };
        let r = model.retriever.as_ref().zip(rv.as_ref());
        let lp = example_logprob(&mut tape, &gv, r, &inputs, ex, plan, 0.0)?;
        total -= tape.scalar(lp);
        tokens += ex.target.len();
    }
    Ok(total / tokens as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub record: String,
    pub epoch: usize,
    /// Annealing window used this epoch; 0 outside FiD.
    pub window: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub record: String,
    pub run_id: String,
    pub mode: TrainMode,
    pub config: TrainConfig,
    pub dataset_seed: u64,
    pub initial_token_nll: f64,
    pub loss_curve: Vec<f64>,
    pub test: BenchmarkMetrics,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: SevitModel,
    pub epochs: Vec<EpochRecord>,
    pub summary: SummaryRecord,
}

impl RunOutput {
    /// The metrics report: one JSON line per epoch, then the summary.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary)?);
        out.push('\n');
        Ok(out)
    }

    /// Writes checkpoints, the resolved config and the metrics report.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fsutil::create_dir_all(dir)?;
        self.model.save(dir)?;
        fsutil::atomic_write_str(
            &dir.join(CONFIG_FILE),
            &serde_json::to_string_pretty(&self.summary.config)?,
        )?;
        fsutil::atomic_write_str(&dir.join(METRICS_FILE), &self.metrics_jsonl()?)
    }
}

/// Trains a model per `config` and evaluates it on the test split. The
/// warm-up retriever, when the config asks for one, is passed in directly.
pub fn train(
    config: &TrainConfig,
    dataset: &SyntheticDataset,
    warm: Option<RetrieverParams>,
) -> Result<RunOutput> {
    config.validate()?;
    let feature_dim = dataset.config.feature_dim;
    let gcfg = config.model.generator(feature_dim);
    let rcfg = config.model.retriever(feature_dim);
    let mut generator = GeneratorParams::init(gcfg, config.seed)?;
    let mut retriever = match config.mode {
        TrainMode::Mar => {
            let mut r = RetrieverParams::init(rcfg, config.seed)?;
            r.set_query_trainable(config.query_trainable());
            Some(r)
        }
        TrainMode::Fid if config.warm_start() => {
            let r = warm.ok_or_else(|| Error::Validation("warm-up retriever missing".into()))?;
            if r.config != rcfg {
                return Err(Error::Validation(format!(
                    "warm-up retriever config {:?} does not match this run {:?}",
                    r.config, rcfg
                )));
            }
            Some(r.frozen())
        }
        TrainMode::Fid => Some(RetrieverParams::init(rcfg, config.seed)?.frozen()),
        TrainMode::MarUniform | TrainMode::FidUniform => None,
    };
    let raw = &dataset.train.videos;
    let store = retriever
        .as_ref()
        .map(|r| build_index(r, raw))
        .transpose()?;

    let train_refs: Vec<&QAPair> = dataset.train.qa.iter().collect();
    if train_refs.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let probe: Vec<&QAPair> = train_refs.iter().take(32).copied().collect();
    let initial_token_nll = {
        let model = SevitModel {
            fusion: config.mode.fusion(),
            generator: generator.clone(),
            retriever: retriever.clone(),
        };
        mean_token_nll(
            &model,
            config.mode,
            store.as_ref(),
            raw,
            &probe,
            config.k_train,
            config.seed,
        )?
    };

    let anneal = AnnealState::new(config.u0, config.epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let step = StepConfig::from(config);
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut loss_curve = Vec::new();
    for epoch in 0..config.epochs {
        let window = if config.mode == TrainMode::Fid {
            anneal_schedule(&anneal, epoch)?
        } else {
            0
        };
        order.shuffle(&mut rng);
        let epoch_seed = mix_seed(config.seed, epoch as u64 + 1);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&QAPair> = chunk.iter().map(|&i| train_refs[i]).collect();
            let loss = match config.mode {
                TrainMode::Mar => train_step_mar(
                    &mut generator,
                    retriever.as_mut().unwrap(),
                    store.as_ref().unwrap(),
                    raw,
                    &batch,
                    &step,
                )?,
                TrainMode::Fid => train_step_fid(
                    &mut generator,
                    retriever.as_ref().unwrap(),
                    store.as_ref().unwrap(),
                    raw,
                    &batch,
                    &step,
                    window,
                )?,
                TrainMode::MarUniform | TrainMode::FidUniform => {
                    let seeds: Vec<u64> = chunk
                        .iter()
                        .map(|&i| mix_seed(epoch_seed, i as u64))
                        .collect();
                    train_baseline(
                        &mut generator,
                        config.mode.fusion(),
                        raw,
                        &batch,
                        &seeds,
                        &step,
                    )?
                }
            };
            losses.push(loss);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        loss_curve.extend(&losses);
        let model = SevitModel {
            fusion: config.mode.fusion(),
            generator: generator.clone(),
            retriever: retriever.clone(),
        };
        let val_accuracy = if dataset.val.is_empty() {
            0.0
        } else {
            let answerer = ModelAnswerer::new(
                &model,
                model.selection(),
                &dataset.val.videos,
                eval_seed(config.seed),
            )?;
            evaluate(&answerer, &dataset.val, config.k_test, &[], config.threads)?.accuracy
        };
        epochs.push(EpochRecord {
            record: "epoch".into(),
            epoch,
            window,
            mean_loss,
            val_accuracy,
        });
    }

    if let Some(r) = retriever.as_mut() {
        r.set_query_trainable(false);
    }
    let model = SevitModel {
        fusion: config.mode.fusion(),
        generator,
        retriever,
    };
    let test = evaluate_model(&model, &dataset.test.videos, dataset, config)?;
    Ok(RunOutput {
        model,
        epochs,
        summary: SummaryRecord {
            record: "summary".into(),
            run_id: config.run_id(),
            mode: config.mode,
            config: config.clone(),
            dataset_seed: dataset.seed,
            initial_token_nll,
            loss_curve,
            test,
        },
    })
}

/// Test-split metrics with the run's own selection scheme.
pub fn evaluate_model(
    model: &SevitModel,
    raw: &FrameTable,
    dataset: &SyntheticDataset,
    config: &TrainConfig,
) -> Result<BenchmarkMetrics> {
    let answerer = ModelAnswerer::new(model, model.selection(), raw, eval_seed(config.seed))?;
    evaluate(
        &answerer,
        &dataset.test,
        config.k_test,
        &config.k_curve,
        config.threads,
    )
}

/// Full orchestration for one config: resolves the warm-up source, trains,
/// evaluates and writes every artifact into `out_dir` when one is set.
pub fn run_experiment(config: &TrainConfig, dataset: &SyntheticDataset) -> Result<RunOutput> {
    config.validate()?;
    let warm = if config.warm_start() {
        let src = config.warm_up_source.as_ref().expect("validated");
        Some(warm_up_retriever(src)?)
    } else {
        None
    };
    let out = train(config, dataset, warm)?;
    if let Some(dir) = &config.out_dir {
        out.write(dir)?;
    }
    Ok(out)
}
