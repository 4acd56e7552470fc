//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{ModelAnswerer, ModelConfig, Selection, SevitModel};
use crate::report;
use crate::retriever::{
    annealed_top_k, build_index, encode_query, retrieve_top_k, FrameTable, FrameVectorStore,
    RetrievalResult, RetrieverParams, RAW_MAGIC,
};
use crate::synthbench::{
    evaluate, generate_dataset, BenchmarkMetrics, GenConfig, SyntheticDataset,
};
use crate::training::{self, run_experiment, TrainConfig, TrainMode, CONFIG_FILE};
use crate::vocab::Vocab;

pub const SEED_ENV: &str = "SEVIT_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "sevit",
    version,
    about = "Frame retrieval and fusion for video-grounded generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode raw frame features into a unit-normalized frame-vector store.
    Index(IndexArgs),
    /// Generate the synthetic long-video QA benchmark.
    GenData(GenDataArgs),
    /// Train one run and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset split.
    Eval(EvalArgs),
    /// Retrieve the top-k frames of one video for a query.
    Retrieve(RetrieveArgs),
    /// Compare metrics reports and emit plot-ready CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Raw frame features (SVRF file), e.g. <data>/test/videos.svrf.
    #[arg(long)]
    pub videos: PathBuf,
    /// Retriever checkpoint providing the frame encoder.
    #[arg(long)]
    pub params: PathBuf,
    /// Output frame-vector store (SVFS file).
    #[arg(long)]
    pub out: PathBuf,
    /// Create a fresh, untrained retriever at --params when it does not exist.
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings as JSON; flags below override individual keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Comma-separated video lengths in frames.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub planted: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub train_per_length: Option<usize>,
    #[arg(long)]
    pub val_per_length: Option<usize>,
    #[arg(long)]
    pub test_per_length: Option<usize>,
    /// Use the fixed captioning query for every example.
    #[arg(long)]
    pub null_query: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config as JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory; overrides data_path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; overrides out_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Finished MAR run directory used to warm up a FiD run.
    #[arg(long)]
    pub warm_up_source: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Mar,
    Fid,
    MarUniform,
    FidUniform,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mar => TrainMode::Mar,
            ModeArg::Fid => TrainMode::Fid,
            ModeArg::MarUniform => TrainMode::MarUniform,
            ModeArg::FidUniform => TrainMode::FidUniform,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SelectionArg {
    Retrieval,
    Uniform,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Test-time k; defaults to the run's k_test.
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated k values for the accuracy-vs-k curve.
    #[arg(long, value_delimiter = ',')]
    pub k_curve: Option<Vec<usize>>,
    /// Defaults to the run's own selection scheme.
    #[arg(long, value_enum)]
    pub selection: Option<SelectionArg>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Also write the metrics as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Frame-vector store (SVFS file).
    #[arg(long)]
    pub store: PathBuf,
    /// Retriever checkpoint.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub video: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Annealing window; 0 is plain top-k.
    #[arg(long, default_value_t = 0)]
    pub u: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics reports (metrics.jsonl) to compare; the first is the baseline.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    /// Write CSV here; `-` prints it to stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotFound(_) => 2,
        Error::RefusedOverwrite(_) => 3,
        _ => 1,
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            s.trim().parse().map(Some).map_err(|_| {
                Error::Validation(format!("{SEED_ENV}={s:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::NotFound(format!("{what} {}", path.display())))
    }
}

/// Refuses to touch an existing file or non-empty directory unless forced.
fn guard_output(path: &Path, force: bool) -> Result<()> {
    let occupied = match std::fs::read_dir(path) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => path.exists(),
    };
    if occupied && !force {
        return Err(Error::RefusedOverwrite(path.to_path_buf()));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index(a) => cmd_index(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

pub fn cmd_index(a: &IndexArgs) -> Result<()> {
    require_exists(&a.videos, "raw frame file")?;
    if a.init_seed.is_none() {
        require_exists(&a.params, "retriever checkpoint")?;
    }
    guard_output(&a.out, a.force)?;
    let raw = FrameTable::load(&a.videos, RAW_MAGIC)?;
    let params = if a.params.exists() {
        RetrieverParams::load(&a.params)?
    } else {
        let seed = a.init_seed.expect("checked above");
        let p = RetrieverParams::init(ModelConfig::default().retriever(raw.dim), seed)?;
        p.save(&a.params)?;
        p
    };
    let store = build_index(&params, &raw)?;
    store.save(&a.out)?;
    println!(
        "indexed {} videos ({}-d vectors) -> {}",
        store.len(),
        store.dim(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let mut cfg: GenConfig = match &a.config {
        Some(p) => serde_json::from_str(&fsutil::read_to_string(p)?)?,
        None => GenConfig::default(),
    };
    macro_rules! override_field {
        ($($f:ident),*) => { $(if let Some(v) = a.$f.clone() { cfg.$f = v; })* };
    }
    override_field!(
        classes,
        lengths,
        planted,
        feature_dim,
        train_per_length,
        val_per_length,
        test_per_length
    );
    if a.null_query {
        cfg.null_query = true;
    }
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let ds = generate_dataset(&cfg, seed)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} train / {} val / {} test examples (seed {seed}) -> {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        a.out.display()
    );
    Ok(())
}

/// Resolves the training config from file, environment and flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    require_exists(&a.config, "config file")?;
    let mut cfg: TrainConfig = serde_json::from_str(&fsutil::read_to_string(&a.config)?)?;
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(d) = &a.data {
        cfg.data_path = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(w) = &a.warm_up_source {
        cfg.warm_up_source = Some(w.clone());
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    cfg.validate()?;
    let data = cfg
        .data_path
        .clone()
        .ok_or_else(|| Error::Validation("no dataset given (data_path or --data)".into()))?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Validation("no run directory given (out_dir or --out)".into()))?;
    require_exists(&data, "dataset directory")?;
    if let Some(src) = cfg.warm_up_source.as_ref().filter(|_| cfg.warm_start()) {
        require_exists(src, "warm-up source")?;
    }
    guard_output(&out, a.force)?;
    let dataset = SyntheticDataset::load(&data)?;
    let result = run_experiment(&cfg, &dataset)?;
    let t = &result.summary.test;
    println!(
        "run {} ({}): test accuracy {:.3} at k={}, planted-frame recall {:.3} -> {}",
        result.summary.run_id,
        cfg.mode.name(),
        t.accuracy,
        t.k_test,
        t.recall,
        out.display()
    );
    Ok(())
}

fn print_metrics(m: &BenchmarkMetrics) {
    println!(
        "accuracy {:.3}  recall@{} {:.3}",
        m.accuracy, m.k_test, m.recall
    );
    println!("{:>10} {:>9} {:>6}", "frames", "accuracy", "count");
    for b in &m.buckets {
        println!("{:>10} {:>9.3} {:>6}", b.bucket, b.accuracy, b.count);
    }
    println!("{:>10} {:>9}", "k", "accuracy");
    for (k, acc) in &m.accuracy_by_k {
        println!("{k:>10} {acc:>9.3}");
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    require_exists(&a.run, "run directory")?;
    require_exists(&a.data, "dataset directory")?;
    if let Some(out) = &a.out {
        guard_output(out, a.force)?;
    }
    let cfg: TrainConfig =
        serde_json::from_str(&fsutil::read_to_string(&a.run.join(CONFIG_FILE))?)?;
    let model = SevitModel::load(&a.run, cfg.mode.fusion())?;
    let dataset = SyntheticDataset::load(&a.data)?;
    if model.generator.config.feature_dim != dataset.config.feature_dim {
        return Err(Error::Validation(format!(
            "checkpoint expects {}-d frame features, dataset has {}",
            model.generator.config.feature_dim, dataset.config.feature_dim
        )));
    }
    let split = match a.split {
        SplitArg::Train => &dataset.train,
        SplitArg::Val => &dataset.val,
        SplitArg::Test => &dataset.test,
    };
    let selection = match a.selection {
        Some(SelectionArg::Retrieval) => Selection::Retrieval,
        Some(SelectionArg::Uniform) => Selection::Uniform,
        None => model.selection(),
    };
    let k = a.k.unwrap_or(cfg.k_test);
    let k_curve = a.k_curve.clone().unwrap_or(cfg.k_curve.clone());
    let answerer = ModelAnswerer::new(
        &model,
        selection,
        &split.videos,
        training::eval_seed(cfg.seed),
    )?;
    let metrics = evaluate(&answerer, split, k, &k_curve, a.threads)?;
    if let Some(out) = &a.out {
        fsutil::atomic_write_str(out, &serde_json::to_string_pretty(&metrics)?)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&metrics)?);
    } else {
        print_metrics(&metrics);
    }
    Ok(())
}

pub fn format_retrieval(r: &RetrievalResult) -> String {
    let mut out = format!(
        "{:>4} {:>6} {:>9} {:>10} {:>8}\n",
        "rank", "frame", "time_s", "similarity", "score"
    );
    for (i, e) in r.entries.iter().enumerate() {
        let sim = e.similarity.map_or("-".to_string(), |s| format!("{s:.4}"));
        out.push_str(&format!(
            "{:>4} {:>6} {:>9.1} {:>10} {:>8.4}\n",
            i + 1,
            e.frame_index,
            e.timestamp,
            sim,
            e.score
        ));
    }
    out
}

pub fn cmd_retrieve(a: &RetrieveArgs) -> Result<()> {
    require_exists(&a.store, "frame store")?;
    require_exists(&a.params, "retriever checkpoint")?;
    let store = FrameVectorStore::load(&a.store)?;
    let params = RetrieverParams::load(&a.params)?;
    if params.config.vector_dim != store.dim() {
        return Err(Error::Validation(format!(
            "retriever produces {}-d vectors, store holds {}-d",
            params.config.vector_dim,
            store.dim()
        )));
    }
    let tokens = Vocab::default().encode(&a.query);
    let q = encode_query(&tokens, &params)?;
    let tau = params.config.temperature;
    let mut result = if a.u == 0 {
        retrieve_top_k(&store, &a.video, &q, a.k, tau)?
    } else {
        annealed_top_k(&store, &a.video, &q, a.k, a.u, tau)?
    };
    result.query = Some(a.query.clone());
    if a.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        print!("{}", format_retrieval(&result));
        if result.clamped {
            println!("k clamped to the video length {}", result.k());
        }
        if result.fallback {
            println!("annealing window exhausted the candidates; filled from suppressed frames");
        }
    }
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    for p in &a.metrics {
        require_exists(p, "metrics file")?;
    }
    if let Some(csv) = a.csv.as_ref().filter(|p| p.as_os_str() != "-") {
        guard_output(csv, a.force)?;
    }
    let mut runs = a
        .metrics
        .iter()
        .map(|p| report::load_run(p))
        .collect::<Result<Vec<_>>>()?;
    report::check_schema(&runs)?;
    report::disambiguate(&mut runs);
    print!("{}", report::render_tables(&runs));
    match &a.csv {
        Some(p) if p.as_os_str() == "-" => print!("{}", report::to_csv(&runs)),
        Some(p) => fsutil::atomic_write_str(p, &report::to_csv(&runs))?,
        None => {}
    }
    Ok(())
}
