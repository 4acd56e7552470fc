//! Synthetic long-video QA with planted relevant frames.
//!
//! Every video is a run of distractor frames drawn from an isotropic
//! Gaussian. A handful of planted frames carry a shared "topic" direction
//! plus the prototype of the video's latent class. The question asks for the
//! class, so the answer can only be read off the planted frames. Because the
//! planted indices are known, retrieval recall can be measured directly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::retriever::{FrameBlock, FrameTable, RAW_MAGIC};
use crate::tensor::dot;
use crate::vocab::{TokenId, Vocab, CLASS_WORDS, NULL_QUERY, UNK};

/// Length strata, inclusive upper bounds in frames (1 frame per second).
pub const BUCKETS: [(usize, usize); 4] = [(0, 20), (21, 60), (61, 180), (181, 400)];

pub const QUERY_TEMPLATES: [&str; 4] = [
    "what color is the object ?",
    "which color is shown in the video ?",
    "what color appears in the video ?",
    "tell me the color of the object",
];

pub fn bucket_label(bucket: usize) -> String {
    let (lo, hi) = BUCKETS[bucket];
    if lo == 0 {
        format!("<={hi}")
    } else {
        format!("{lo}-{hi}")
    }
}

pub fn bucket_of(len: usize) -> Option<usize> {
    BUCKETS.iter().position(|&(lo, hi)| len >= lo && len <= hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub classes: usize,
    pub lengths: Vec<usize>,
    pub planted: usize,
    pub feature_dim: usize,
    pub train_per_length: usize,
    pub val_per_length: usize,
    pub test_per_length: usize,
    /// Weight of the shared topic direction in planted frames.
    pub topic_strength: f64,
    /// Weight of the class prototype in planted frames.
    pub class_strength: f64,
    /// Std of the isotropic noise added to planted frames.
    pub planted_noise: f64,
    /// Replace every question with the fixed captioning query.
    pub null_query: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 4,
            lengths: vec![20, 60, 180, 400],
            planted: 3,
            feature_dim: 32,
            train_per_length: 500,
            val_per_length: 10,
            test_per_length: 50,
            topic_strength: 1.5,
            class_strength: 1.0,
            planted_noise: 0.1,
            null_query: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > CLASS_WORDS.len() {
            return Err(Error::Validation(format!(
                "classes must be in 1..={}, got {}",
                CLASS_WORDS.len(),
                self.classes
            )));
        }
        if self.classes + 1 > self.feature_dim {
            return Err(Error::Validation(format!(
                "feature_dim {} too small for {} orthogonal prototypes",
                self.feature_dim,
                self.classes + 1
            )));
        }
        if self.lengths.is_empty() {
            return Err(Error::Validation("no video lengths given".into()));
        }
        for &len in &self.lengths {
            if len == 0 || bucket_of(len).is_none() {
                return Err(Error::Validation(format!(
                    "video length {len} outside the supported range 1..=400"
                )));
            }
            if self.planted >= len {
                return Err(Error::Validation(format!(
                    "planted frames m={} must be fewer than video length {len}",
                    self.planted
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub video_id: String,
    pub query: String,
    pub answer: String,
    pub relevant_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub videos: FrameTable,
    pub qa: Vec<QAPair>,
}

impl Split {
    pub fn video(&self, qa: &QAPair) -> Result<&FrameBlock> {
        self.videos.get(&qa.video_id)
    }

    pub fn len(&self) -> usize {
        self.qa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qa.is_empty()
    }
}

/// Orthonormal directions the generator planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub topic: Vec<f64>,
    pub classes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: GenConfig,
    pub seed: u64,
    pub prototypes: Prototypes,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: GenConfig,
    seed: u64,
    prototypes: Prototypes,
}

fn orthonormal_basis(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn generate_split(
    name: &str,
    per_length: usize,
    cfg: &GenConfig,
    protos: &Prototypes,
    rng: &mut ChaCha8Rng,
) -> Result<Split> {
    let d = cfg.feature_dim;
    let distractor = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    let noise = Normal::new(0.0, cfg.planted_noise / (d as f64).sqrt()).unwrap();
    let mut videos = FrameTable::new(d);
    let mut qa = Vec::new();
    for &len in &cfg.lengths {
        for n in 0..per_length {
            let video_id = format!("{name}-{len:03}-{n:04}");
            let class = rng.random_range(0..cfg.classes);
            let mut planted: Vec<usize> = sample(rng, len, cfg.planted).into_vec();
            planted.sort_unstable();
            let mut rows = Vec::with_capacity(len * d);
            for i in 0..len {
                if planted.binary_search(&i).is_ok() {
                    for j in 0..d {
                        rows.push(
                            cfg.topic_strength * protos.topic[j]
                                + cfg.class_strength * protos.classes[class][j]
                                + noise.sample(rng),
                        );
                    }
                } else {
                    rows.extend((0..d).map(|_| distractor.sample(rng)));
                }
            }
            let query = if cfg.null_query {
                NULL_QUERY.to_string()
            } else {
                QUERY_TEMPLATES[rng.random_range(0..QUERY_TEMPLATES.len())].to_string()
            };
            videos.insert(
                video_id.clone(),
                FrameBlock {
                    timestamps: (0..len).map(|i| i as f64).collect(),
                    rows,
                },
            )?;
            qa.push(QAPair {
                video_id,
                query,
                answer: CLASS_WORDS[class].to_string(),
                relevant_frames: planted,
            });
        }
    }
    Ok(Split { videos, qa })
}

/// Deterministic in `(config, seed)`.
pub fn generate_dataset(config: &GenConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = orthonormal_basis(config.classes + 1, config.feature_dim, &mut rng);
    let topic = basis.remove(0);
    let prototypes = Prototypes {
        topic,
        classes: basis,
    };
    let split_rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    };
    let train = generate_split(
        "train",
        config.train_per_length,
        config,
        &prototypes,
        &mut split_rng(1),
    )?;
    let val = generate_split(
        "val",
        config.val_per_length,
        config,
        &prototypes,
        &mut split_rng(2),
    )?;
    let test = generate_split(
        "test",
        config.test_per_length,
        config,
        &prototypes,
        &mut split_rng(3),
    )?;
    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        prototypes,
        train,
        val,
        test,
    })
}

impl SyntheticDataset {
    pub fn splits(&self) -> [(&'static str, &Split); 3] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }

    /// Writes `meta.json` plus one directory per split holding
    /// `videos.svrf` and `qa.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fsutil::create_dir_all(dir)?;
        let meta = Meta {
            config: self.config.clone(),
            seed: self.seed,
            prototypes: self.prototypes.clone(),
        };
        fsutil::atomic_write_str(
            &dir.join("meta.json"),
            &serde_json::to_string_pretty(&meta)?,
        )?;
        for (name, split) in self.splits() {
            let sub = dir.join(name);
            fsutil::create_dir_all(&sub)?;
            split.videos.save(&sub.join("videos.svrf"), RAW_MAGIC)?;
            let mut lines = String::new();
            for qa in &split.qa {
                lines.push_str(&serde_json::to_string(qa)?);
                lines.push('\n');
            }
            fsutil::atomic_write(&sub.join("qa.jsonl"), |w| w.write_all(lines.as_bytes()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&fsutil::read_to_string(&dir.join("meta.json"))?)?;
        let mut splits = BTreeMap::new();
        for name in ["train", "val", "test"] {
            let sub = dir.join(name);
            let videos = FrameTable::load(&sub.join("videos.svrf"), RAW_MAGIC)?;
            let qa_path = sub.join("qa.jsonl");
            let mut qa = Vec::new();
            for (i, line) in fsutil::read_to_string(&qa_path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let pair: QAPair = serde_json::from_str(line)
                    .map_err(|e| Error::format(&qa_path, format!("line {}: {e}", i + 1)))?;
                let video = videos.get(&pair.video_id)?;
                if let Some(&bad) = pair.relevant_frames.iter().find(|&&f| f >= video.len()) {
                    return Err(Error::format(
                        &qa_path,
                        format!("line {}: relevant frame {bad} out of range", i + 1),
                    ));
                }
                qa.push(pair);
            }
            splits.insert(name, Split { videos, qa });
        }
        Ok(SyntheticDataset {
            config: meta.config,
            seed: meta.seed,
            prototypes: meta.prototypes,
            train: splits.remove("train").unwrap(),
            val: splits.remove("val").unwrap(),
            test: splits.remove("test").unwrap(),
        })
    }

    /// Answer of the most frequent training class.
    pub fn majority_answer(&self) -> String {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for qa in &self.train.qa {
            *counts.entry(qa.answer.as_str()).or_default() += 1;
        }
        CLASS_WORDS
            .iter()
            .max_by_key(|w| (counts.get(*w).copied().unwrap_or(0), std::cmp::Reverse(**w)))
            .unwrap()
            .to_string()
    }
}

/// Nearest class prototype to the mean of the given frames, or `None` when
/// no frame is given.
pub fn classify_frames(
    protos: &Prototypes,
    video: &FrameBlock,
    dim: usize,
    frames: &[usize],
) -> Option<usize> {
    if frames.is_empty() {
        return None;
    }
    let mut mean = vec![0.0; dim];
    for &f in frames {
        mean.iter_mut()
            .zip(video.row(f, dim))
            .for_each(|(m, x)| *m += x);
    }
    protos
        .classes
        .iter()
        .enumerate()
        .map(|(c, p)| (c, dot(&mean, p)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
}

/// Upper-bound answerer that reads the ground-truth planted frames.
pub fn oracle_answerer(protos: &Prototypes, video: &FrameBlock, dim: usize, qa: &QAPair) -> String {
    match classify_frames(protos, video, dim, &qa.relevant_frames) {
        Some(c) => CLASS_WORDS[c].to_string(),
        None => "<unk>".to_string(),
    }
}

/// Probability that a uniformly random `k`-subset of `n` frames contains at
/// least one of `m` planted frames.
pub fn hit_probability(n: usize, m: usize, k: usize) -> f64 {
    let k = k.min(n);
    let mut miss = 1.0;
    for i in 0..k {
        if n - i == 0 || n < m + i {
            return 1.0;
        }
        miss *= (n - m - i) as f64 / (n - i) as f64;
    }
    1.0 - miss
}

/// Expected recall@k, `E|S ∩ P| / min(k, m)`, when every frame is selected
/// with marginal probability `k/n`.
pub fn expected_uniform_recall(n: usize, m: usize, k: usize) -> f64 {
    let k = k.min(n);
    if m == 0 {
        return 0.0;
    }
    (k * m) as f64 / n as f64 / k.min(m) as f64
}

/// Fraction of planted frames found among the selected ones, normalized by
/// the best achievable count.
pub fn recall_at_k(selected: &[usize], planted: &[usize]) -> Option<f64> {
    if planted.is_empty() || selected.is_empty() {
        return None;
    }
    let hits = selected.iter().filter(|f| planted.contains(f)).count();
    Some(hits as f64 / selected.len().min(planted.len()) as f64)
}

/// Everything an answerer may look at for one example.
pub struct ExampleView<'a> {
    pub index: usize,
    pub qa: &'a QAPair,
    pub video: &'a FrameBlock,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Answer tokens without BOS/EOS.
    pub tokens: Vec<TokenId>,
    /// Frames the answerer looked at.
    pub selected: Vec<usize>,
}

pub trait Answerer: Sync {
    fn answer(&self, example: &ExampleView<'_>, k: usize) -> Result<Prediction>;
}

/// Ground-truth reader behind the [`Answerer`] interface.
pub struct OracleAnswerer<'a> {
    pub prototypes: &'a Prototypes,
    pub vocab: Vocab,
}

impl Answerer for OracleAnswerer<'_> {
    fn answer(&self, ex: &ExampleView<'_>, _k: usize) -> Result<Prediction> {
        let word = oracle_answerer(self.prototypes, ex.video, ex.feature_dim, ex.qa);
        Ok(Prediction {
            tokens: vec![self.vocab.id(&word)],
            selected: ex.qa.relevant_frames.clone(),
        })
    }
}

/// Oracle that only sees a uniformly random `k`-subset of frames and
/// abstains when no planted frame is among them.
pub struct RestrictedOracle<'a> {
    pub prototypes: &'a Prototypes,
    pub vocab: Vocab,
    pub seed: u64,
}

impl Answerer for RestrictedOracle<'_> {
    fn answer(&self, ex: &ExampleView<'_>, k: usize) -> Result<Prediction> {
        let n = ex.video.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, ex.index as u64));
        let selected = sample(&mut rng, n, k.min(n)).into_vec();
        let seen: Vec<usize> = selected
            .iter()
            .copied()
            .filter(|f| ex.qa.relevant_frames.contains(f))
            .collect();
        let tokens = match classify_frames(self.prototypes, ex.video, ex.feature_dim, &seen) {
            Some(c) => vec![self.vocab.class_token(c)?],
            None => vec![UNK],
        };
        Ok(Prediction { tokens, selected })
    }
}

/// Predicts the same answer for every example.
pub struct ConstantAnswerer {
    pub token: TokenId,
}

impl Answerer for ConstantAnswerer {
    fn answer(&self, _ex: &ExampleView<'_>, _k: usize) -> Result<Prediction> {
        Ok(Prediction {
            tokens: vec![self.token],
            selected: vec![],
        })
    }
}

/// SplitMix64 finalizer for deriving per-example seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B3_E8C9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub bucket: String,
    pub k: usize,
    pub accuracy: f64,
    pub recall: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub bucket: String,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMetrics {
    pub k_test: usize,
    pub accuracy: f64,
    pub recall: f64,
    pub buckets: Vec<BucketAccuracy>,
    /// `(k, accuracy)` over the whole split.
    pub accuracy_by_k: Vec<(usize, f64)>,
    /// Accuracy and recall for every (bucket, k) combination.
    pub cells: Vec<CellMetrics>,
}

impl BenchmarkMetrics {
    pub fn bucket_accuracy(&self, label: &str) -> Option<f64> {
        self.buckets
            .iter()
            .find(|b| b.bucket == label)
            .map(|b| b.accuracy)
    }

    pub fn cell(&self, label: &str, k: usize) -> Option<&CellMetrics> {
        self.cells.iter().find(|c| c.bucket == label && c.k == k)
    }
}

#[derive(Clone, Copy, Default)]
struct Tally {
    correct: usize,
    count: usize,
    recall_sum: f64,
    recall_count: usize,
}

impl Tally {
    fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    fn recall(&self) -> f64 {
        if self.recall_count == 0 {
            0.0
        } else {
            self.recall_sum / self.recall_count as f64
        }
    }
}

/// Exact-match accuracy and planted-frame recall on a split, at `k_test` and
/// at every k of `k_curve`, broken down by length bucket. `threads > 1` fans
/// examples out over scoped worker threads; results do not depend on it.
pub fn evaluate(
    answerer: &dyn Answerer,
    split: &Split,
    k_test: usize,
    k_curve: &[usize],
    threads: usize,
) -> Result<BenchmarkMetrics> {
    let vocab = Vocab::default();
    let mut ks: Vec<usize> = k_curve.to_vec();
    ks.push(k_test);
    ks.sort_unstable();
    ks.dedup();
    if ks.contains(&0) {
        return Err(Error::Parameter("k must be at least 1".into()));
    }

    let score_one = |index: usize| -> Result<Vec<(usize, bool, Option<f64>)>> {
        let qa = &split.qa[index];
        let video = split.video(qa)?;
        let view = ExampleView {
            index,
            qa,
            video,
            feature_dim: split.videos.dim,
        };
        let bucket = bucket_of(video.len()).ok_or_else(|| {
            Error::Validation(format!(
                "video {} longer than the largest bucket",
                qa.video_id
            ))
        })?;
        let gold = vocab.encode(&qa.answer);
        let mut out = Vec::with_capacity(ks.len());
        for &k in &ks {
            let pred = answerer.answer(&view, k)?;
            out.push((
                bucket,
                pred.tokens == gold,
                recall_at_k(&pred.selected, &qa.relevant_frames),
            ));
        }
        Ok(out)
    };

    let n = split.len();
    let threads = threads.max(1).min(n.max(1));
    let results: Vec<Vec<(usize, bool, Option<f64>)>> = if threads == 1 {
        (0..n).map(score_one).collect::<Result<_>>()?
    } else {
        let chunk = n.div_ceil(threads);
        let parts: Vec<Result<Vec<_>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let score_one = &score_one;
                    s.spawn(move || {
                        (t * chunk..((t + 1) * chunk).min(n))
                            .map(score_one)
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(n);
        for p in parts {
            all.extend(p?);
        }
        all
    };

    let mut grid = vec![vec![Tally::default(); ks.len()]; BUCKETS.len()];
    let mut totals = vec![Tally::default(); ks.len()];
    for per_k in &results {
        for (ki, &(bucket, correct, recall)) in per_k.iter().enumerate() {
            for tally in [&mut grid[bucket][ki], &mut totals[ki]] {
                tally.count += 1;
                tally.correct += correct as usize;
                if let Some(r) = recall {
                    tally.recall_sum += r;
                    tally.recall_count += 1;
                }
            }
        }
    }
    let test_idx = ks.iter().position(|&k| k == k_test).unwrap();
    let mut cells = Vec::new();
    for (b, row) in grid.iter().enumerate() {
        for (ki, t) in row.iter().enumerate() {
            cells.push(CellMetrics {
                bucket: bucket_label(b),
                k: ks[ki],
                accuracy: t.accuracy(),
                recall: t.recall(),
                count: t.count,
            });
        }
    }
    Ok(BenchmarkMetrics {
        k_test,
        accuracy: totals[test_idx].accuracy(),
        recall: totals[test_idx].recall(),
        buckets: (0..BUCKETS.len())
            .map(|b| BucketAccuracy {
                bucket: bucket_label(b),
                accuracy: grid[b][test_idx].accuracy(),
                count: grid[b][test_idx].count,
            })
            .collect(),
        accuracy_by_k: ks
            .iter()
            .zip(&totals)
            .map(|(&k, t)| (k, t.accuracy()))
            .collect(),
        cells,
    })
}
