//! Frame selection: exact top-k, annealed top-k and uniform sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::store::{FrameBlock, FrameTable, FrameVectorStore};
use super::{frame_scores, uniform_frame_scores};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    /// Raw cosine similarity; `None` when frames were sampled, not retrieved.
    pub similarity: Option<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub video_id: String,
    pub query: Option<String>,
    pub entries: Vec<RetrievedFrame>,
    /// `k` exceeded the number of frames and was reduced.
    pub clamped: bool,
    /// Annealing suppressed every candidate and slots were refilled.
    pub fallback: bool,
}

impl RetrievalResult {
    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }
}

/// Frame indices by descending similarity, ties by ascending index.
pub fn rank_frames(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Returns the selected indices (ranked) and whether `k` was clamped.
pub fn select_top_k(sims: &[f64], k: usize) -> Result<(Vec<usize>, bool)> {
    check_k(k)?;
    let clamped = k > sims.len();
    let mut order = rank_frames(sims);
    order.truncate(k);
    Ok((order, clamped))
}

/// Greedy pick by descending similarity; each pick suppresses the index
/// window `[i − u, i + u]`. When suppression leaves fewer than `k` picks the
/// best suppressed frames fill the remainder. Returns `(indices ranked by
/// similarity, clamped, fallback)`.
pub fn select_annealed(sims: &[f64], k: usize, u: usize) -> Result<(Vec<usize>, bool, bool)> {
    check_k(k)?;
    let n = sims.len();
    let clamped = k > n;
    let k = k.min(n);
    let order = rank_frames(sims);
    let mut suppressed = vec![false; n];
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(k);
    for &i in &order {
        if picked.len() == k {
            break;
        }
        if suppressed[i] {
            continue;
        }
        picked.push(i);
        taken[i] = true;
        let lo = i.saturating_sub(u);
        let hi = (i + u).min(n - 1);
        suppressed[lo..=hi].iter_mut().for_each(|s| *s = true);
    }
    let fallback = picked.len() < k;
    if fallback {
        for &i in &order {
            if picked.len() == k {
                break;
            }
            if !taken[i] {
                picked.push(i);
                taken[i] = true;
            }
        }
    }
    picked.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok((picked, clamped, fallback))
}

/// Evenly spaced positions `⌊(j + phase)·n/k⌋`, `phase ∈ [0, 1)`.
pub fn uniform_positions(n: usize, k: usize, phase: f64) -> Vec<usize> {
    let k = k.min(n);
    let step = n as f64 / k as f64;
    (0..k)
        .map(|j| (((j as f64 + phase) * step).floor() as usize).min(n - 1))
        .collect()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    Ok(())
}

fn build_result(
    store: &FrameVectorStore,
    video_id: &str,
    sims: &[f64],
    picked: &[usize],
    temperature: f64,
    clamped: bool,
    fallback: bool,
) -> Result<RetrievalResult> {
    let block = store.video(video_id)?;
    let selected: Vec<f64> = picked.iter().map(|&i| sims[i]).collect();
    let scores = frame_scores(&selected, temperature)?;
    Ok(RetrievalResult {
        video_id: video_id.to_string(),
        query: None,
        entries: picked
            .iter()
            .zip(scores)
            .map(|(&i, score)| RetrievedFrame {
                frame_index: i,
                timestamp: block.timestamps[i],
                similarity: Some(sims[i]),
                score,
            })
            .collect(),
        clamped,
        fallback,
    })
}

/// Maximum inner product search for the `k` best frames of one video, with
/// frame scores normalized over the selected set.
pub fn retrieve_top_k(
    store: &FrameVectorStore,
    video_id: &str,
    query: &[f64],
    k: usize,
    temperature: f64,
) -> Result<RetrievalResult> {
    check_k(k)?;
    let sims = store.inner_products(video_id, query)?;
    if sims.is_empty() {
        return Err(Error::Validation(format!("video {video_id} has no frames")));
    }
    let (picked, clamped) = select_top_k(&sims, k)?;
    build_result(store, video_id, &sims, &picked, temperature, clamped, false)
}

pub fn annealed_top_k(
    store: &FrameVectorStore,
    video_id: &str,
    query: &[f64],
    k: usize,
    window: usize,
    temperature: f64,
) -> Result<RetrievalResult> {
    check_k(k)?;
    let sims = store.inner_products(video_id, query)?;
    if sims.is_empty() {
        return Err(Error::Validation(format!("video {video_id} has no frames")));
    }
    let (picked, clamped, fallback) = select_annealed(&sims, k, window)?;
    build_result(
        store,
        video_id,
        &sims,
        &picked,
        temperature,
        clamped,
        fallback,
    )
}

/// Anything that can hand out a video's frames by id.
pub trait FrameSource {
    fn frames(&self, video_id: &str) -> Result<&FrameBlock>;
}

impl FrameSource for FrameVectorStore {
    fn frames(&self, video_id: &str) -> Result<&FrameBlock> {
        self.video(video_id)
    }
}

impl FrameSource for FrameTable {
    fn frames(&self, video_id: &str) -> Result<&FrameBlock> {
        self.get(video_id)
    }
}

/// Evenly spaced frames with a seeded random phase and uniform `1/k` scores.
pub fn uniform_sample_frames<S: FrameSource + ?Sized>(
    source: &S,
    video_id: &str,
    k: usize,
    seed: u64,
) -> Result<RetrievalResult> {
    check_k(k)?;
    let block = source.frames(video_id)?;
    let n = block.len();
    if n == 0 {
        return Err(Error::Validation(format!("video {video_id} has no frames")));
    }
    let phase = ChaCha8Rng::seed_from_u64(seed).random::<f64>();
    let picked = uniform_positions(n, k, phase);
    let scores = uniform_frame_scores(picked.len())?;
    Ok(RetrievalResult {
        video_id: video_id.to_string(),
        query: None,
        entries: picked
            .iter()
            .zip(scores)
            .map(|(&i, score)| RetrievedFrame {
                frame_index: i,
                timestamp: block.timestamps[i],
                similarity: None,
                score,
            })
            .collect(),
        clamped: k > n,
        fallback: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealState {
    pub initial_window: usize,
    pub epochs: usize,
}

impl AnnealState {
    pub fn new(initial_window: usize, epochs: usize) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::Parameter(
                "annealing needs at least one epoch".into(),
            ));
        }
        Ok(AnnealState {
            initial_window,
            epochs,
        })
    }
}

/// Linear decay `round(u₀ · (1 − e/(E−1)))`, reaching 0 at the last epoch.
pub fn anneal_schedule(state: &AnnealState, epoch: usize) -> Result<usize> {
    if epoch >= state.epochs {
        return Err(Error::Parameter(format!(
            "epoch {epoch} outside schedule of {} epochs",
            state.epochs
        )));
    }
    if state.epochs == 1 {
        return Ok(0);
    }
    let frac = 1.0 - epoch as f64 / (state.epochs - 1) as f64;
    Ok((state.initial_window as f64 * frac).round() as usize)
}
