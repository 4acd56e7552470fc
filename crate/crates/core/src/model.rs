//! Retriever plus generator bundle and its inference path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    encode_pair, greedy_generate, FusionMode, GeneratorConfig, GeneratorParams,
};
use crate::retriever::{
    annealed_top_k, build_index, encode_query, retrieve_top_k, uniform_frame_scores,
    uniform_sample_frames, FrameTable, FrameVectorStore, RetrievalResult, RetrieverConfig,
    RetrieverParams, DEFAULT_TEMPERATURE,
};
use crate::synthbench::{mix_seed, Answerer, ExampleView, Prediction};
use crate::tensor::Tape;
use crate::vocab::{TokenId, Vocab, EOS};

pub const GENERATOR_FILE: &str = "generator.sevt";
pub const RETRIEVER_FILE: &str = "retriever.sevt";

/// Architecture hyperparameters shared by retriever and generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub embed_dim: usize,
    pub vector_dim: usize,
    pub frame_slots: usize,
    pub max_query_len: usize,
    pub max_target_len: usize,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            embed_dim: 16,
            vector_dim: 32,
            frame_slots: 1,
            max_query_len: 8,
            max_target_len: 4,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl ModelConfig {
    pub fn retriever(&self, feature_dim: usize) -> RetrieverConfig {
        RetrieverConfig {
            vocab_size: Vocab::default().len(),
            embed_dim: self.embed_dim,
            feature_dim,
            vector_dim: self.vector_dim,
            temperature: self.temperature,
        }
    }

    pub fn generator(&self, feature_dim: usize) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: Vocab::default().len(),
            d_model: self.d_model,
            feature_dim,
            frame_slots: self.frame_slots,
            max_query_len: self.max_query_len,
            max_target_len: self.max_target_len,
        }
    }
}

/// How frames reach the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Query-dependent top-k with softmax frame scores.
    Retrieval,
    /// Evenly spaced frames with uniform `1/k` scores.
    Uniform,
}

/// Frames chosen for one example, with the scores used for fusion.
pub fn select_frames(
    selection: Selection,
    retriever: Option<(&RetrieverParams, &FrameVectorStore)>,
    raw: &FrameTable,
    video_id: &str,
    query: &[TokenId],
    k: usize,
    window: usize,
    seed: u64,
) -> Result<RetrievalResult> {
    match selection {
        Selection::Uniform => uniform_sample_frames(raw, video_id, k, seed),
        Selection::Retrieval => {
            let (params, store) = retriever
                .ok_or_else(|| Error::Contract("retrieval selection without a retriever".into()))?;
            let q = encode_query(query, params)?;
            if window == 0 {
                retrieve_top_k(store, video_id, &q, k, params.config.temperature)
            } else {
                annealed_top_k(store, video_id, &q, k, window, params.config.temperature)
            }
        }
    }
}

/// Scores matching a selection: softmax over retrieved similarities, or
/// uniform when the frames were sampled.
pub fn selection_scores(result: &RetrievalResult) -> Result<Vec<f64>> {
    if result.entries.iter().all(|e| e.similarity.is_none()) {
        uniform_frame_scores(result.k())
    } else {
        Ok(result.scores())
    }
}

/// A trained (or freshly initialized) model: generator, fusion scheme and,
/// for retrieval runs, the retriever.
#[derive(Clone, Debug, PartialEq)]
pub struct SevitModel {
    pub fusion: FusionMode,
    pub generator: GeneratorParams,
    pub retriever: Option<RetrieverParams>,
}

impl SevitModel {
    pub fn selection(&self) -> Selection {
        if self.retriever.is_some() {
            Selection::Retrieval
        } else {
            Selection::Uniform
        }
    }

    /// Writes `generator.sevt` and, when present, `retriever.sevt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.generator.save(&dir.join(GENERATOR_FILE))?;
        if let Some(r) = &self.retriever {
            r.save(&dir.join(RETRIEVER_FILE))?;
        }
        Ok(())
    }

    /// Loads a run directory. The retriever is optional; uniform-sampling
    /// runs never write one.
    pub fn load(dir: &Path, fusion: FusionMode) -> Result<Self> {
        let generator = GeneratorParams::load(&dir.join(GENERATOR_FILE))?;
        let rpath = dir.join(RETRIEVER_FILE);
        let retriever = if rpath.exists() {
            Some(RetrieverParams::load(&rpath)?)
        } else {
            None
        };
        let model = SevitModel {
            fusion,
            generator,
            retriever,
        };
        model.check_consistent()?;
        Ok(model)
    }

    pub fn check_consistent(&self) -> Result<()> {
        let g = &self.generator.config;
        if g.vocab_size != Vocab::default().len() {
            return Err(Error::Validation(format!(
                "generator vocabulary {} does not match the built-in vocabulary {}",
                g.vocab_size,
                Vocab::default().len()
            )));
        }
        if let Some(r) = &self.retriever {
            if r.config.feature_dim != g.feature_dim || r.config.vocab_size != g.vocab_size {
                return Err(Error::Validation(format!(
                    "retriever (feature_dim {}, vocab {}) and generator (feature_dim {}, vocab {}) disagree",
                    r.config.feature_dim, r.config.vocab_size, g.feature_dim, g.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Greedy answer for one question about one video, using `k` frames.
    pub fn predict(
        &self,
        selection: Selection,
        store: Option<&FrameVectorStore>,
        raw: &FrameTable,
        video_id: &str,
        query: &[TokenId],
        k: usize,
        seed: u64,
    ) -> Result<(Vec<TokenId>, RetrievalResult)> {
        let retriever = match selection {
            Selection::Retrieval => Some((
                self.retriever
                    .as_ref()
                    .ok_or_else(|| Error::Validation("model has no retriever".into()))?,
                store.ok_or_else(|| Error::Contract("retrieval needs a frame store".into()))?,
            )),
            Selection::Uniform => None,
        };
        let result = select_frames(selection, retriever, raw, video_id, query, k, 0, seed)?;
        let scores = selection_scores(&result)?;
        let video = raw.get(video_id)?;
        let mut tape = Tape::new();
        let gv = self.generator.attach(&mut tape);
        let pairs = result
            .entries
            .iter()
            .map(|e| encode_pair(&mut tape, &gv, video.row(e.frame_index, raw.dim), query))
            .collect::<Result<Vec<_>>>()?;
        let max_len = self.generator.config.max_target_len;
        let mut tokens = greedy_generate(&mut tape, &gv, &pairs, &scores, self.fusion, max_len)?;
        if tokens.last() == Some(&EOS) {
            tokens.pop();
        }
        Ok((tokens, result))
    }
}

/// A model evaluated on one split.
pub struct ModelAnswerer<'a> {
    pub model: &'a SevitModel,
    pub selection: Selection,
    pub store: Option<FrameVectorStore>,
    pub raw: &'a FrameTable,
    pub seed: u64,
    vocab: Vocab,
}

impl<'a> ModelAnswerer<'a> {
    /// Pre-computes the frame store for `raw` when retrieving.
    pub fn new(
        model: &'a SevitModel,
        selection: Selection,
        raw: &'a FrameTable,
        seed: u64,
    ) -> Result<Self> {
        let store = match selection {
            Selection::Retrieval => {
                let r = model.retriever.as_ref().ok_or_else(|| {
                    Error::Validation("retrieval evaluation needs a retriever".into())
                })?;
                Some(build_index(r, raw)?)
            }
            Selection::Uniform => None,
        };
        Ok(ModelAnswerer {
            model,
            selection,
            store,
            raw,
            seed,
            vocab: Vocab::default(),
        })
    }
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&self, ex: &ExampleView<'_>, k: usize) -> Result<Prediction> {
        let query = self.vocab.encode(&ex.qa.query);
        let (tokens, result) = self.model.predict(
            self.selection,
            self.store.as_ref(),
            self.raw,
            &ex.qa.video_id,
            &query,
            k,
            mix_seed(self.seed, ex.index as u64),
        )?;
        Ok(Prediction {
            tokens,
            selected: result.frame_indices(),
        })
    }
}
