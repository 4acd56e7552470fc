//! Bi-encoder frame retriever.
//!
//! The query encoder mean-pools token embeddings and projects them; the frame
//! encoder is a fixed linear projection of raw frame features. Both outputs
//! are L2-normalized, so relevance is cosine similarity and the store can be
//! searched by inner product.
//!
//! The frame encoder is never trainable: its tensor is created without
//! gradient tracking and the pre-computed store stays valid for the whole
//! run.

mod select;
mod store;

pub use select::{
    anneal_schedule, annealed_top_k, rank_frames, retrieve_top_k, select_annealed, select_top_k,
    uniform_positions, uniform_sample_frames, AnnealState, FrameSource, RetrievalResult,
    RetrievedFrame,
};
pub use store::{build_index, FrameBlock, FrameTable, FrameVectorStore, RAW_MAGIC, STORE_MAGIC};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_raw, softmax, Tape, Tensor, Var};
use crate::vocab::TokenId;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub vector_dim: usize,
    pub temperature: f64,
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "retriever temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.feature_dim == 0
            || self.vector_dim == 0
        {
            return Err(Error::Parameter(
                "retriever dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverParams {
    pub config: RetrieverConfig,
    /// `[vocab × embed_dim]`
    pub query_embedding: Tensor,
    /// `[embed_dim × vector_dim]`
    pub query_projection: Tensor,
    /// `[feature_dim × vector_dim]`, always frozen.
    frame_projection: Tensor,
}

/// Query-encoder parameters attached to a tape.
#[derive(Clone, Copy, Debug)]
pub struct RetrieverVars {
    pub query_embedding: Var,
    pub query_projection: Var,
}

impl RetrieverParams {
    pub fn init(config: RetrieverConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let c = config;
        Ok(RetrieverParams {
            config,
            query_embedding: Tensor::randn(vec![c.vocab_size, c.embed_dim], 1.0, &mut rng)
                .trainable(),
            query_projection: Tensor::randn(
                vec![c.embed_dim, c.vector_dim],
                1.0 / (c.embed_dim as f64).sqrt(),
                &mut rng,
            )
            .trainable(),
            frame_projection: Tensor::randn(
                vec![c.feature_dim, c.vector_dim],
                1.0 / (c.feature_dim as f64).sqrt(),
                &mut rng,
            ),
        })
    }

    pub fn frame_projection(&self) -> &Tensor {
        &self.frame_projection
    }

    pub fn query_trainable(&self) -> bool {
        self.query_embedding.requires_grad
    }

    /// Marks the query encoder (un)trainable. The frame encoder is unaffected.
    pub fn set_query_trainable(&mut self, trainable: bool) {
        for t in [&mut self.query_embedding, &mut self.query_projection] {
            t.requires_grad = trainable;
            if !trainable {
                t.grad = None;
            }
        }
    }

    pub fn frozen(mut self) -> Self {
        self.set_query_trainable(false);
        self
    }

    pub fn attach(&self, tape: &mut Tape) -> RetrieverVars {
        RetrieverVars {
            query_embedding: tape.leaf(&self.query_embedding),
            query_projection: tape.leaf(&self.query_projection),
        }
    }

    pub fn collect_grads(&mut self, tape: &Tape, vars: &RetrieverVars) {
        for (t, v) in [
            (&mut self.query_embedding, vars.query_embedding),
            (&mut self.query_projection, vars.query_projection),
        ] {
            if t.requires_grad {
                t.grad = tape.grad(v).map(<[f64]>::to_vec);
            }
        }
    }

    pub fn sgd_step(&mut self, lr: f64) {
        self.query_embedding.sgd_step(lr);
        self.query_projection.sgd_step(lr);
    }

    /// Checkpoint of the frame-encoder group alone.
    pub fn frame_encoder_bytes(&self) -> Vec<u8> {
        let mut ck = Checkpoint::new();
        ck.push("retriever.frame_projection", &self.frame_projection);
        ck.to_bytes()
    }

    pub fn query_encoder_bytes(&self) -> Vec<u8> {
        let mut ck = Checkpoint::new();
        ck.push("retriever.query_embedding", &self.query_embedding);
        ck.push("retriever.query_projection", &self.query_projection);
        ck.to_bytes()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("retriever.query_embedding", &self.query_embedding);
        ck.push("retriever.query_projection", &self.query_projection);
        ck.push("retriever.frame_projection", &self.frame_projection);
        let c = &self.config;
        ck.set_manifest("retriever.vocab_size", c.vocab_size as f64);
        ck.set_manifest("retriever.embed_dim", c.embed_dim as f64);
        ck.set_manifest("retriever.feature_dim", c.feature_dim as f64);
        ck.set_manifest("retriever.vector_dim", c.vector_dim as f64);
        ck.set_manifest("retriever.temperature", c.temperature);
        ck.set_manifest(
            "retriever.query_frozen",
            if self.query_trainable() { 0.0 } else { 1.0 },
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RetrieverConfig {
            vocab_size: ck.manifest_usize("retriever.vocab_size")?,
            embed_dim: ck.manifest_usize("retriever.embed_dim")?,
            feature_dim: ck.manifest_usize("retriever.feature_dim")?,
            vector_dim: ck.manifest_usize("retriever.vector_dim")?,
            temperature: ck.manifest("retriever.temperature").ok_or_else(|| {
                Error::Validation("checkpoint manifest lacks retriever.temperature".into())
            })?,
        };
        config.validate()?;
        let frozen = ck.manifest("retriever.query_frozen").unwrap_or(0.0) != 0.0;
        let mut params = RetrieverParams {
            config,
            query_embedding: ck.expect(
                "retriever.query_embedding",
                &[config.vocab_size, config.embed_dim],
            )?,
            query_projection: ck.expect(
                "retriever.query_projection",
                &[config.embed_dim, config.vector_dim],
            )?,
            frame_projection: ck.expect(
                "retriever.frame_projection",
                &[config.feature_dim, config.vector_dim],
            )?,
        };
        params.set_query_trainable(!frozen);
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `E_F(f)`: linear projection of raw frame features, L2-normalized.
/// A zero feature vector has no direction and is rejected.
pub fn encode_frame(features: &[f64], params: &RetrieverParams) -> Result<Vec<f64>> {
    let c = &params.config;
    if features.len() != c.feature_dim {
        return Err(Error::Parameter(format!(
            "frame features have dimension {}, encoder expects {}",
            features.len(),
            c.feature_dim
        )));
    }
    if features.iter().all(|&v| v == 0.0) {
        return Err(Error::Validation("zero raw frame vector".into()));
    }
    let mut v = matmul_raw(
        features,
        &params.frame_projection.data,
        1,
        c.feature_dim,
        c.vector_dim,
    );
    let norm = dot(&v, &v).sqrt();
    if !(norm > 0.0) {
        return Err(Error::NumericDomain("frame encoding has zero norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// `E_Q(q)` on a tape: mean-pooled token embeddings, projected and
/// normalized. Returns a `[1 × vector_dim]` node.
pub fn encode_query_on(tape: &mut Tape, vars: &RetrieverVars, tokens: &[TokenId]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Parameter(
            "query must contain at least one token".into(),
        ));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let emb = tape.embedding(vars.query_embedding, &ids)?;
    let pooled = tape.mean_rows(emb);
    let projected = tape.matmul(pooled, vars.query_projection)?;
    tape.normalize_rows(projected)
}

pub fn encode_query(tokens: &[TokenId], params: &RetrieverParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape);
    let q = encode_query_on(&mut tape, &vars, tokens)?;
    Ok(tape.value(q).to_vec())
}

pub fn cosine_similarity(q: &[f64], f: &[f64]) -> Result<f64> {
    if q.len() != f.len() {
        return Err(Error::Dimension {
            op: "cosine_similarity",
            lhs: vec![q.len()],
            rhs: vec![f.len()],
        });
    }
    let (nq, nf) = (dot(q, q).sqrt(), dot(f, f).sqrt());
    if nq == 0.0 || nf == 0.0 {
        return Err(Error::NumericDomain(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(q, f) / (nq * nf)).clamp(-1.0, 1.0))
}

/// Softmax of similarities at temperature `τ`, normalized over the given
/// (selected) frames only.
pub fn frame_scores(similarities: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if similarities.is_empty() {
        return Err(Error::Parameter(
            "frame scores need at least one frame".into(),
        ));
    }
    softmax(similarities, temperature)
}

pub fn uniform_frame_scores(k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    Ok(vec![1.0 / k as f64; k])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> RetrieverParams {
        RetrieverParams::init(
            RetrieverConfig {
                vocab_size: 12,
                embed_dim: 6,
                feature_dim: 5,
                vector_dim: 4,
                temperature: 1.0,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn frame_encoding_is_unit_and_deterministic() {
        let p = params();
        let x = [0.3, -1.0, 2.0, 0.0, 0.5];
        let v = encode_frame(&x, &p).unwrap();
        assert!((dot(&v, &v).sqrt() - 1.0).abs() < 1e-9);
        let again = encode_frame(&x, &params()).unwrap();
        assert_eq!(
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(
            encode_frame(&[0.0; 5], &p),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            encode_frame(&[1.0; 4], &p),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn single_token_query_is_normalized_projection() {
        let p = params();
        let q = encode_query(&[5], &p).unwrap();
        let emb = p.query_embedding.row(5);
        let mut want = matmul_raw(emb, &p.query_projection.data, 1, 6, 4);
        let n = dot(&want, &want).sqrt();
        want.iter_mut().for_each(|x| *x /= n);
        for (a, b) in q.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(encode_query(&[], &p).is_err());
    }

    #[test]
    fn mean_pooling_ignores_order() {
        let p = params();
        let a = encode_query(&[1, 4, 9, 4], &p).unwrap();
        let b = encode_query(&[4, 9, 4, 1], &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn score_cases() {
        let s = frame_scores(&[1.0, 0.0], 1.0).unwrap();
        assert!((s[0] - 0.73106).abs() < 1e-5 && (s[1] - 0.26894).abs() < 1e-5);
        assert_eq!(frame_scores(&[0.4], 1.0).unwrap(), vec![1.0]);
        assert!(frame_scores(&[0.2, 0.2, 0.2, 0.2], 1.0)
            .unwrap()
            .iter()
            .all(|v| (v - 0.25).abs() < 1e-15));
        assert!(frame_scores(&[1.0], 0.0).is_err());
        assert_eq!(uniform_frame_scores(5).unwrap(), vec![0.2; 5]);
        assert_eq!(uniform_frame_scores(1).unwrap(), vec![1.0]);
        assert!(uniform_frame_scores(0).is_err());
        for k in 1..50 {
            let s: f64 = uniform_frame_scores(k).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_bytes_and_freeze() {
        let p = params().frozen();
        let bytes = p.to_checkpoint().to_bytes();
        let back = RetrieverParams::from_checkpoint(
            &Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap(),
        )
        .unwrap();
        assert!(!back.query_trainable());
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        assert!(!back.frame_projection().requires_grad);
    }
}
