//! Toy encoder-decoder generator with two late-fusion schemes.
//!
//! Each (frame, query) pair is encoded independently: the raw frame features
//! are projected into `frame_slots` patch rows, followed by the padded query
//! tokens, and one self-attention block mixes them. Positions restart inside
//! every pair, so blocks carry no rank information.
//!
//! * Marginalization decodes every pair separately and mixes the per-pair
//!   token distributions with the frame scores at every step. Gradients flow
//!   into the scores, which is how the query encoder learns.
//! * Fusion-in-Decoder stacks the k encoded pairs into one memory and lets
//!   the decoder cross-attend over all of them at once.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{TokenId, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub feature_dim: usize,
    pub frame_slots: usize,
    pub max_query_len: usize,
    pub max_target_len: usize,
}

impl GeneratorConfig {
    /// Rows per encoded pair: frame slots then query slots.
    pub fn pair_len(&self) -> usize {
        self.frame_slots + self.max_query_len
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if [
            c.vocab_size,
            c.d_model,
            c.feature_dim,
            c.frame_slots,
            c.max_query_len,
            c.max_target_len,
        ]
        .contains(&0)
        {
            return Err(Error::Parameter(
                "generator dimensions must be positive".into(),
            ));
        }
        if c.vocab_size <= EOS as usize {
            return Err(Error::Parameter(
                "vocabulary must contain the special tokens".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Mar,
    Fid,
}

macro_rules! generator_tensors {
    ($($field:ident),+ $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct GeneratorParams {
            pub config: GeneratorConfig,
            $(pub $field: Tensor,)+
        }

        /// Generator parameters attached to a tape.
        #[derive(Clone, Copy, Debug)]
        pub struct GeneratorVars {
            pub config: GeneratorConfig,
            $(pub $field: Var,)+
        }

        impl GeneratorParams {
            pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
                vec![$((stringify!($field), &self.$field),)+]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
                vec![$((stringify!($field), &mut self.$field),)+]
            }

            pub fn attach(&self, tape: &mut Tape) -> GeneratorVars {
                GeneratorVars {
                    config: self.config,
                    $($field: tape.leaf(&self.$field),)+
                }
            }

            pub fn collect_grads(&mut self, tape: &Tape, vars: &GeneratorVars) {
                $(
                    if self.$field.requires_grad {
                        self.$field.grad = tape.grad(vars.$field).map(<[f64]>::to_vec);
                    }
                )+
            }

            fn from_named(config: GeneratorConfig, mut get: impl FnMut(&'static str) -> Result<Tensor>) -> Result<Self> {
                Ok(GeneratorParams {
                    config,
                    $($field: get(stringify!($field))?,)+
                })
            }
        }
    };
}

generator_tensors!(
    token_embedding,
    frame_projection,
    encoder_positions,
    enc_query,
    enc_key,
    enc_value,
    enc_output,
    decoder_positions,
    self_query,
    self_key,
    self_value,
    self_output,
    cross_query,
    cross_key,
    cross_value,
    cross_output,
    output_projection,
);

impl GeneratorParams {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let d = config.d_model;
        let attn_std = 1.0 / (d as f64).sqrt();
        let shapes = Self::shapes(&config);
        let params = Self::from_named(config, |name| {
            let std = match name {
                "token_embedding" | "frame_projection" => 1.0,
                "encoder_positions" | "decoder_positions" => 0.1,
                "output_projection" => 0.02,
                _ => attn_std,
            };
            let shape = shapes.iter().find(|(n, _)| *n == name).unwrap().1.clone();
            Ok(Tensor::randn(shape, std, &mut rng).trainable())
        })?;
        Ok(params)
    }

    fn shapes(c: &GeneratorConfig) -> Vec<(&'static str, Vec<usize>)> {
        let d = c.d_model;
        let sq = vec![d, d];
        vec![
            ("token_embedding", vec![c.vocab_size, d]),
            ("frame_projection", vec![c.feature_dim, c.frame_slots * d]),
            ("encoder_positions", vec![c.pair_len(), d]),
            ("enc_query", sq.clone()),
            ("enc_key", sq.clone()),
            ("enc_value", sq.clone()),
            ("enc_output", sq.clone()),
            ("decoder_positions", vec![c.max_target_len, d]),
            ("self_query", sq.clone()),
            ("self_key", sq.clone()),
            ("self_value", sq.clone()),
            ("self_output", sq.clone()),
            ("cross_query", sq.clone()),
            ("cross_key", sq.clone()),
            ("cross_value", sq.clone()),
            ("cross_output", sq),
            ("output_projection", vec![d, c.vocab_size]),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_mut() {
            t.requires_grad = trainable;
            if !trainable {
                t.grad = None;
            }
        }
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for (_, t) in self.named_mut() {
            t.sgd_step(lr);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.named() {
            ck.push(format!("generator.{name}"), t);
        }
        let c = &self.config;
        ck.set_manifest("generator.vocab_size", c.vocab_size as f64);
        ck.set_manifest("generator.d_model", c.d_model as f64);
        ck.set_manifest("generator.feature_dim", c.feature_dim as f64);
        ck.set_manifest("generator.frame_slots", c.frame_slots as f64);
        ck.set_manifest("generator.max_query_len", c.max_query_len as f64);
        ck.set_manifest("generator.max_target_len", c.max_target_len as f64);
        ck.set_manifest("generator.encoder_blocks", 1.0);
        ck.set_manifest("generator.decoder_blocks", 1.0);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = GeneratorConfig {
            vocab_size: ck.manifest_usize("generator.vocab_size")?,
            d_model: ck.manifest_usize("generator.d_model")?,
            feature_dim: ck.manifest_usize("generator.feature_dim")?,
            frame_slots: ck.manifest_usize("generator.frame_slots")?,
            max_query_len: ck.manifest_usize("generator.max_query_len")?,
            max_target_len: ck.manifest_usize("generator.max_target_len")?,
        };
        config.validate()?;
        for key in ["generator.encoder_blocks", "generator.decoder_blocks"] {
            if ck.manifest_usize(key)? != 1 {
                return Err(Error::Validation(format!("{key} must be 1")));
            }
        }
        let shapes = Self::shapes(&config);
        Self::from_named(config, |name| {
            let shape = &shapes.iter().find(|(n, _)| *n == name).unwrap().1;
            Ok(ck.expect(&format!("generator.{name}"), shape)?.trainable())
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Encoder states of one (frame, query) pair.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    /// `[L × d]`, frame slots first.
    pub states: Var,
    /// Length `L`; false on query padding.
    pub key_mask: Vec<bool>,
    /// The query was longer than `max_query_len` and was cut.
    pub truncated: bool,
}

/// Encoder output the decoder cross-attends to.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Var,
    pub key_mask: Vec<bool>,
}

impl From<&EncodedPair> for Memory {
    fn from(p: &EncodedPair) -> Self {
        Memory {
            states: p.states,
            key_mask: p.key_mask.clone(),
        }
    }
}

fn attention_block(
    tape: &mut Tape,
    x: Var,
    memory: Var,
    (wq, wk, wv, wo): (Var, Var, Var, Var),
    mask: &[bool],
) -> Result<Var> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(memory, wk)?;
    let v = tape.matmul(memory, wv)?;
    let a = tape.attention(q, k, v, Some(mask))?;
    let o = tape.matmul(a, wo)?;
    tape.add(x, o)
}

pub fn encode_pair(
    tape: &mut Tape,
    gv: &GeneratorVars,
    frame_features: &[f64],
    query: &[TokenId],
) -> Result<EncodedPair> {
    let c = gv.config;
    if frame_features.len() != c.feature_dim {
        return Err(Error::Dimension {
            op: "encode_pair",
            lhs: vec![frame_features.len()],
            rhs: vec![c.feature_dim],
        });
    }
    let truncated = query.len() > c.max_query_len;
    let query = &query[..query.len().min(c.max_query_len)];
    let mut ids: Vec<usize> = query.iter().map(|&t| t as usize).collect();
    ids.resize(c.max_query_len, PAD as usize);

    let frame = tape.constant(vec![1, c.feature_dim], frame_features.to_vec())?;
    let slots = tape.matmul(frame, gv.frame_projection)?;
    let slots = tape.reshape(slots, vec![c.frame_slots, c.d_model])?;
    let tokens = tape.embedding(gv.token_embedding, &ids)?;
    let h = tape.concat_rows(&[slots, tokens])?;
    let h = tape.add(h, gv.encoder_positions)?;

    let len = c.pair_len();
    let valid = c.frame_slots + query.len();
    let key_mask: Vec<bool> = (0..len).map(|j| j < valid).collect();
    let mask: Vec<bool> = (0..len * len).map(|i| key_mask[i % len]).collect();
    let states = attention_block(
        tape,
        h,
        h,
        (gv.enc_query, gv.enc_key, gv.enc_value, gv.enc_output),
        &mask,
    )?;
    Ok(EncodedPair {
        states,
        key_mask,
        truncated,
    })
}

/// Stacks the k pair encodings into one `(k·L) × d` memory, block j at rows
/// `[j·L, (j+1)·L)`.
pub fn fid_concatenate(tape: &mut Tape, pairs: &[EncodedPair]) -> Result<Memory> {
    let Some(first) = pairs.first() else {
        return Err(Error::Contract("fusion needs at least one pair".into()));
    };
    let len = first.key_mask.len();
    if let Some(bad) = pairs.iter().find(|p| p.key_mask.len() != len) {
        return Err(Error::Contract(format!(
            "pair lengths differ: {len} vs {}",
            bad.key_mask.len()
        )));
    }
    let states: Vec<Var> = pairs.iter().map(|p| p.states).collect();
    Ok(Memory {
        states: tape.concat_rows(&states)?,
        key_mask: pairs
            .iter()
            .flat_map(|p| p.key_mask.iter().copied())
            .collect(),
    })
}

/// Decoder logits `[t × vocab]` for a prefix starting with BOS, causally masked.
pub fn decoder_logits(
    tape: &mut Tape,
    gv: &GeneratorVars,
    memory: &Memory,
    prefix: &[TokenId],
) -> Result<Var> {
    let c = gv.config;
    let t = prefix.len();
    if t == 0 {
        return Err(Error::Parameter(
            "decoder prefix must start with BOS".into(),
        ));
    }
    if t > c.max_target_len {
        return Err(Error::Parameter(format!(
            "decoder prefix of {t} tokens exceeds max_target_len {}",
            c.max_target_len
        )));
    }
    let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
    let x = tape.embedding(gv.token_embedding, &ids)?;
    let pos = tape.slice_rows(gv.decoder_positions, 0, t)?;
    let x = tape.add(x, pos)?;

    let causal: Vec<bool> = (0..t * t).map(|i| i % t <= i / t).collect();
    let x = attention_block(
        tape,
        x,
        x,
        (gv.self_query, gv.self_key, gv.self_value, gv.self_output),
        &causal,
    )?;
    let m = memory.key_mask.len();
    let cross: Vec<bool> = (0..t * m).map(|i| memory.key_mask[i % m]).collect();
    let x = attention_block(
        tape,
        x,
        memory.states,
        (
            gv.cross_query,
            gv.cross_key,
            gv.cross_value,
            gv.cross_output,
        ),
        &cross,
    )?;
    tape.matmul(x, gv.output_projection)
}

fn last_row_distribution(tape: &mut Tape, logits: Var) -> Result<Var> {
    let t = tape.shape(logits)[0];
    let last = tape.slice_rows(logits, t - 1, t)?;
    tape.softmax(last, 1.0, None)
}

/// `p(w_i | q, f_j, w_<i)` for one pair: a `[1 × vocab]` distribution.
pub fn decode_step_single(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pair: &EncodedPair,
    prefix: &[TokenId],
) -> Result<Var> {
    let logits = decoder_logits(tape, gv, &Memory::from(pair), prefix)?;
    last_row_distribution(tape, logits)
}

/// FiD next-token distribution over the concatenated memory.
pub fn fid_step(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    prefix: &[TokenId],
) -> Result<Var> {
    let memory = fid_concatenate(tape, pairs)?;
    let logits = decoder_logits(tape, gv, &memory, prefix)?;
    last_row_distribution(tape, logits)
}

fn check_arity(tape: &Tape, pairs: &[EncodedPair], scores: Var) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("fusion needs at least one pair".into()));
    }
    let k = tape.value(scores).len();
    if k != pairs.len() {
        return Err(Error::Contract(format!(
            "{} frame scores for {} pairs",
            k,
            pairs.len()
        )));
    }
    Ok(())
}

fn scores_row(tape: &mut Tape, scores: Var) -> Result<Var> {
    let k = tape.value(scores).len();
    tape.reshape(scores, vec![1, k])
}

/// Marginalized next-token distribution, `Σ_j score_j · p(w | q, f_j, w_<i)`.
pub fn mar_step(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    scores: Var,
    prefix: &[TokenId],
) -> Result<Var> {
    check_arity(tape, pairs, scores)?;
    let mut dists = Vec::with_capacity(pairs.len());
    for pair in pairs {
        dists.push(decode_step_single(tape, gv, pair, prefix)?);
    }
    let stacked = tape.concat_rows(&dists)?;
    let s = scores_row(tape, scores)?;
    tape.matmul(s, stacked)
}

fn teacher_forcing_input(target: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    match target.last() {
        None => return Err(Error::Parameter("target sequence is empty".into())),
        Some(&t) if t != EOS => {
            return Err(Error::Parameter("target sequence must end with EOS".into()))
        }
        _ => {}
    }
    if target.len() > max_len {
        return Err(Error::Parameter(format!(
            "target of {} tokens exceeds max_target_len {max_len}",
            target.len()
        )));
    }
    let mut input = Vec::with_capacity(target.len());
    input.push(BOS);
    input.extend_from_slice(&target[..target.len() - 1]);
    Ok(input)
}

/// Token-level marginalized log-likelihood,
/// `Σ_i log Σ_j score_j · p(w_i | q, f_j, w_<i)`.
pub fn mar_sequence_logprob(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    scores: Var,
    target: &[TokenId],
) -> Result<Var> {
    check_arity(tape, pairs, scores)?;
    let input = teacher_forcing_input(target, gv.config.max_target_len)?;
    let n = target.len();
    let v = gv.config.vocab_size;
    let picks: Vec<usize> = target
        .iter()
        .enumerate()
        .map(|(i, &w)| i * v + w as usize)
        .collect();
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let logits = decoder_logits(tape, gv, &Memory::from(pair), &input)?;
        let probs = tape.softmax(logits, 1.0, None)?;
        let p = tape.gather(probs, &picks)?;
        rows.push(tape.reshape(p, vec![1, n])?);
    }
    let per_pair = tape.concat_rows(&rows)?;
    let s = scores_row(tape, scores)?;
    let mixed = tape.matmul(s, per_pair)?;
    let logs = tape.log(mixed)?;
    Ok(tape.sum(logs))
}

/// `Σ_i log p(w_i | q, V_k, w_<i)` with the decoder reading all pairs at once.
pub fn fid_sequence_logprob(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    target: &[TokenId],
) -> Result<Var> {
    let input = teacher_forcing_input(target, gv.config.max_target_len)?;
    let memory = fid_concatenate(tape, pairs)?;
    let logits = decoder_logits(tape, gv, &memory, &input)?;
    let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let nll = tape.cross_entropy(logits, &targets)?;
    Ok(tape.scale(nll, -1.0))
}

/// Teacher-forced marginalized next-token distributions, one row per target
/// position: `[n × vocab]`, row `i` is `Σ_j score_j · p(· | q, f_j, w_<i)`.
pub fn mar_token_distributions(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    scores: Var,
    target: &[TokenId],
) -> Result<Var> {
    check_arity(tape, pairs, scores)?;
    let input = teacher_forcing_input(target, gv.config.max_target_len)?;
    let flat = target.len() * gv.config.vocab_size;
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let logits = decoder_logits(tape, gv, &Memory::from(pair), &input)?;
        let probs = tape.softmax(logits, 1.0, None)?;
        rows.push(tape.reshape(probs, vec![1, flat])?);
    }
    let per_pair = tape.concat_rows(&rows)?;
    let s = scores_row(tape, scores)?;
    let mixed = tape.matmul(s, per_pair)?;
    tape.reshape(mixed, vec![target.len(), gv.config.vocab_size])
}

/// Teacher-forced FiD next-token distributions, `[n × vocab]`.
pub fn fid_token_distributions(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    target: &[TokenId],
) -> Result<Var> {
    let input = teacher_forcing_input(target, gv.config.max_target_len)?;
    let memory = fid_concatenate(tape, pairs)?;
    let logits = decoder_logits(tape, gv, &memory, &input)?;
    tape.softmax(logits, 1.0, None)
}

/// Log-likelihood of a target given a single pair, no fusion.
pub fn seq2seq_logprob(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pair: &EncodedPair,
    target: &[TokenId],
) -> Result<Var> {
    fid_sequence_logprob(tape, gv, std::slice::from_ref(pair), target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub mode: FusionMode,
    pub distribution: Vec<f64>,
    /// MAR only: per-pair distributions.
    pub per_frame: Option<Vec<Vec<f64>>>,
    /// MAR only: the scores used for mixing.
    pub scores: Option<Vec<f64>>,
}

/// One fused decoding step with plain values out.
pub fn fused_step(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    scores: &[f64],
    mode: FusionMode,
    prefix: &[TokenId],
) -> Result<FusionOutput> {
    match mode {
        FusionMode::Mar => {
            let s = tape.constant(vec![1, scores.len()], scores.to_vec())?;
            check_arity(tape, pairs, s)?;
            let mut per_frame = Vec::with_capacity(pairs.len());
            let mut dists = Vec::with_capacity(pairs.len());
            for pair in pairs {
                let d = decode_step_single(tape, gv, pair, prefix)?;
                per_frame.push(tape.value(d).to_vec());
                dists.push(d);
            }
            let stacked = tape.concat_rows(&dists)?;
            let mixed = tape.matmul(s, stacked)?;
            Ok(FusionOutput {
                mode,
                distribution: tape.value(mixed).to_vec(),
                per_frame: Some(per_frame),
                scores: Some(scores.to_vec()),
            })
        }
        FusionMode::Fid => {
            let d = fid_step(tape, gv, pairs, prefix)?;
            Ok(FusionOutput {
                mode,
                distribution: tape.value(d).to_vec(),
                per_frame: None,
                scores: None,
            })
        }
    }
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding; stops after EOS or `max_len` tokens. The returned
/// sequence excludes BOS and includes EOS when it was produced.
pub fn greedy_generate(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pairs: &[EncodedPair],
    scores: &[f64],
    mode: FusionMode,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return Err(Error::Parameter("max_len must be at least 1".into()));
    }
    let max_len = max_len.min(gv.config.max_target_len);
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    while out.len() < max_len {
        let step = fused_step(tape, gv, pairs, scores, mode, &prefix)?;
        let tok = argmax(&step.distribution) as TokenId;
        out.push(tok);
        prefix.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorParams {
        GeneratorParams::init(
            GeneratorConfig {
                vocab_size: 10,
                d_model: 8,
                feature_dim: 5,
                frame_slots: 2,
                max_query_len: 3,
                max_target_len: 4,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn encode_pair_shape_and_truncation() {
        let p = tiny();
        let mut tape = Tape::new();
        let gv = p.attach(&mut tape);
        let pair = encode_pair(&mut tape, &gv, &[0.1, 0.2, 0.3, 0.4, 0.5], &[4, 5]).unwrap();
        assert_eq!(tape.shape(pair.states), &[5, 8]);
        assert_eq!(pair.key_mask, vec![true, true, true, true, false]);
        assert!(!pair.truncated);
        let long = encode_pair(&mut tape, &gv, &[0.1; 5], &[4, 5, 6, 7, 8]).unwrap();
        assert!(long.truncated);
        assert_eq!(tape.shape(long.states), &[5, 8]);
        assert!(encode_pair(&mut tape, &gv, &[0.1; 4], &[4]).is_err());
    }

    #[test]
    fn unknown_token_is_index_error() {
        let p = tiny();
        let mut tape = Tape::new();
        let gv = p.attach(&mut tape);
        let pair = encode_pair(&mut tape, &gv, &[0.1; 5], &[4]).unwrap();
        let err = decode_step_single(&mut tape, &gv, &pair, &[BOS, 99]).unwrap_err();
        assert!(matches!(err, Error::Index { .. }));
    }

    #[test]
    fn target_validation() {
        let p = tiny();
        let mut tape = Tape::new();
        let gv = p.attach(&mut tape);
        let pair = encode_pair(&mut tape, &gv, &[0.1; 5], &[4]).unwrap();
        assert!(fid_sequence_logprob(&mut tape, &gv, std::slice::from_ref(&pair), &[]).is_err());
        assert!(fid_sequence_logprob(&mut tape, &gv, std::slice::from_ref(&pair), &[5]).is_err());
        let s = tape.constant(vec![2], vec![0.5, 0.5]).unwrap();
        let err = mar_sequence_logprob(&mut tape, &gv, &[pair], s, &[5, EOS]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn fid_concat_rejects_mixed_lengths() {
        let p = tiny();
        let mut tape = Tape::new();
        let gv = p.attach(&mut tape);
        let a = encode_pair(&mut tape, &gv, &[0.1; 5], &[4]).unwrap();
        let mut b = a.clone();
        b.key_mask.push(true);
        assert!(matches!(
            fid_concatenate(&mut tape, &[a, b]),
            Err(Error::Contract(_))
        ));
        assert!(fid_concatenate(&mut tape, &[]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = tiny();
        let ck = p.to_checkpoint();
        let back = GeneratorParams::from_checkpoint(&ck).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), ck.to_bytes());
        assert_eq!(back.config, p.config);
    }
}
