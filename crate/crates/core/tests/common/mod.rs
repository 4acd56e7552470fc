//! Tiny models, random cases and independent reference computations shared
//! by the integration tests and the acceptance suite.
#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sevit::generator::{
    decoder_logits, encode_pair, fid_sequence_logprob, mar_sequence_logprob, EncodedPair,
    GeneratorConfig, GeneratorParams, GeneratorVars, Memory,
};
use sevit::retriever::{
    encode_frame, encode_query_on, RetrieverConfig, RetrieverParams, RetrieverVars,
};
use sevit::tensor::{Tape, Tensor, Var};
use sevit::vocab::{TokenId, BOS, EOS};

pub const TINY_VOCAB: usize = 16;
pub const TINY_FEATURES: usize = 8;

pub fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        vocab_size: TINY_VOCAB,
        d_model: 16,
        feature_dim: TINY_FEATURES,
        frame_slots: 2,
        max_query_len: 4,
        max_target_len: 3,
    }
}

pub fn tiny_generator(seed: u64) -> GeneratorParams {
    GeneratorParams::init(tiny_generator_config(), seed).unwrap()
}

pub fn tiny_retriever(seed: u64) -> RetrieverParams {
    RetrieverParams::init(
        RetrieverConfig {
            vocab_size: TINY_VOCAB,
            embed_dim: 8,
            feature_dim: TINY_FEATURES,
            vector_dim: 8,
            temperature: 1.0,
        },
        seed,
    )
    .unwrap()
}

/// One (query, frames, target) example for the tiny model.
#[derive(Clone, Debug)]
pub struct TinyCase {
    pub query: Vec<TokenId>,
    pub frames: Vec<Vec<f64>>,
    pub target: Vec<TokenId>,
}

pub fn random_case(rng: &mut ChaCha8Rng, k: usize) -> TinyCase {
    let qlen = rng.random_range(1..=4);
    let query = (0..qlen)
        .map(|_| rng.random_range(4..TINY_VOCAB as TokenId))
        .collect();
    let frames = (0..k)
        .map(|_| {
            (0..TINY_FEATURES)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let tlen = rng.random_range(0..=2);
    let mut target: Vec<TokenId> = (0..tlen)
        .map(|_| rng.random_range(4..TINY_VOCAB as TokenId))
        .collect();
    target.push(EOS);
    TinyCase {
        query,
        frames,
        target,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn encode_pairs(tape: &mut Tape, gv: &GeneratorVars, case: &TinyCase) -> Vec<EncodedPair> {
    case.frames
        .iter()
        .map(|f| encode_pair(tape, gv, f, &case.query).unwrap())
        .collect()
}

/// Negative marginalized log-likelihood with frame scores computed on the
/// tape from the query encoder, so gradients reach the retriever.
pub fn mar_loss(tape: &mut Tape, g: &GeneratorParams, r: &RetrieverParams, case: &TinyCase) -> Var {
    mar_loss_with_vars(tape, g, r, case).0
}

pub fn mar_loss_with_vars(
    tape: &mut Tape,
    g: &GeneratorParams,
    r: &RetrieverParams,
    case: &TinyCase,
) -> (Var, RetrieverVars) {
    let gv = g.attach(tape);
    let rv = r.attach(tape);
    let q = encode_query_on(tape, &rv, &case.query).unwrap();
    let d = r.config.vector_dim;
    let mut fv = Vec::new();
    for f in &case.frames {
        fv.extend(encode_frame(f, r).unwrap());
    }
    let frames = tape.constant(vec![case.frames.len(), d], fv).unwrap();
    let sims = tape.matmul_bt(q, frames).unwrap();
    let scores = tape.softmax(sims, r.config.temperature, None).unwrap();
    let pairs = encode_pairs(tape, &gv, case);
    let lp = mar_sequence_logprob(tape, &gv, &pairs, scores, &case.target).unwrap();
    (tape.scale(lp, -1.0), rv)
}

pub fn fid_loss(tape: &mut Tape, g: &GeneratorParams, case: &TinyCase) -> Var {
    let gv = g.attach(tape);
    let pairs = encode_pairs(tape, &gv, case);
    let lp = fid_sequence_logprob(tape, &gv, &pairs, &case.target).unwrap();
    tape.scale(lp, -1.0)
}

/// Teacher-forced single-pair log-likelihood computed from raw decoder
/// logits with a plain log-softmax, independent of the fusion code.
pub fn reference_seq2seq(
    tape: &mut Tape,
    gv: &GeneratorVars,
    pair: &EncodedPair,
    target: &[TokenId],
) -> f64 {
    let mut input = vec![BOS];
    input.extend_from_slice(&target[..target.len() - 1]);
    let logits = decoder_logits(tape, gv, &Memory::from(pair), &input).unwrap();
    let vals = tape.value(logits).to_vec();
    let v = gv.config.vocab_size;
    target
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let row = &vals[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row[w as usize] - lse
        })
        .sum()
}

/// Worst relative error between tape gradients and a five-point central
/// difference over every entry of every tensor returned by `tensors`.
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

pub const FD_STEP: f64 = 1e-3;
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// `loss` evaluates the objective for the current parameter values;
/// `analytic[t]` is the tape gradient of tensor `t` (zeros when absent).
pub fn finite_difference_check<P>(
    params: &mut P,
    tensors: fn(&mut P) -> Vec<(String, &mut Tensor)>,
    analytic: &[Vec<f64>],
    loss: impl Fn(&P) -> f64,
) -> GradReport {
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let count = tensors(params).len();
    for t in 0..count {
        let numel = tensors(params)[t].1.numel();
        for i in 0..numel {
            let orig = tensors(params)[t].1.data[i];
            let at = |x: f64, params: &mut P| {
                tensors(params)[t].1.data[i] = x;
                loss(params)
            };
            let h = FD_STEP;
            let fp2 = at(orig + 2.0 * h, params);
            let fp1 = at(orig + h, params);
            let fm1 = at(orig - h, params);
            let fm2 = at(orig - 2.0 * h, params);
            tensors(params)[t].1.data[i] = orig;
            let numeric = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
            let e = rel_err(analytic[t][i], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!(
                    "{}[{i}] tape={:.6e} fd={numeric:.6e}",
                    tensors(params)[t].0,
                    analytic[t][i]
                );
            }
        }
    }
    report
}

/// Both parameter groups of a retrieval-augmented tiny model.
pub struct TinyModel {
    pub generator: GeneratorParams,
    pub retriever: RetrieverParams,
}

pub fn tiny_model_tensors(m: &mut TinyModel) -> Vec<(String, &mut Tensor)> {
    let mut out: Vec<(String, &mut Tensor)> = m
        .generator
        .named_mut()
        .into_iter()
        .map(|(n, t)| (format!("generator.{n}"), t))
        .collect();
    out.push((
        "retriever.query_embedding".into(),
        &mut m.retriever.query_embedding,
    ));
    out.push((
        "retriever.query_projection".into(),
        &mut m.retriever.query_projection,
    ));
    out
}

pub fn generator_tensors(g: &mut GeneratorParams) -> Vec<(String, &mut Tensor)> {
    g.named_mut()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect()
}

fn grad_or_zero(tape: &Tape, v: Var, numel: usize) -> Vec<f64> {
    tape.grad(v)
        .map_or_else(|| vec![0.0; numel], <[f64]>::to_vec)
}

pub fn mar_gradcheck(model: &mut TinyModel, case: &TinyCase) -> GradReport {
    let mut tape = Tape::new();
    let gv = model.generator.attach(&mut tape);
    let rv = model.retriever.attach(&mut tape);
    // Rebuild the loss on the same tape with these exact leaves.
    let q = encode_query_on(&mut tape, &rv, &case.query).unwrap();
    let mut fv = Vec::new();
    for f in &case.frames {
        fv.extend(encode_frame(f, &model.retriever).unwrap());
    }
    let frames = tape
        .constant(
            vec![case.frames.len(), model.retriever.config.vector_dim],
            fv,
        )
        .unwrap();
    let sims = tape.matmul_bt(q, frames).unwrap();
    let scores = tape.softmax(sims, 1.0, None).unwrap();
    let pairs = encode_pairs(&mut tape, &gv, case);
    let lp = mar_sequence_logprob(&mut tape, &gv, &pairs, scores, &case.target).unwrap();
    let loss = tape.scale(lp, -1.0);
    tape.backward(loss).unwrap();
    let gen_vars = generator_vars(&gv);
    let mut analytic: Vec<Vec<f64>> = model
        .generator
        .named()
        .iter()
        .zip(&gen_vars)
        .map(|((_, t), &v)| grad_or_zero(&tape, v, t.numel()))
        .collect();
    analytic.push(grad_or_zero(
        &tape,
        rv.query_embedding,
        model.retriever.query_embedding.numel(),
    ));
    analytic.push(grad_or_zero(
        &tape,
        rv.query_projection,
        model.retriever.query_projection.numel(),
    ));
    finite_difference_check(model, tiny_model_tensors, &analytic, |m| {
        let mut t = Tape::new();
        let l = mar_loss(&mut t, &m.generator, &m.retriever, case);
        t.scalar(l)
    })
}

pub fn fid_gradcheck(generator: &mut GeneratorParams, case: &TinyCase) -> GradReport {
    let mut tape = Tape::new();
    let gv = generator.attach(&mut tape);
    let pairs = encode_pairs(&mut tape, &gv, case);
    let lp = fid_sequence_logprob(&mut tape, &gv, &pairs, &case.target).unwrap();
    let loss = tape.scale(lp, -1.0);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = generator
        .named()
        .iter()
        .zip(generator_vars(&gv))
        .map(|((_, t), v)| grad_or_zero(&tape, v, t.numel()))
        .collect();
    finite_difference_check(generator, generator_tensors, &analytic, |g| {
        let mut t = Tape::new();
        let l = fid_loss(&mut t, g, case);
        t.scalar(l)
    })
}

/// Tape handles in the same order as `GeneratorParams::named`.
pub fn generator_vars(gv: &GeneratorVars) -> Vec<Var> {
    vec![
        gv.token_embedding,
        gv.frame_projection,
        gv.encoder_positions,
        gv.enc_query,
        gv.enc_key,
        gv.enc_value,
        gv.enc_output,
        gv.decoder_positions,
        gv.self_query,
        gv.self_key,
        gv.self_value,
        gv.self_output,
        gv.cross_query,
        gv.cross_key,
        gv.cross_value,
        gv.cross_output,
        gv.output_projection,
    ]
}

/// Brute-force top-k: frame `i` ranks by how many frames beat it (higher
/// similarity, or equal similarity and lower index).
pub fn argsort_oracle(sims: &[f64], k: usize) -> Vec<usize> {
    let n = sims.len();
    let mut ranked = vec![usize::MAX; n];
    for i in 0..n {
        let beaten_by = (0..n)
            .filter(|&j| sims[j] > sims[i] || (sims[j] == sims[i] && j < i))
            .count();
        ranked[beaten_by] = i;
    }
    ranked.truncate(k.min(n));
    ranked
}

/// Exact hypergeometric expectation of recall@k: `E[hits] / min(k, m)` with
/// `E[hits] = Σ_h h·C(m,h)·C(n−m,k−h) / C(n,k)`.
pub fn hypergeometric_recall(n: usize, m: usize, k: usize) -> f64 {
    fn choose(n: usize, r: usize) -> f64 {
        if r > n {
            return 0.0;
        }
        (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }
    let k = k.min(n);
    let total = choose(n, k);
    let hits: f64 = (0..=m.min(k))
        .map(|h| h as f64 * choose(m, h) * choose(n - m, k - h) / total)
        .sum();
    hits / k.min(m) as f64
}
