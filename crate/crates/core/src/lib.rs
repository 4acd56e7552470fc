//! Semi-parametric video-grounded text generation at desk scale.
//!
//! A frame retriever selects query-relevant frames from a pre-computed
//! per-video vector store; a small encoder-decoder reads each selected
//! (frame, query) pair and fuses them either by marginalizing per-frame
//! token distributions over frame scores or by concatenating encoder states
//! for the decoder's cross-attention.

// `!(x > 0.0)` is used deliberately so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod fsutil;
pub mod generator;
pub mod model;
pub mod report;
pub mod retriever;
pub mod synthbench;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
