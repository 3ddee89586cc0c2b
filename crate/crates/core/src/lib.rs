//! Motion data toolkit: curation filters for tracked-subject video clips,
//! a lossless pose-feature representation, a wavelet-wrapped finite-scalar
//! quantization tokenizer, a hybrid-attention autoregressive generator, and
//! evaluation metrics for reconstruction and generation quality.

pub mod curation;
pub mod diffcore;
pub mod fsq;
pub mod generator;
pub mod geom;
pub mod metrics;
pub mod repr;
pub mod synth;
pub mod wavelet;
