//! Dynamic-activation inference engine and analysis toolkit for a small
//! deterministic CPU transformer.
//!
//! The crate covers the full pipeline:
//!
//! - [`model`]: the transformer substrate — deterministic weight generation,
//!   a bit-exact weight file format, byte-level tokenization, dense and
//!   masked forward passes with activation tracing.
//! - [`meter`]: per-neuron contributions, activation magnitudes, truncation
//!   error (cett), and mask construction.
//! - [`search`]: offline error-controlled search for per-layer base
//!   thresholds under a mean-cett budget, and the threshold policy file.
//! - [`cogload`]: token-level surprisal and entropy with sequence-level
//!   normalization and quantile threshold calibration.
//! - [`runtime`]: load-aware sparse generation with dense, static top-k /
//!   top-p, and ablation modes, plus latency benchmarking support.
//! - [`simlab`]: hybrid-sequence construction, activation-matrix similarity
//!   (cka / cosine), the prefix-flocking experiment, and heatmap export.
//! - [`panel`]: fixed-effects (within-estimator) panel regression with
//!   classical inference and table/JSON reporting.
//!
//! With the default `parallel` feature the data-parallel inner loops run on
//! rayon; disabling it falls back to sequential execution with bit-identical
//! results.

pub mod cogload;
pub mod corpus;
pub mod error;
pub mod meter;
pub mod model;
pub mod panel;
pub mod par;
pub mod runtime;
pub mod search;
pub mod simlab;

pub use error::{Error, Result};
