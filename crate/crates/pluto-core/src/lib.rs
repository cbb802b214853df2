//! PLUTO: plug-and-play modular test-time adaptation for a small vision
//! transformer.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense row-major `f64` tensors and the handful of numeric
//!   kernels everything else is built from.
//! * [`autodiff`] — a tape-based reverse-mode differentiation engine plus a
//!   finite-difference oracle used to cross-check every gradient path.
//! * [`optim`] — SGD (with momentum) and AdamW with warmup + cosine decay.
//! * [`synth`] — synthetic labeled image domains with parameterized
//!   corruption shifts, and the Gaussian-mixture bound oracle.
//! * [`vit`] — a tiny frozen ViT backbone with pluggable PET modules and
//!   exposed LayerNorm affine state; includes source-module pretraining.
//! * [`pet`] — PET module records, parameter-count formulas, the binary
//!   container format, and the on-disk module store.
//! * [`selector`] — the attention-based module selector: per-sample source
//!   weights, weighted pseudo-labels, supervised init and entropy-driven
//!   test-time updates.
//! * [`samln`] — sharpness-aware adaptation of LayerNorm affine parameters
//!   with high-entropy sample filtering.
//! * [`engine`] — the full streaming adaptation loop: weighting, top-M
//!   selection, selective LN updates, baselines and forgetting evaluation.

pub mod autodiff;
pub mod engine;
pub mod error;
pub mod optim;
pub mod pet;
pub mod rng;
pub mod samln;
pub mod selector;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{PlutoError, Result};
pub use tensor::Tensor;
