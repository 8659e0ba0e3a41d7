//! Block-partitioned joint attention with dynamic prompt/style fusion,
//! perturbation-bound verifiers, a rectified-flow toy model and a
//! token-scale inpainting harness.
//!
//! The numeric core (`linalg`, `attention`, `dssi`) is generic over
//! [`Scalar`]; the aliases below fix it to `f64` (or `f32` where noted).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod dssi;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod reflow;
pub mod scalar;

pub use analysis::suite::{verify_propositions, CheckRow, SuiteConfig};
pub use analysis::BoundReport;
pub use dssi::{DssiConfig, FusionMode};
pub use error::{Error, Result};
pub use linalg::SeededRng;
pub use pipeline::{ExperimentReport, PipelineConfig};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type TokenBlocks = attention::TokenBlocks<f64>;
pub type QkvBlocks = attention::QkvBlocks<f64>;
pub type BlockAttention = attention::BlockAttention<f64>;
pub type DitBlockWeights = attention::DitBlockWeights<f64>;
pub type AlignmentStrengths = dssi::AlignmentStrengths<f64>;
