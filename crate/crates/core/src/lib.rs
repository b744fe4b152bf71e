//! Estimation and inference for linear change-plane models.
//!
//! Two models are supported. The continuous model
//! `y = xᵀβ + xᵀδ·1{qᵀψ > 0} + ε` and the binary model
//! `P(y = 1 | q) = α·1{qᵀψ ≤ 0} + β·1{qᵀψ > 0}`. Both are fitted by
//! minimizing a criterion in which the regime indicator is replaced by
//! `Φ(qᵀψ/σ)` for a small bandwidth `σ`, and both come with plug-in
//! sandwich inference.

pub mod error;
pub mod numerics;
pub mod model;
pub mod estimator;
pub mod inference;
pub mod oracle;
pub mod simulation;
pub mod cli;

pub use error::{Error, Result};
pub use model::{Bandwidth, BandwidthSource, BinaryDataset, ContinuousDataset, PsiBinary, ThetaContinuous};
