//! Desk-scale laboratory for structural energy-guided diffusion sampling.
//!
//! A labeled Gaussian mixture with an analytic score stands in for a frozen
//! image prior with a viewpoint bias. On top of it sit discrete VP diffusion
//! (DDPM/DDIM), a PCA feature subspace with a structural energy whose
//! gradient is injected into the noise prediction, an SDS-style distillation
//! loop that exhibits the frontal-bias failure and its correction, and the
//! metrics/sweep machinery to verify all of it.

pub mod control;
pub mod distill;
pub mod error;
pub mod exec;
pub mod features;
pub mod guidance;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use linalg::{Matrix, PcaModel};
pub use mixture::{Condition, MixturePrior, Mode, ViewBin};
pub use schedule::{NoiseSchedule, StepKind};
