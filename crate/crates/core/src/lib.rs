//! Latent-trajectory language modelling: noise schedules, a numerical lab for
//! the diffusion/autoregression correspondence, per-token flow refinement, the
//! transformer flow field, its training objective, sampling and run tooling.

pub mod schedules;
pub mod duality_lab;
pub mod flow;
pub mod data;
pub mod model;
pub mod training;
pub mod checkpoint;
pub mod sampling;
pub mod run;

pub use candle_core::DType;
