//! Rare-event analysis of a two-queue polling system with exhaustive service.
//!
//! The generic modules (`model`, `geometry`, `asymptotics`, `batch`) work over any
//! [`Real`] scalar. Simulation and the linear-solve oracle run in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod batch;
pub mod error;
pub mod geometry;
pub mod model;
pub mod montecarlo;
pub mod oracle;
pub mod scalar;

pub use error::{Error, Result};
pub use model::{Sheet, State};
pub use scalar::Real;

pub type Params = model::Params<f64>;
pub type Params32 = model::Params<f32>;
pub type TwistedRates = model::TwistedRates<f64>;
pub type KernelRow = model::KernelRow<f64>;
pub type RegimeReport = geometry::RegimeReport<f64>;
pub type SpecialPoints = geometry::SpecialPoints<f64>;
pub type Increments = geometry::Increments<f64>;
pub type TwistSolution = geometry::TwistSolution<f64>;
pub type NeySpitzerData = geometry::NeySpitzerData<f64>;
pub type AsymptoticEstimate = asymptotics::AsymptoticEstimate<f64>;
pub type SpiralProfile = asymptotics::SpiralProfile<f64>;
pub type ArrivalPgf = batch::ArrivalPgf<f64>;
pub type BatchParams = batch::BatchParams<f64>;
