//! Simulation and analysis toolkit for a three-party continuous-variable
//! secure-access protocol.
//!
//! A dealer distributes a three-mode Gaussian state (modes ordered C, B, A)
//! and encodes a displacement on party A's arm. Depending on which parties
//! pool their homodyne outcomes, the displacement can be estimated with
//! different precision. The crate covers:
//!
//! - [`gaussian`]: covariance-matrix representation and the Gaussian
//!   operations used to build the dealer state under loss and excess noise.
//! - [`sampler`]: seeded homodyne and dual-homodyne sampling.
//! - [`estimators`]: coalition estimators, gain optimisation and MSE reports.
//! - [`bounds`]: closed-form limits (thermal-state HCRB, ideal coalition MSEs)
//!   and model predictions.
//! - [`certificates`]: verification of the primal/dual SDP certificates for
//!   the thermal-state HCRB.
//! - [`security`]: the scaled chi-squared law of batch MSEs, access
//!   thresholds, security/success probabilities and mutual information.
//! - [`protocol`]: full protocol rounds with sifting, entanglement
//!   verification and abort policies.
//!
//! All quadratures are in shot-noise units (`[x, p] = 2i`, vacuum variance 1).

#![forbid(unsafe_code)]

pub mod bounds;
pub mod certificates;
pub mod error;
pub mod estimators;
pub mod gaussian;
pub mod protocol;
pub mod sampler;
pub mod security;
pub mod stats;

pub use bounds::ThermalParams;
pub use certificates::CertificateReport;
pub use error::{Error, Result};
pub use estimators::{Coalition, GainSet, MseReport};
pub use gaussian::{ExperimentModel, GaussianState, Party, Quadrature};
pub use protocol::{DisplacementPlan, ProtocolPolicy, RoundRecord};
pub use sampler::{Measurement, MeasurementAssignment, OutcomeMatrix, RandomStream};
pub use security::{MseDistribution, SecurityReport};
