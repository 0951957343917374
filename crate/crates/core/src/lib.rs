//! Quantum characterization of photon-number-resolving detectors.
//!
//! The pipeline runs from raw pulse amplitudes to a validated detector model:
//!
//! 1. [`sim`] generates seeded pulse-height traces for a configurable
//!    transition-edge sensor, with ground-truth counts.
//! 2. [`calibration`] fits a Gaussian mixture to each amplitude histogram,
//!    places thresholds at the valleys and bins events into photon counts.
//! 3. [`tomography`] inverts `p = Pi q` for the diagonal POVM by regularized
//!    least squares on the column simplex.
//! 4. [`estimation`] fits the linear detector (efficiency and dark counts)
//!    by maximum likelihood.
//! 5. [`metrics`] compares reconstruction, measurement and the linear model.
//!
//! [`photon_stats`] holds the closed-form Poisson/binomial machinery shared
//! by all stages.

pub mod calibration;
pub mod error;
pub mod estimation;
pub mod metrics;
pub mod optimize;
pub mod photon_stats;
pub mod sim;
pub mod tomography;

pub use calibration::{CalibrationConfig, CountTable, GaussianMixtureFit, ThresholdSet};
pub use error::{Error, Result};
pub use estimation::{EfficiencyEstimate, EstimationConfig};
pub use photon_stats::{CountDistribution, LinearDetectorModel, PovmMatrix, Probe, ProbeEnsemble};
pub use sim::{AmplitudeTrace, DetectorPhysicalConfig};
pub use tomography::{ReconstructionConfig, ReconstructionResult};
