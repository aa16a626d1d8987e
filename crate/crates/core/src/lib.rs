//! Quickest change detection in multistream data with double-mixture Shiryaev and
//! Shiryaev-Roberts rules.
//!
//! An unknown subset of `N` streams changes at an unknown time. The rules mix the
//! likelihood ratio over affected subsets (weights `p_B`) and over a discretized
//! post-change parameter grid (weights `W`), and stop when the statistic crosses `A`.

pub mod detectors;
pub mod error;
pub mod info;
pub mod likelihood;
pub mod model;
pub mod montecarlo;
pub mod numerics;
pub mod scenarios;
pub mod statistics;
pub mod verify;

pub use detectors::{Detector, DetectorConfig, DetectorKind, RunOutcome, Stop};
pub use error::{QcdError, Result};
pub use likelihood::{LlrSource, SubsetWeights};
pub use model::{ChangeSpec, ObservationBatch, PriorKind, PriorSpec};
pub use montecarlo::{McConfig, McEstimate};
pub use scenarios::ScenarioSpec;
pub use statistics::{DetectorState, Evaluation, GridSpec, Statistic};
