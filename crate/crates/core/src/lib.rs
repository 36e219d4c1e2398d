//! Covariate-adaptive randomization with `rho : (1 - rho)` allocation and
//! damped imbalance feedback.
//!
//! * [`feature_map`]: covariate feature maps and the scale normalizer.
//! * [`allocation`]: allocation functions and their contract checks.
//! * [`engine`]: the sequential assignment state machine.
//! * [`analysis`]: projections, design variances and two-sample tests.
//! * [`harness`]: Monte Carlo scenarios, exact enumeration and rate fits.

pub mod allocation;
pub mod analysis;
pub mod engine;
pub mod error;
pub mod expr;
pub mod feature_map;
pub mod harness;
pub mod normal;

pub use allocation::{AllocationFunction, AllocationKind, AllocationSpec, ValidationReport};
pub use analysis::{ProjectionFit, TestKind, TestResult, TheoreticalVariances};
pub use engine::{Arm, Design, ImbalanceReport, TrialConfig, TrialState, UnitRecord};
pub use error::{CarError, Result};
pub use expr::Expr;
pub use feature_map::{DiscreteWeights, FeatureMap, FeatureMapSpec};
