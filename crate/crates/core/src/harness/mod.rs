//! Monte Carlo harness: scenarios, replications, aggregation, exact
//! enumeration, rate fits and export.

pub mod exact;
pub mod experiment;
pub mod export;
pub mod rates;
pub mod replication;
pub mod rng;
pub mod scenario;

pub use exact::{exact_enumeration, ExactLaw, MAX_EXACT_N};
pub use experiment::{aggregate, run_experiment, Estimate, ExperimentSummary};
pub use export::{export_summary, write_summary, Format};
pub use rates::{rate_fit, RateFit};
pub use replication::{run_replication, ReplicationRecord, Runner};
pub use scenario::{CovariateLaw, ErrorLaw, ExogenousLaw, ExogenousSpec, NamedExpr, OutcomeModel, ScenarioConfig};
