pub mod bayes;
pub mod constraints;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use bayes::{brute_force_bayes, BayesResult, DiscreteInstance};
pub use constraints::{check_constraints, check_representation, ConstraintOptions, ConstraintReport};
pub use experiment::{run_experiment, sweep_shift_severity, ExperimentConfig, MethodSpec, RunReport};
pub use metrics::{evaluate, Metrics};
pub use report::{read_report, write_report};
