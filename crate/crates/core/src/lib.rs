//! Regret-based invariant representation learning on small synthetic problems.
//!
//! A representation `φ` and predictor `f` are trained against per-environment
//! oracle and held-out heads, optionally with a descriptor classifier that
//! proposes adversarial feature perturbations. Everything runs on a small
//! reverse-mode tape over dense `f64` matrices.

pub mod autodiff;
pub mod environments;
pub mod error;
pub mod harness;
pub mod linear;
pub mod models;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use autodiff::{finite_diff_check, sgd_step, FdOptions, FdReport, NodeId, ParamId, ParamStore, Tape};
pub use environments::{
    cluster_envs, gen_descriptor_envs, gen_translation_envs, read_envs, sample_minibatches, write_envs, Batch, Descriptor, DescriptorConfig,
    Environment, EnvironmentSet, Example, GeneratorConfig, Label, Labels, Sampling, Task, TranslationConfig,
};
pub use error::{Error, Result};
pub use harness::{
    brute_force_bayes, check_constraints, check_representation, evaluate, read_report, run_experiment, sweep_shift_severity, write_report,
    ConstraintOptions, ConstraintReport, ExperimentConfig, MethodSpec, Metrics, RunReport,
};
pub use models::{init_players, Activation, ArchConfig, GKind, HeadKind, PlayerSet, Role};
pub use objectives::{
    build_objective, crossgrad_augmented_loss, erm_objective, irm_penalty, player_loss, rgm_objective, srgm_objective, Method, ObjectiveConfig,
    Player, RegretTerm, StepBatches,
};
pub use tensor::Tensor;
pub use trainer::{refit_oracles, rgm_step, srgm_step, train, train_step, BatchStream, RefitConfig, TrainConfig, TrainOutput};
