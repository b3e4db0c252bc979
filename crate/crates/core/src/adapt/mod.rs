//! Test-time adaptation: entropy minimization over channel-wise modulation,
//! statistics replacement, and the fully test-time baselines.

pub mod check;
pub mod eval;
pub mod methods;
pub mod modulation;
pub mod optim;
pub mod report;
pub mod stats;

pub use check::{modulation_gradient_error, random_case, GradCase, GRADCHECK_STEP};
pub use eval::{EvalReport, ExampleShift, HISTOGRAM_BINS, SHIFT_EXAMPLES};
pub use methods::{
    adapt_batchnorm_only, adapt_entropy, adapt_entropy_full_params, adapt_oracle, adapt_pseudo_label,
    adapt_source_only, adapt_with, init_modulation, AdaptationConfig, AdaptedModel, AdaptedStats, EpochLog,
    Method, OpCounts, StatsMode, StepLog, DEFAULT_THRESHOLD,
};
pub use modulation::{beta_name, gamma_name, ModulationSet, SlotModulation};
pub use optim::{AdamConfig, AdamState, ParamStore, Schedule};
pub use stats::estimate_population_stats;
