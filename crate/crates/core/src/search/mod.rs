//! Outer loop: random search, correlation benchmarking, anytime selection
//! and ablation drivers.

mod ablate;
mod bench;
mod stats;

pub use ablate::{
    ablate, run_setting, settings, summarize, write_ablation_csv, AblationAxis, AblationBase,
    AblationRow, Setting,
};
pub use bench::{
    correlate_with, correlation_benchmark, random_search, selection_score, Bench, CorrelationPair,
    CorrelationReport, SearchCandidate, SearchReport, TruthCache,
};
pub use stats::{anytime_auc, mean, one_sided_p, pearson_r};
