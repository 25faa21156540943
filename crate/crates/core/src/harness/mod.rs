//! Continual-learning runs, K sweeps, method comparisons and report files.

mod config;
mod experiments;
mod report;
mod run;

use sha2::{Digest, Sha256};

pub use config::{FisherKind, LayoutConfig, Method, RunConfig};
pub use experiments::{
    compare, compare_reports, routing_convergence, run_parallel, sweep_k, Check, Comparison, ConvergenceConfig,
    ConvergenceReport, Relation, RunSummary, SweepRow, SweepTable, TrendRow,
};
pub use report::{emit_comparison, emit_report, emit_sweep, index_dir, read_summary, series_csv};
pub use run::{agem_project, run_method, RunReport, TaskRouting};

pub(crate) fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}
