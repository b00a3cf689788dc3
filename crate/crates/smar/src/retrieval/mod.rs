//! Exact top-k retrieval, metrics, routing, and experiment harnesses.

pub mod evaluate;
pub mod harness;
pub mod index;
pub mod metrics;

pub use evaluate::{evaluate, route, EvalOutcome, QueryEval};
pub use harness::{
    ablation_run, ablation_table_csv, metrics_csv, run_variant, split_rows, sweep_csv,
    weight_sweep, AblationOutput, HarnessConfig, MetricsRow, RunArtifacts, SweepRow, WeightParam,
    SPLITS,
};
pub use index::{build_index, topk, EmbeddingIndex, IndexMode};
pub use metrics::{macro_report, prf_at_k, query_metrics, MetricsReport, Prf, QueryMetrics};
