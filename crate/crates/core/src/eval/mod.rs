//! Task metrics, clustering, stage evaluation, and router diagnostics.

mod cluster;
mod diagnostics;
mod metrics;
mod stages;

pub use cluster::{adjusted_rand_index, kmeans};
pub use diagnostics::{mean_omegas, router_diagnostics, separation_score, DiagnosticsReport, KMEANS_RESTARTS};
pub use metrics::{accuracy, macro_f1, mae, rmse, rouge1, rouge_l, rouge_tokens};
pub use stages::{evaluate_stages, parse_rating, MetricReport, StageMetrics, UserScore, F1_VARIANT, ROUGE_VARIANT};
