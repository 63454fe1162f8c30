//! Metrics, trajectory I/O, run configuration and the pipeline driver.

mod config;
mod metrics;
mod pipeline;
mod tum;

pub use config::{AblationConfig, ConfigError, EvalConfig, RunConfig, ABLATIONS};
pub use metrics::{ate, cloud_metrics, scale_drift_windows, Alignment, AteResult, CloudMetrics, MetricError, ScaleDrift};
pub use pipeline::{
    build_pose_graph, mean_pose, observed_extrinsics, replay_pipeline, run_pipeline, IntrinsicRow, MetricReport, PipelineError, PipelineOutput,
};
pub use tum::{format_pose, format_significant, read_trajectory, write_trajectory, TrajectoryError};
