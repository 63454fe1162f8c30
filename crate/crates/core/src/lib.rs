//! Calibration-free mapping back-end for an uncalibrated primary camera
//! paired with an assistant camera at a fixed (unknown) spacing.

pub mod geometry;
pub mod spatial;
pub mod align;
pub mod correction;
pub mod simulator;
pub mod submap;
pub mod scale;
pub mod search;
pub mod pgo;
pub mod mapping;
pub mod eval;

pub use eval::{run_pipeline, MetricReport, PipelineError, PipelineOutput, RunConfig};
pub use geometry::{Intrinsics, Pose, Rotation, Vec3};

/// Any error produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] eval::ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metric(#[from] eval::MetricError),
    #[error(transparent)]
    Trajectory(#[from] eval::TrajectoryError),
    #[error(transparent)]
    Simulator(#[from] simulator::SimulatorError),
    #[error(transparent)]
    Submap(#[from] submap::SubmapError),
    #[error(transparent)]
    Search(#[from] search::SearchError),
    #[error(transparent)]
    Correction(#[from] correction::CorrectionError),
    #[error(transparent)]
    Scale(#[from] scale::ScaleError),
    #[error(transparent)]
    Pgo(#[from] pgo::PgoError),
    #[error(transparent)]
    Mapping(#[from] mapping::MappingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
