//! Synthetic street scenes observed by a two-camera rig, and a simulated
//! black-box reconstructor that corrupts them the way a self-calibrating
//! monocular system would.

mod output;
mod scene;
mod trajectory;
mod world;

pub use output::{DistortionConfig, SubmapDistortion};
pub use scene::{place_buildings, Building, SceneConfig, SpatialHash};
pub use trajectory::{HeadingTerm, Trajectory, TrajectoryKind};
pub use world::{FrameObservation, LoopConfig, World, WorldConfig, WORLD_FORMAT_VERSION};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimulatorError {
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
    #[error("the world has no landmarks")]
    NoLandmarks,
    #[error("frame {0} does not exist")]
    UnknownFrame(usize),
    #[error("frames {a} and {b} share {found} landmarks, {required} required")]
    InsufficientCovisibility {
        a: usize,
        b: usize,
        found: usize,
        required: usize,
    },
    #[error("frame {0} paired with itself")]
    DegeneratePair(usize),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("world serialization failed: {0}")]
    Serialization(String),
    #[error("world format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(String),
}
