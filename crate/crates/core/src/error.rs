use std::fmt;

/// Errors raised by the pipeline building blocks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward pass: {0}")]
    Backward(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("infeasible scene: {0}")]
    Infeasible(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: total loss {total}")]
    Diverged { step: usize, total: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage names used to tag errors raised by `run_pipeline`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Scene,
    Project,
    Complete,
    Pseudo,
    Voxelize,
    Hierarchy,
    Keypoints,
    Aggregate,
    Bev,
    Proposals,
    RoiPool,
    Fusion,
    Refine,
    Loss,
    Backward,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Scene => "scene",
            Stage::Project => "project",
            Stage::Complete => "complete",
            Stage::Pseudo => "pseudo",
            Stage::Voxelize => "voxelize",
            Stage::Hierarchy => "hierarchy",
            Stage::Keypoints => "keypoints",
            Stage::Aggregate => "aggregate",
            Stage::Bev => "bev",
            Stage::Proposals => "proposals",
            Stage::RoiPool => "roi_pool",
            Stage::Fusion => "fusion",
            Stage::Refine => "refine",
            Stage::Loss => "loss",
            Stage::Backward => "backward",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An [`Error`] tagged with the pipeline stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

/// Tags a plain [`Result`] with a [`Stage`].
pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}
