//! End-to-end orchestration: geometry preparation, the learned model,
//! the forward/loss graph, single runs, the overfit loop and the
//! gradient-check suite.

mod forward;
pub mod gradsuite;
mod model;
mod prepare;
mod run;

pub use forward::{bev_features, forward, match_targets, AnchorSet, ForwardVars, HeadTargets, RoiSet};
pub use model::{pseudo_input_norm, raw_input_norm, FeatureWidths, Model, RAW_FIELDS};
pub use prepare::{PreparedScene, StageCounts, StageTiming};
pub use run::{
    overfit_test, run_pipeline, run_with_model, AblationLabel, OverfitReport, PipelineRecord, PipelineRun,
    TrainingSetup,
};
