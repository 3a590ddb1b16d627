use serde::Serialize;

use crate::caaf::{decode_head_outputs, propose_rois, BoxPrior, RefinedBox, RoI, RESIDUALS};
use crate::config::{OptimizerKind, PipelineConfig};
use crate::error::StageContext;
use crate::loss::{compose_total, LossBreakdown};
use crate::prconv::{FeatureSlice, SourceToggles};
use crate::scene::SyntheticScene;
use crate::tensor::{Adam, Graph, Tensor};
use crate::{Error, Stage, StageError};

use super::forward::{bev_features, forward, AnchorSet, ForwardVars, RoiSet};
use super::model::{FeatureWidths, Model};
use super::prepare::{prepare_scene, PreparedScene, StageCounts, StageTiming, Timer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AblationLabel {
    pub fusion_row: Option<char>,
    pub source_row: Option<char>,
    pub use_pseudo: bool,
    pub prconv: bool,
    pub caaf: bool,
    pub sources: SourceToggles,
}

impl AblationLabel {
    pub fn of(cfg: &PipelineConfig) -> Self {
        let (fusion_row, source_row) = cfg.ablation_rows();
        Self {
            fusion_row,
            source_row,
            use_pseudo: cfg.use_pseudo,
            prconv: cfg.prconv,
            caaf: cfg.caaf,
            sources: cfg.sources,
        }
    }
}

/// Deterministic summary of one pipeline run; timings live in
/// [`PipelineRun::timings`] so identical inputs give identical records.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineRecord {
    pub seed: u64,
    pub ablation: AblationLabel,
    pub empty_scene: bool,
    pub counts: StageCounts,
    pub widths: FeatureWidths,
    pub slices: Vec<FeatureSlice>,
    /// Mean absolute error of the completed depth against ground truth.
    pub depth_mae: Option<f64>,
    pub loss: LossBreakdown,
    /// Mean raw and pseudo gate values over all RoIs.
    pub gate_means: Option<[f64; 2]>,
    pub proposals: Vec<RoI>,
    pub refined: Vec<RefinedBox>,
}

impl PipelineRecord {
    pub fn to_json(&self) -> crate::Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("metrics record: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub record: PipelineRecord,
    pub timings: Vec<StageTiming>,
}

impl PipelineRun {
    pub fn timings_json(&self) -> crate::Result<String> {
        serde_json::to_string_pretty(&self.timings).map_err(|e| Error::Format(format!("timings: {e}")))
    }
}

impl PreparedScene {
    /// Geometry stages only; `None` when no raw point lies in range.
    pub fn new(cfg: &PipelineConfig, scene: &SyntheticScene) -> Result<Option<Self>, StageError> {
        cfg.validate().stage(Stage::Config)?;
        prepare_scene(cfg, scene, &mut Timer::default())
    }
}

fn proposals_for(model: &Model, prep: &PreparedScene, cfg: &PipelineConfig) -> Result<Vec<RoI>, StageError> {
    let bev = bev_features(model, prep).stage(Stage::Bev)?;
    let prior = BoxPrior {
        size: cfg.prior_size,
        z: cfg.prior_z,
    };
    propose_rois(&bev, cfg.top_n, &prior).stage(Stage::Proposals)
}

fn mean(t: &Tensor) -> f64 {
    if t.numel() == 0 {
        0.0
    } else {
        t.data().iter().sum::<f64>() / t.numel() as f64
    }
}

/// Geometry, model and RoIs of one scene, ready for forward passes.
#[derive(Clone, Debug)]
pub struct TrainingSetup {
    pub prep: PreparedScene,
    pub anchors: AnchorSet,
    pub rois: RoiSet,
}

impl TrainingSetup {
    /// Proposals come from `model`'s current BEV features and are then
    /// kept fixed.
    pub fn new(cfg: &PipelineConfig, scene: &SyntheticScene, model: &Model) -> Result<Option<Self>, StageError> {
        let Some(prep) = PreparedScene::new(cfg, scene)? else {
            return Ok(None);
        };
        Self::from_prepared(cfg, scene, model, prep, &mut Timer::default()).map(Some)
    }

    fn from_prepared(
        cfg: &PipelineConfig,
        scene: &SyntheticScene,
        model: &Model,
        prep: PreparedScene,
        timer: &mut Timer,
    ) -> Result<Self, StageError> {
        let proposals = timer.time(Stage::Proposals, || Ok(proposals_for(model, &prep, cfg)))??;
        let anchors = AnchorSet::new(&prep, &scene.boxes, cfg).stage(Stage::Proposals)?;
        let rois = timer.time(Stage::RoiPool, || {
            RoiSet::new(proposals, &scene.boxes, &prep.keypoints.positions, cfg)
        })?;
        Ok(Self { prep, anchors, rois })
    }

    pub fn forward(&self, g: &mut Graph, model: &Model, cfg: &PipelineConfig, trainable: bool) -> Result<(ForwardVars, crate::tensor::Bound), StageError> {
        let bound = if trainable {
            model.store.bind(g)
        } else {
            model.store.bind_frozen(g)
        };
        let v = forward(g, &bound, model, &self.prep, &self.anchors, &self.rois, cfg)?;
        Ok((v, bound))
    }
}

/// Runs every stage once with freshly initialized parameters and
/// summarizes the result.
pub fn run_pipeline(cfg: &PipelineConfig, scene: &SyntheticScene) -> Result<PipelineRun, StageError> {
    cfg.validate().stage(Stage::Config)?;
    let model = Model::new(cfg).stage(Stage::Config)?;
    run_with_model(cfg, scene, &model)
}

/// [`run_pipeline`] with given parameters.
pub fn run_with_model(cfg: &PipelineConfig, scene: &SyntheticScene, model: &Model) -> Result<PipelineRun, StageError> {
    let mut timer = Timer::default();
    let widths = model.widths;
    let Some(prep) = prepare_scene(cfg, scene, &mut timer)? else {
        let counts = StageCounts {
            raw_points: scene.raw_cloud.len(),
            ..StageCounts::default()
        };
        let loss = compose_total(Default::default(), cfg.alpha, cfg.beta).stage(Stage::Loss)?;
        return Ok(PipelineRun {
            record: PipelineRecord {
                seed: cfg.seed,
                ablation: AblationLabel::of(cfg),
                empty_scene: true,
                counts,
                widths,
                slices: Vec::new(),
                depth_mae: None,
                loss,
                gate_means: None,
                proposals: Vec::new(),
                refined: Vec::new(),
            },
            timings: timer.timings,
        });
    };
    let setup = TrainingSetup::from_prepared(cfg, scene, model, prep, &mut timer)?;
    let mut g = Graph::new();
    let (fv, _) = timer.time(Stage::Refine, || Ok(setup.forward(&mut g, model, cfg, false)))??;
    let parts = fv.losses.values(&g).stage(Stage::Loss)?;
    let loss = compose_total(parts, cfg.alpha, cfg.beta).stage(Stage::Loss)?;

    let rois = &setup.rois;
    let proposals = rois.rois[..rois.proposals].to_vec();
    let refined = match fv.refine_out {
        Some(out) => {
            let o = g.value(out);
            let rows: Vec<Vec<f64>> = (0..rois.proposals).map(|i| o.row(i).to_vec()).collect();
            let head = Tensor::from_rows(&rows, RESIDUALS + 1).stage(Stage::Refine)?;
            decode_head_outputs(&proposals, &head).stage(Stage::Refine)?
        }
        None => Vec::new(),
    };
    let gate_means = fv.gates.map(|(r, p)| [mean(g.value(r)), mean(g.value(p))]);

    let mut counts = setup.prep.counts.clone();
    counts.proposals = rois.proposals;
    counts.rois = rois.len();
    counts.positive_rois = rois.targets.positives.len();
    counts.positive_anchors = setup.anchors.targets.positives.len();
    Ok(PipelineRun {
        record: PipelineRecord {
            seed: cfg.seed,
            ablation: AblationLabel::of(cfg),
            empty_scene: false,
            counts,
            widths,
            slices: setup.prep.plan.slices(),
            depth_mae: setup.prep.depth_mae,
            loss,
            gate_means,
            proposals,
            refined,
        },
        timings: timer.timings,
    })
}

/// Loss trajectory of an overfit run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverfitReport {
    /// One row per evaluated step, the initial loss first.
    pub trajectory: Vec<LossBreakdown>,
    /// Final refinement confidence on the exact copy of each
    /// ground-truth box.
    pub gt_confidence: Vec<f64>,
}

impl OverfitReport {
    pub fn initial_total(&self) -> f64 {
        self.trajectory[0].total
    }

    pub fn final_total(&self) -> f64 {
        self.trajectory.last().expect("trajectory is never empty").total
    }

    pub fn min_gt_confidence(&self) -> f64 {
        self.gt_confidence.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LossBreakdown::CSV_HEADER);
        s.push('\n');
        for (i, b) in self.trajectory.iter().enumerate() {
            s.push_str(&b.csv_row(i));
            s.push('\n');
        }
        s
    }
}

/// Gradient descent on the total loss of a single scene.
///
/// Geometry and RoIs are computed once from the initial parameters and
/// then held fixed. Returns the trajectory and the trained model.
pub fn overfit_test(
    cfg: &PipelineConfig,
    scene: &SyntheticScene,
    steps: usize,
) -> Result<(OverfitReport, Model), StageError> {
    cfg.validate().stage(Stage::Config)?;
    if scene.boxes.is_empty() {
        return Err(Error::Domain("overfitting needs at least one ground-truth box".into())).stage(Stage::Scene);
    }
    let mut model = Model::new(cfg).stage(Stage::Config)?;
    let setup = TrainingSetup::new(cfg, scene, &model)?
        .ok_or_else(|| Error::Domain("no raw point inside the voxel range".into()))
        .stage(Stage::Voxelize)?;
    let mut adam = (cfg.optimizer == OptimizerKind::Adam).then(|| Adam::new(&model.store, cfg.learning_rate));
    let mut trajectory = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let (fv, bound) = setup.forward(&mut g, &model, cfg, true)?;
        let parts = fv.losses.values(&g).stage(Stage::Loss)?;
        let b = compose_total(parts, cfg.alpha, cfg.beta).stage(Stage::Loss)?;
        if !b.total.is_finite() || b.total > cfg.divergence_threshold {
            return Err(Error::Diverged { step, total: b.total }).stage(Stage::Loss);
        }
        trajectory.push(b);
        if step == steps {
            let out = g.value(fv.refine_out.expect("ground-truth copies make the RoI set non-empty"));
            let gt_confidence = setup
                .rois
                .gt_copies
                .iter()
                .map(|&i| 1.0 / (1.0 + (-out.get2(i, RESIDUALS)).exp()))
                .collect();
            return Ok((OverfitReport { trajectory, gt_confidence }, model));
        }
        let grads = g.backward(fv.total).stage(Stage::Backward)?;
        match adam.as_mut() {
            Some(a) => a.step(&mut model.store, &bound, &grads),
            None => model.store.sgd_step(&bound, &grads, cfg.learning_rate),
        }
    }
    unreachable!("the loop returns at the last step")
}
