use std::time::Instant;

use serde::Serialize;

use crate::calib::{project_points, rasterize_depth, PixelDepthSample, SparseDepthMap};
use crate::cloud::{build_pseudo_cloud, farthest_point_sample, voxelize, KeypointSet, PseudoPointCloud, VoxelGrid};
use crate::config::{KeypointSource, PipelineConfig};
use crate::depth::{depth_loss, DenseDepthMap, DepthCompleter, MorphologicalCompleter};
use crate::error::StageContext;
use crate::prconv::{AggregationConfig, AggregationPlan, BevLayout, BranchGeometry, HierarchyTopology, LEVELS};
use crate::scene::SyntheticScene;
use crate::tensor::Tensor;
use crate::{Error, Stage, StageError};

use super::model::{pseudo_input_norm, raw_input_norm, RAW_FIELDS};

/// Wall-clock time of one stage, kept out of the deterministic record.
#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Default)]
pub(crate) struct Timer {
    pub(crate) timings: Vec<StageTiming>,
}

impl Timer {
    pub(crate) fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> crate::Result<T>) -> Result<T, StageError> {
        let start = Instant::now();
        let out = f().stage(stage);
        self.timings.push(StageTiming {
            stage: stage.name(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// Sizes of the intermediate products of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageCounts {
    pub raw_points: usize,
    pub raw_in_range: usize,
    pub projected: usize,
    pub sparse_valid: usize,
    pub pseudo_points: usize,
    pub pseudo_in_range: usize,
    pub raw_levels: [usize; LEVELS],
    pub pseudo_levels: Option<[usize; LEVELS]>,
    pub keypoints: usize,
    pub isolated_keypoints: usize,
    pub bev_occupied: usize,
    pub proposals: usize,
    pub rois: usize,
    pub positive_rois: usize,
    pub positive_anchors: usize,
}

/// Scene geometry that stays fixed while the model trains: clouds,
/// voxel hierarchies, keypoints, neighborhoods and BEV placement.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub sparse: SparseDepthMap,
    pub dense: DenseDepthMap,
    pub pseudo_cloud: PseudoPointCloud,
    pub raw_positions: Vec<[f64; 3]>,
    /// Normalized `x y z intensity` rows of the in-range raw points.
    pub raw_features: Tensor,
    pub pse_positions: Vec<[f64; 3]>,
    /// Normalized pseudo-point rows (in range), empty without the pseudo branch.
    pub pse_features: Tensor,
    pub raw_topology: HierarchyTopology,
    pub pse_topology: Option<HierarchyTopology>,
    pub keypoints: KeypointSet,
    pub plan: AggregationPlan,
    pub bev: BevLayout,
    pub depth_mae: Option<f64>,
    pub counts: StageCounts,
}

pub(crate) fn aggregation_config(cfg: &PipelineConfig) -> AggregationConfig {
    AggregationConfig {
        radii: cfg.radii,
        max_neighbors: cfg.max_neighbors,
        pool_mode: cfg.pool_mode,
        sources: cfg.sources,
    }
}

fn in_range(p: &[f64], cfg: &PipelineConfig) -> bool {
    (0..3).all(|k| p[k] >= cfg.range_min[k] && p[k] < cfg.range_max[k])
}

fn crop(rows: Vec<Vec<f64>>, cfg: &PipelineConfig, width: usize) -> crate::Result<(Vec<[f64; 3]>, Tensor)> {
    let kept: Vec<Vec<f64>> = rows.into_iter().filter(|r| in_range(r, cfg)).collect();
    let positions = kept.iter().map(|r| [r[0], r[1], r[2]]).collect();
    Ok((positions, Tensor::from_rows(&kept, width)?))
}

/// Runs every geometry stage. Returns `Ok(None)` when no raw point falls
/// inside the voxel range (nothing to detect).
pub(crate) fn prepare_scene(
    cfg: &PipelineConfig,
    scene: &SyntheticScene,
    timer: &mut Timer,
) -> Result<Option<PreparedScene>, StageError> {
    let mut counts = StageCounts {
        raw_points: scene.raw_cloud.len(),
        ..StageCounts::default()
    };
    let raw_rows: Vec<Vec<f64>> = (0..scene.raw_cloud.len())
        .map(|i| {
            let p = scene.raw_cloud.points[i];
            vec![p[0], p[1], p[2], scene.raw_cloud.intensity_at(i)]
        })
        .collect();
    let (raw_positions, raw_rows) = crop(raw_rows, cfg, RAW_FIELDS).stage(Stage::Voxelize)?;
    counts.raw_in_range = raw_positions.len();
    if raw_positions.is_empty() {
        return Ok(None);
    }

    let sparse = timer.time(Stage::Project, || {
        let samples: Vec<PixelDepthSample> =
            project_points(&scene.raw_cloud, &scene.calib).into_iter().map(|(_, s)| s).collect();
        counts.projected = samples.len();
        rasterize_depth(&samples, scene.calib.width(), scene.calib.height())
    })?;
    counts.sparse_valid = sparse.valid_count();

    let dense = timer.time(Stage::Complete, || MorphologicalCompleter::default().complete(&scene.image, &sparse))?;
    let depth_mae = match &scene.gt_depth {
        Some(gt) => Some(depth_loss(&dense, gt, &vec![true; gt.cells().len()]).stage(Stage::Complete)?),
        None => None,
    };

    let pseudo_cloud = timer.time(Stage::Pseudo, || build_pseudo_cloud(&scene.image, &dense, &scene.calib, cfg.stride))?;
    counts.pseudo_points = pseudo_cloud.len();

    let voxel = [cfg.voxel_size; 3];
    let (raw_features, pse_positions, pse_features, raw_grid, pse_grid) = timer.time(Stage::Voxelize, || {
        let raw_grid = voxelize(&raw_rows, voxel, cfg.range_min, cfg.range_max)?;
        let raw_features = raw_input_norm(cfg).apply(&raw_rows)?;
        if !cfg.use_pseudo {
            return Ok((raw_features, Vec::new(), Tensor::zeros(vec![0, PseudoPointCloud::FIELDS]), raw_grid, None));
        }
        let m = pseudo_cloud.to_matrix();
        let rows: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
        let (pos, pse_rows) = crop(rows, cfg, PseudoPointCloud::FIELDS)?;
        let grid = voxelize(&pse_rows, voxel, cfg.range_min, cfg.range_max)?;
        let feats = pseudo_input_norm(cfg).apply(&pse_rows)?;
        Ok((raw_features, pos, feats, raw_grid, Some(grid)))
    })?;
    counts.pseudo_in_range = pse_positions.len();

    let (raw_topology, pse_topology) = timer.time(Stage::Hierarchy, || {
        let raw = HierarchyTopology::build(&raw_grid)?;
        let pse = match (&pse_grid, cfg.prconv) {
            (Some(g), true) if g.is_empty() => {
                return Err(Error::Domain("no pseudo point falls inside the voxel range".into()))
            }
            (Some(g), true) => Some(HierarchyTopology::build(g)?),
            _ => None,
        };
        Ok((raw, pse))
    })?;
    let level_sizes = |t: &HierarchyTopology| std::array::from_fn(|k| t.level(k).len());
    counts.raw_levels = level_sizes(&raw_topology);
    counts.pseudo_levels = pse_topology.as_ref().map(level_sizes);

    let keypoints = timer.time(Stage::Keypoints, || match cfg.keypoint_source {
        KeypointSource::Raw => farthest_point_sample(&raw_positions, cfg.keypoint_count, 0),
        KeypointSource::Union => {
            let all: Vec<[f64; 3]> = raw_positions.iter().chain(&pse_positions).copied().collect();
            farthest_point_sample(&all, cfg.keypoint_count, 0)
        }
    })?;
    counts.keypoints = keypoints.len();

    let plan = timer.time(Stage::Aggregate, || {
        let raw = BranchGeometry {
            positions: &raw_positions,
            point_width: RAW_FIELDS,
            topology: Some(&raw_topology),
            level_widths: cfg.level_widths,
        };
        let pse = cfg.use_pseudo.then(|| BranchGeometry {
            positions: &pse_positions,
            point_width: PseudoPointCloud::FIELDS,
            topology: pse_topology.as_ref(),
            level_widths: cfg.level_widths,
        });
        AggregationPlan::new(&keypoints.positions, raw, pse, &aggregation_config(cfg))
    })?;
    counts.isolated_keypoints = plan.isolated().iter().filter(|&&b| b).count();

    let bev = timer.time(Stage::Bev, || {
        Ok(BevLayout::new(raw_topology.level(LEVELS - 1), cfg.level_widths[LEVELS - 1]))
    })?;
    counts.bev_occupied = bev.occupied().len();

    Ok(Some(PreparedScene {
        sparse,
        dense,
        pseudo_cloud,
        raw_positions,
        raw_features,
        pse_positions,
        pse_features,
        raw_topology,
        pse_topology,
        keypoints,
        plan,
        bev,
        depth_mae,
        counts,
    }))
}

impl PreparedScene {
    pub fn raw_grid(&self) -> &VoxelGrid {
        self.raw_topology.level(0)
    }
}
