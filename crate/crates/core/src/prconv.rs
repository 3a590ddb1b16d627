//! Pseudo-raw feature backbone.
//!
//! Each sensor branch turns its voxel grid into a four-level feature
//! hierarchy: level 1 maps the input voxel means through a linear layer,
//! and every further level re-voxelizes the previous level's centroids at
//! twice the voxel size, averages the member features and maps them
//! again. This multi-resolution voxel downsampling stands in for a sparse
//! 3D convolution stack.
//!
//! Keypoint features pool point neighborhoods (ball query) and per-level
//! voxel neighborhoods (voxel query) from both branches, concatenate the
//! pooled vectors and pass them through an MLP. The top raw level is
//! also flattened into a bird's-eye-view grid for the proposal stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{ball_query, voxel_query, voxelize_with_members, KeypointSet, VoxelGrid};
use crate::tensor::{Bound, Graph, LinearLayer, Mlp, ParamStore, PoolMode, Tensor, Var};
use crate::{Error, Result};

pub const LEVELS: usize = 4;

/// Fixed per-column affine normalization `(x − shift) · scale` applied to
/// point and voxel features before the first learned layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.ndim() != 2 || rows.shape()[1] != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "normalizer for {} columns applied to {:?}",
                self.dim(),
                rows.shape()
            )));
        }
        let c = self.dim();
        let data = rows
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.shift[i % c]) * self.scale[i % c])
            .collect();
        Tensor::new(rows.shape().to_vec(), data)
    }
}

/// Learned maps of one branch: input normalization plus one linear layer
/// per hierarchy level.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub norm: InputNorm,
    levels: Vec<LinearLayer>,
}

impl BranchParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        norm: InputNorm,
        widths: [usize; LEVELS],
        rng: &mut R,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(LEVELS);
        let mut in_dim = norm.dim();
        for (k, &w) in widths.iter().enumerate() {
            levels.push(LinearLayer::new(store, &format!("{name}.level{}", k + 1), in_dim, w, rng)?);
            in_dim = w;
        }
        Ok(Self { norm, levels })
    }

    pub fn from_layers(norm: InputNorm, levels: Vec<LinearLayer>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(Error::Config(format!("a branch needs {LEVELS} level layers, got {}", levels.len())));
        }
        let mut in_dim = norm.dim();
        for l in &levels {
            if l.in_dim() != in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "level layer expects {} inputs, previous width is {in_dim}",
                    l.in_dim()
                )));
            }
            in_dim = l.out_dim();
        }
        Ok(Self { norm, levels })
    }

    pub fn level_widths(&self) -> [usize; LEVELS] {
        std::array::from_fn(|k| self.levels[k].out_dim())
    }
}

/// Voxel geometry of all hierarchy levels and the fine→coarse merges.
#[derive(Clone, Debug)]
pub struct HierarchyTopology {
    levels: Vec<VoxelGrid>,
    merges: Vec<Vec<Vec<usize>>>,
}

impl HierarchyTopology {
    /// Level 1 is `grid` itself; level `k + 1` re-voxelizes the level-`k`
    /// centroids at twice the voxel size.
    pub fn build(grid: &VoxelGrid) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Domain("cannot build a hierarchy from an empty voxel grid".into()));
        }
        let mut levels = vec![grid.clone()];
        let mut merges = Vec::with_capacity(LEVELS - 1);
        for _ in 1..LEVELS {
            let prev = levels.last().expect("non-empty");
            let rows: Vec<Vec<f64>> = prev.centroids().iter().map(|c| c.to_vec()).collect();
            let centroids = Tensor::from_rows(&rows, 3)?;
            let size = prev.voxel_size().map(|s| s * 2.0);
            let (coarse, members) = voxelize_with_members(&centroids, size, prev.range_min(), prev.range_max())?;
            if members.iter().map(Vec::len).sum::<usize>() != prev.len() {
                return Err(Error::Domain("coarse level lost voxels at the range boundary".into()));
            }
            levels.push(coarse);
            merges.push(members);
        }
        Ok(Self { levels, merges })
    }

    pub fn levels(&self) -> &[VoxelGrid] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &VoxelGrid {
        &self.levels[k]
    }

    /// Member ordinals (at level `k`) of each voxel of level `k + 1`.
    pub fn merges(&self, k: usize) -> &[Vec<usize>] {
        &self.merges[k]
    }

    /// Level features on `g`, one `voxels × width` node per level.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, params: &BranchParams) -> Result<Vec<Var>> {
        let input = params.norm.apply(&self.levels[0].feature_matrix())?;
        let mut h = g.constant(input);
        let mut out = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            if k > 0 {
                h = g.segment_pool(h, &self.merges[k - 1], PoolMode::Avg)?;
            }
            let z = params.levels[k].forward(g, bound, h)?;
            h = g.relu(z);
            out.push(h);
        }
        Ok(out)
    }
}

/// A branch hierarchy with its evaluated level features.
#[derive(Clone, Debug)]
pub struct VoxelFeatureHierarchy {
    pub topology: HierarchyTopology,
    pub features: Vec<Tensor>,
}

impl VoxelFeatureHierarchy {
    pub fn top_grid(&self) -> &VoxelGrid {
        self.topology.level(LEVELS - 1)
    }

    pub fn to_bev(&self) -> Result<BevFeatureMap> {
        flatten_to_bev(self.top_grid(), &self.features[LEVELS - 1])
    }
}

pub fn build_hierarchy(grid: &VoxelGrid, params: &BranchParams, store: &ParamStore) -> Result<VoxelFeatureHierarchy> {
    let topology = HierarchyTopology::build(grid)?;
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let vars = topology.forward(&mut g, &bound, params)?;
    let features = vars.iter().map(|&v| g.value(v).clone()).collect();
    Ok(VoxelFeatureHierarchy { topology, features })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Raw,
    Pse,
}

/// Which pooled sources enter the keypoint concatenation: the point
/// neighborhoods and each of the four voxel levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceToggles {
    pub point: bool,
    pub conv: [bool; LEVELS],
}

impl Default for SourceToggles {
    fn default() -> Self {
        Self {
            point: true,
            conv: [true; LEVELS],
        }
    }
}

impl SourceToggles {
    pub fn any(&self) -> bool {
        self.point || self.conv.iter().any(|&c| c)
    }
}

#[derive(Clone, Debug)]
pub struct AggregationConfig {
    /// Ball radius for points, then the metric radius of each voxel level.
    pub radii: [f64; LEVELS + 1],
    pub max_neighbors: usize,
    pub pool_mode: PoolMode,
    pub sources: SourceToggles,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            radii: [0.4, 0.8, 1.2, 2.4, 4.8],
            max_neighbors: 16,
            pool_mode: PoolMode::Max,
            sources: SourceToggles::default(),
        }
    }
}

/// Geometry of one branch as seen by the aggregation planner.
#[derive(Clone, Copy, Debug)]
pub struct BranchGeometry<'a> {
    pub positions: &'a [[f64; 3]],
    pub point_width: usize,
    /// `None` when the branch has no voxel hierarchy (no conv sources).
    pub topology: Option<&'a HierarchyTopology>,
    pub level_widths: [usize; LEVELS],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SourceKind {
    Points,
    Level(usize),
}

/// One pooled block of the pre-MLP concatenation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureSlice {
    pub name: String,
    pub species: Species,
    pub width: usize,
}

#[derive(Clone, Debug)]
struct PlannedSlice {
    info: FeatureSlice,
    kind: SourceKind,
    groups: Vec<Vec<usize>>,
}

/// Voxel-query kernel radius (in voxels) covering `radius` meters.
pub fn kernel_radius(radius: f64, voxel_size: [f64; 3]) -> usize {
    let min = voxel_size.iter().copied().fold(f64::INFINITY, f64::min);
    (radius / min).ceil().max(0.0) as usize
}

/// Neighborhoods of every keypoint for every enabled source; fixed for a
/// given scene, so training steps only re-run [`AggregationPlan::forward`].
#[derive(Clone, Debug)]
pub struct AggregationPlan {
    keypoints: usize,
    pool_mode: PoolMode,
    slices: Vec<PlannedSlice>,
}

/// Graph handles of the aggregated keypoint features.
#[derive(Clone, Copy, Debug)]
pub struct KeypointVars {
    pub pre_mlp: Var,
    pub f_kp: Var,
    pub raw_channels: Var,
    pub pse_channels: Var,
}

/// Graph inputs of one branch: normalized point features and level
/// features.
#[derive(Clone, Debug)]
pub struct BranchVars {
    pub points: Var,
    pub levels: Vec<Var>,
}

impl AggregationPlan {
    pub fn new(
        keypoints: &[[f64; 3]],
        raw: BranchGeometry<'_>,
        pse: Option<BranchGeometry<'_>>,
        cfg: &AggregationConfig,
    ) -> Result<Self> {
        if keypoints.is_empty() {
            return Err(Error::Domain("aggregation needs at least one keypoint".into()));
        }
        if !cfg.sources.any() {
            return Err(Error::Config("at least one aggregation source must be enabled".into()));
        }
        let branches: Vec<(Species, BranchGeometry<'_>)> =
            std::iter::once((Species::Raw, raw)).chain(pse.map(|p| (Species::Pse, p))).collect();
        let tag = |s: Species| match s {
            Species::Raw => "raw",
            Species::Pse => "pse",
        };
        let mut slices = Vec::new();
        if cfg.sources.point {
            for (species, b) in &branches {
                let groups = ball_query(keypoints, b.positions, cfg.radii[0], cfg.max_neighbors)?.groups();
                slices.push(PlannedSlice {
                    info: FeatureSlice {
                        name: format!("point.{}", tag(*species)),
                        species: *species,
                        width: b.point_width,
                    },
                    kind: SourceKind::Points,
                    groups,
                });
            }
        }
        for k in 0..LEVELS {
            if !cfg.sources.conv[k] {
                continue;
            }
            for (species, b) in &branches {
                let Some(topo) = b.topology else { continue };
                let grid = topo.level(k);
                let kr = kernel_radius(cfg.radii[k + 1], grid.voxel_size());
                let groups = voxel_query(keypoints, grid, kr, cfg.max_neighbors)?.groups();
                slices.push(PlannedSlice {
                    info: FeatureSlice {
                        name: format!("conv{}.{}", k + 1, tag(*species)),
                        species: *species,
                        width: b.level_widths[k],
                    },
                    kind: SourceKind::Level(k),
                    groups,
                });
            }
        }
        Ok(Self {
            keypoints: keypoints.len(),
            pool_mode: cfg.pool_mode,
            slices,
        })
    }

    pub fn keypoints(&self) -> usize {
        self.keypoints
    }

    pub fn slices(&self) -> Vec<FeatureSlice> {
        self.slices.iter().map(|s| s.info.clone()).collect()
    }

    /// Width of the concatenation fed to the keypoint MLP.
    pub fn pre_mlp_width(&self) -> usize {
        self.slices.iter().map(|s| s.info.width).sum()
    }

    /// Width of the branch-derived channels for `species` (excluding the
    /// shared MLP output).
    pub fn species_width(&self, species: Species) -> usize {
        self.slices
            .iter()
            .filter(|s| s.info.species == species)
            .map(|s| s.info.width)
            .sum()
    }

    /// Keypoints whose neighborhoods are empty for every source.
    pub fn isolated(&self) -> Vec<bool> {
        (0..self.keypoints)
            .map(|i| self.slices.iter().all(|s| s.groups[i].is_empty()))
            .collect()
    }

    /// Pools every source, concatenates, and applies `mlp`.
    ///
    /// The returned species channels are `[f_kp | pooled slices of that
    /// species]`, which the RoI stage pools into the raw and pseudo RoI
    /// features.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        mlp: &Mlp,
        raw: &BranchVars,
        pse: Option<&BranchVars>,
    ) -> Result<KeypointVars> {
        let mut pooled = Vec::with_capacity(self.slices.len());
        for s in &self.slices {
            let branch = match s.info.species {
                Species::Raw => raw,
                Species::Pse => pse.ok_or_else(|| Error::Domain("pseudo slice planned without pseudo inputs".into()))?,
            };
            let source = match s.kind {
                SourceKind::Points => branch.points,
                SourceKind::Level(k) => *branch
                    .levels
                    .get(k)
                    .ok_or_else(|| Error::Domain(format!("branch has no level {}", k + 1)))?,
            };
            let width = g.value(source).shape()[1];
            if width != s.info.width {
                return Err(Error::ShapeMismatch(format!(
                    "slice {} planned with width {}, source has {width}",
                    s.info.name, s.info.width
                )));
            }
            pooled.push((s.info.species, g.segment_pool(source, &s.groups, self.pool_mode)?));
        }
        let all: Vec<Var> = pooled.iter().map(|(_, v)| *v).collect();
        let pre_mlp = g.concat(&all, 1)?;
        if mlp.in_dim() != self.pre_mlp_width() {
            return Err(Error::ShapeMismatch(format!(
                "keypoint MLP expects {} inputs, concatenation is {}",
                mlp.in_dim(),
                self.pre_mlp_width()
            )));
        }
        let f_kp = mlp.forward(g, bound, pre_mlp)?;
        let mut channels = |species: Species| -> Result<Var> {
            let mut parts = vec![f_kp];
            parts.extend(pooled.iter().filter(|(s, _)| *s == species).map(|(_, v)| *v));
            g.concat(&parts, 1)
        };
        let raw_channels = channels(Species::Raw)?;
        let pse_channels = channels(Species::Pse)?;
        Ok(KeypointVars {
            pre_mlp,
            f_kp,
            raw_channels,
            pse_channels,
        })
    }
}

/// Evaluated keypoint features.
#[derive(Clone, Debug)]
pub struct KeypointFeatureTable {
    pub slices: Vec<FeatureSlice>,
    /// Pre-MLP concatenation, one row per keypoint.
    pub pre_mlp: Tensor,
    pub f_kp: Tensor,
    pub raw_channels: Tensor,
    pub pse_channels: Tensor,
    /// Keypoints with no neighbor in any source (their pooled inputs are zero).
    pub isolated: Vec<bool>,
}

impl KeypointFeatureTable {
    pub fn len(&self) -> usize {
        self.f_kp.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Columns of `pre_mlp` belonging to the slice called `name`.
    pub fn slice(&self, name: &str) -> Option<Tensor> {
        let mut start = 0;
        for s in &self.slices {
            if s.name == name {
                let rows: Vec<Vec<f64>> = (0..self.pre_mlp.rows())
                    .map(|r| self.pre_mlp.row(r)[start..start + s.width].to_vec())
                    .collect();
                return Tensor::from_rows(&rows, s.width).ok();
            }
            start += s.width;
        }
        None
    }

    pub fn channels(&self, species: Species) -> &Tensor {
        match species {
            Species::Raw => &self.raw_channels,
            Species::Pse => &self.pse_channels,
        }
    }
}

/// Point positions and normalized per-point features of one branch, plus
/// its evaluated hierarchy when conv sources are used.
#[derive(Clone, Copy, Debug)]
pub struct BranchFeatures<'a> {
    pub positions: &'a [[f64; 3]],
    pub point_features: &'a Tensor,
    pub hierarchy: Option<&'a VoxelFeatureHierarchy>,
}

impl BranchFeatures<'_> {
    fn geometry(&self) -> BranchGeometry<'_> {
        let level_widths = self
            .hierarchy
            .map(|h| std::array::from_fn(|k| h.features[k].cols()))
            .unwrap_or([0; LEVELS]);
        BranchGeometry {
            positions: self.positions,
            point_width: self.point_features.cols(),
            topology: self.hierarchy.map(|h| &h.topology),
            level_widths,
        }
    }

    fn bind(&self, g: &mut Graph) -> BranchVars {
        BranchVars {
            points: g.constant(self.point_features.clone()),
            levels: self
                .hierarchy
                .map(|h| h.features.iter().map(|f| g.constant(f.clone())).collect())
                .unwrap_or_default(),
        }
    }
}

/// Pools heterogeneous neighborhoods around each keypoint and applies the
/// keypoint MLP (inference form of [`AggregationPlan::forward`]).
pub fn aggregate_keypoint_features(
    keypoints: &KeypointSet,
    raw: BranchFeatures<'_>,
    pse: Option<BranchFeatures<'_>>,
    cfg: &AggregationConfig,
    mlp: &Mlp,
    store: &ParamStore,
) -> Result<KeypointFeatureTable> {
    let plan = AggregationPlan::new(&keypoints.positions, raw.geometry(), pse.as_ref().map(|p| p.geometry()), cfg)?;
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let raw_vars = raw.bind(&mut g);
    let pse_vars = pse.map(|p| p.bind(&mut g));
    let vars = plan.forward(&mut g, &bound, mlp, &raw_vars, pse_vars.as_ref())?;
    Ok(KeypointFeatureTable {
        slices: plan.slices(),
        pre_mlp: g.value(vars.pre_mlp).clone(),
        f_kp: g.value(vars.f_kp).clone(),
        raw_channels: g.value(vars.raw_channels).clone(),
        pse_channels: g.value(vars.pse_channels).clone(),
        isolated: plan.isolated(),
    })
}

/// Placement of top-level voxels in the bird's-eye-view grid: cell
/// `row · cols + col` with `row = iy`, `col = ix`; each z-slot owns a
/// block of `channels` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct BevLayout {
    pub rows: usize,
    pub cols: usize,
    pub slots: usize,
    pub channels: usize,
    pub cell_size: [f64; 2],
    pub origin: [f64; 2],
    dest: Vec<(usize, usize)>,
    occupied: Vec<usize>,
}

impl BevLayout {
    pub fn new(grid: &VoxelGrid, channels: usize) -> Self {
        let dims = grid.dims();
        let (cols, rows, slots) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
        let dest: Vec<(usize, usize)> = grid
            .keys()
            .iter()
            .map(|k| (k[1] as usize * cols + k[0] as usize, k[2] as usize * channels))
            .collect();
        let mut occupied: Vec<usize> = dest.iter().map(|d| d.0).collect();
        occupied.sort_unstable();
        occupied.dedup();
        let size = grid.voxel_size();
        let min = grid.range_min();
        Self {
            rows,
            cols,
            slots,
            channels,
            cell_size: [size[0], size[1]],
            origin: [min[0], min[1]],
            dest,
            occupied,
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width(&self) -> usize {
        self.slots * self.channels
    }

    /// Cells holding at least one voxel, ascending.
    pub fn occupied(&self) -> &[usize] {
        &self.occupied
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.cols, cell % self.cols)
    }

    /// Metric `(x, y)` of a cell centre.
    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (r, c) = self.row_col(cell);
        [
            self.origin[0] + (c as f64 + 0.5) * self.cell_size[0],
            self.origin[1] + (r as f64 + 0.5) * self.cell_size[1],
        ]
    }

    pub fn forward(&self, g: &mut Graph, top_features: Var) -> Result<Var> {
        g.scatter_rows(top_features, &self.dest, self.cells(), self.width())
    }
}

/// Bird's-eye-view features: `rows × cols` cells of `slots × channels`
/// values, zero where no voxel exists.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeatureMap {
    pub layout: BevLayout,
    pub data: Tensor,
}

impl BevFeatureMap {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        self.data.row(row * self.layout.cols + col)
    }

    /// Euclidean norm of each cell's feature vector.
    pub fn activation_norms(&self) -> Vec<f64> {
        (0..self.layout.cells())
            .map(|c| self.data.row(c).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Stacks the voxels of `grid` along z into per-cell channels.
pub fn flatten_to_bev(grid: &VoxelGrid, features: &Tensor) -> Result<BevFeatureMap> {
    let channels = if features.ndim() == 2 { features.shape()[1] } else { 0 };
    if features.rows() != grid.len() || (features.ndim() != 2 && !grid.is_empty()) {
        return Err(Error::ShapeMismatch(format!(
            "{} voxels with feature tensor {:?}",
            grid.len(),
            features.shape()
        )));
    }
    let layout = BevLayout::new(grid, channels);
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let out = layout.forward(&mut g, f)?;
    Ok(BevFeatureMap {
        data: g.value(out).clone(),
        layout,
    })
}
