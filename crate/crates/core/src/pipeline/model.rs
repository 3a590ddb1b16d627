use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{PseudoPointCloud, VoxelGrid};
use crate::config::PipelineConfig;
use crate::prconv::{BranchParams, InputNorm, LEVELS};
use crate::tensor::{LinearLayer, Mlp, ParamStore};
use crate::caaf::HEAD_OUTPUTS;
use crate::Result;

/// Raw point feature columns: `x y z intensity`.
pub const RAW_FIELDS: usize = 4;

/// Widths of the intermediate feature blocks implied by a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct FeatureWidths {
    pub pre_mlp: usize,
    pub keypoint: usize,
    pub raw_channels: usize,
    pub pse_channels: usize,
    pub d_m: usize,
    pub fused: usize,
    pub bev: usize,
}

impl FeatureWidths {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let pse_conv = cfg.use_pseudo && cfg.prconv;
        let mut raw = 0;
        let mut pse = 0;
        if cfg.sources.point {
            raw += RAW_FIELDS;
            if cfg.use_pseudo {
                pse += PseudoPointCloud::FIELDS;
            }
        }
        for k in 0..LEVELS {
            if cfg.sources.conv[k] {
                raw += cfg.level_widths[k];
                if pse_conv {
                    pse += cfg.level_widths[k];
                }
            }
        }
        let top = cfg.voxel_size * (1 << (LEVELS - 1)) as f64;
        let slots = VoxelGrid::empty([top; 3], cfg.range_min, cfg.range_max, 3)?.dims()[2] as usize;
        let d_m = cfg.d_m;
        let fused = match (cfg.use_pseudo, cfg.fusion_adapter) {
            (false, _) | (true, true) => d_m,
            (true, false) => 2 * d_m,
        };
        Ok(Self {
            pre_mlp: raw + pse,
            keypoint: cfg.keypoint_dim,
            raw_channels: cfg.keypoint_dim + raw,
            pse_channels: cfg.keypoint_dim + pse,
            d_m,
            fused,
            bev: slots * cfg.level_widths[LEVELS - 1],
        })
    }
}

/// `xyz → (p − min) / extent`; other columns pass through.
pub fn raw_input_norm(cfg: &PipelineConfig) -> InputNorm {
    let mut n = InputNorm::identity(RAW_FIELDS);
    for k in 0..3 {
        n.shift[k] = cfg.range_min[k];
        n.scale[k] = 1.0 / (cfg.range_max[k] - cfg.range_min[k]);
    }
    n
}

/// As [`raw_input_norm`] for xyz, plus pixel coordinates divided by the
/// image size; colours pass through.
pub fn pseudo_input_norm(cfg: &PipelineConfig) -> InputNorm {
    let mut n = InputNorm::identity(PseudoPointCloud::FIELDS);
    for k in 0..3 {
        n.shift[k] = cfg.range_min[k];
        n.scale[k] = 1.0 / (cfg.range_max[k] - cfg.range_min[k]);
    }
    n.scale[6] = 1.0 / cfg.scene.width as f64;
    n.scale[7] = 1.0 / cfg.scene.height as f64;
    n
}

/// All learned layers of the detector and the store holding them.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub widths: FeatureWidths,
    pub raw_branch: BranchParams,
    /// Present when the pseudo branch has its own voxel hierarchy.
    pub pse_branch: Option<BranchParams>,
    pub pse_norm: Option<InputNorm>,
    pub keypoint_mlp: Mlp,
    pub rpn_head: Mlp,
    pub proj_raw: LinearLayer,
    pub proj_pse: Option<LinearLayer>,
    pub fusion_fc: Option<LinearLayer>,
    pub adapter: Option<LinearLayer>,
    pub refine_head: Mlp,
    pub aux_raw: Mlp,
    pub aux_pse: Option<Mlp>,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `cfg.seed`.
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let widths = FeatureWidths::from_config(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let raw_branch = BranchParams::new(s, "raw", raw_input_norm(cfg), cfg.level_widths, &mut rng)?;
        let pse_branch = if cfg.use_pseudo && cfg.prconv {
            Some(BranchParams::new(s, "pse", pseudo_input_norm(cfg), cfg.level_widths, &mut rng)?)
        } else {
            None
        };
        let pse_norm = cfg.use_pseudo.then(|| pseudo_input_norm(cfg));
        let mut kp = vec![widths.pre_mlp];
        kp.extend(&cfg.keypoint_hidden);
        kp.push(cfg.keypoint_dim);
        let keypoint_mlp = Mlp::new(s, "keypoint", &kp, &mut rng)?;
        let rpn_head = Mlp::new(s, "rpn", &[widths.bev, cfg.head_hidden, HEAD_OUTPUTS], &mut rng)?;
        let proj_raw = LinearLayer::new(s, "roi.raw", widths.raw_channels, cfg.d_m, &mut rng)?;
        let proj_pse = if cfg.use_pseudo {
            Some(LinearLayer::new(s, "roi.pse", widths.pse_channels, cfg.d_m, &mut rng)?)
        } else {
            None
        };
        let fusion_fc = if cfg.caaf {
            Some(LinearLayer::new(s, "fusion", 2 * cfg.d_m, 2 * cfg.d_m, &mut rng)?)
        } else {
            None
        };
        let adapter = if cfg.use_pseudo && cfg.fusion_adapter {
            Some(LinearLayer::new(s, "adapter", 2 * cfg.d_m, cfg.d_m, &mut rng)?)
        } else {
            None
        };
        let refine_head = Mlp::new(s, "refine", &[widths.fused, cfg.head_hidden, HEAD_OUTPUTS], &mut rng)?;
        let aux_raw = Mlp::new(s, "aux.raw", &[cfg.d_m, cfg.head_hidden, HEAD_OUTPUTS], &mut rng)?;
        let aux_pse = if cfg.use_pseudo {
            Some(Mlp::new(s, "aux.pse", &[cfg.d_m, cfg.head_hidden, HEAD_OUTPUTS], &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            store,
            widths,
            raw_branch,
            pse_branch,
            pse_norm,
            keypoint_mlp,
            rpn_head,
            proj_raw,
            proj_pse,
            fusion_fc,
            adapter,
            refine_head,
            aux_raw,
            aux_pse,
        })
    }

    /// Parameter names of the auxiliary head supervised by the raw branch.
    pub fn aux_raw_names(&self) -> Vec<String> {
        self.aux_raw
            .layers()
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .map(|id| self.store.name(id).to_string())
            .collect()
    }
}
