use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::caaf::{caaf_fuse_graph, pool_roi_graph, roi_members, RoI, RESIDUALS};
use crate::config::PipelineConfig;
use crate::error::StageContext;
use crate::loss::{bce_graph, compose_total_graph, smooth_l1_graph, LossVars};
use crate::prconv::{BevFeatureMap, BranchVars, KeypointVars, LEVELS};
use crate::tensor::{Bound, Graph, Tensor, Var};
use crate::{Error, Result, Stage, StageError};

use super::model::Model;
use super::prepare::PreparedScene;

/// Classification labels and regression targets of a set of anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    /// `n × 1`, 1 for anchors matched to a ground-truth box.
    pub labels: Tensor,
    pub positives: Vec<usize>,
    /// `positives × 7` residuals from each positive anchor to its match.
    pub residuals: Tensor,
}

/// Matches each anchor to the nearest ground-truth box whose xy centre
/// lies within `fraction` of that box's xy diagonal.
pub fn match_targets(anchors: &[RoI], gt: &[RoI], fraction: f64) -> HeadTargets {
    let mut labels = vec![0.0; anchors.len()];
    let mut positives = Vec::new();
    let mut rows = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        let best = gt
            .iter()
            .map(|b| (a.distance_xy(b), b))
            .filter(|(d, b)| *d < fraction * 2.0 * b.half_diagonal_xy())
            .min_by(|x, y| x.0.total_cmp(&y.0));
        if let Some((_, b)) = best {
            labels[i] = 1.0;
            positives.push(i);
            rows.push(a.encode(b).to_vec());
        }
    }
    HeadTargets {
        labels: Tensor::new(vec![anchors.len(), 1], labels).expect("one label per anchor"),
        positives,
        residuals: Tensor::from_rows(&rows, RESIDUALS).expect("seven residuals per row"),
    }
}

/// Proposal-stage anchors: one nominal box per occupied BEV cell.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub anchors: Vec<RoI>,
    pub targets: HeadTargets,
}

impl AnchorSet {
    pub fn new(prep: &PreparedScene, gt: &[RoI], cfg: &PipelineConfig) -> Result<Self> {
        let anchors = prep
            .bev
            .occupied()
            .iter()
            .map(|&c| {
                let [x, y] = prep.bev.cell_center(c);
                RoI::new([x, y, cfg.prior_z], cfg.prior_size, 0.0, 0.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = match_targets(&anchors, gt, cfg.match_fraction);
        Ok(Self { anchors, targets })
    }
}

/// RoIs entering the refinement stage: proposals, then for every
/// ground-truth box one exact copy followed by its jittered copies.
#[derive(Clone, Debug)]
pub struct RoiSet {
    pub rois: Vec<RoI>,
    pub proposals: usize,
    /// Index of the exact copy of each ground-truth box.
    pub gt_copies: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub targets: HeadTargets,
}

impl RoiSet {
    pub fn new(proposals: Vec<RoI>, gt: &[RoI], keypoints: &[[f64; 3]], cfg: &PipelineConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()));
        let (nc, ns, ny) = (normal(cfg.jitter_center)?, normal(cfg.jitter_log_size)?, normal(cfg.jitter_yaw)?);
        let n_prop = proposals.len();
        let mut rois = proposals;
        let mut gt_copies = Vec::with_capacity(gt.len());
        for b in gt {
            gt_copies.push(rois.len());
            rois.push(RoI { score: 0.0, ..*b });
            for _ in 0..cfg.gt_jitter_copies {
                let c = b.center.map(|v| v + nc.sample(&mut rng));
                let s = b.size.map(|v| v * ns.sample(&mut rng).exp());
                rois.push(RoI::new(c, s, b.yaw + ny.sample(&mut rng), 0.0)?);
            }
        }
        let members = roi_members(&rois, keypoints);
        let targets = match_targets(&rois, gt, cfg.match_fraction);
        Ok(Self {
            rois,
            proposals: n_prop,
            gt_copies,
            members,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub keypoints: KeypointVars,
    pub bev: Var,
    pub rpn_out: Var,
    pub f_raw: Option<Var>,
    pub f_pse: Option<Var>,
    pub gates: Option<(Var, Var)>,
    pub refine_out: Option<Var>,
    pub losses: LossVars,
    pub total: Var,
}

/// BCE on all anchors plus smooth-L1 on the positives.
fn head_loss(g: &mut Graph, out: Var, targets: &HeadTargets, delta: f64) -> Result<Var> {
    let logits = g.slice_cols(out, RESIDUALS, 1)?;
    let cls = bce_graph(g, logits, &targets.labels)?;
    if targets.positives.is_empty() {
        return Ok(cls);
    }
    let rows = g.gather_rows(out, &targets.positives)?;
    let res = g.slice_cols(rows, 0, RESIDUALS)?;
    let reg = smooth_l1_graph(g, res, &targets.residuals, delta)?;
    g.add(reg, cls)
}

/// Level features of the raw branch only (for proposals).
pub fn bev_features(model: &Model, prep: &PreparedScene) -> Result<BevFeatureMap> {
    let mut g = Graph::new();
    let bound = model.store.bind_frozen(&mut g);
    let levels = prep.raw_topology.forward(&mut g, &bound, &model.raw_branch)?;
    let bev = prep.bev.forward(&mut g, levels[LEVELS - 1])?;
    Ok(BevFeatureMap {
        layout: prep.bev.clone(),
        data: g.value(bev).clone(),
    })
}

/// Builds the whole detector and its loss on `g`.
pub fn forward(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    prep: &PreparedScene,
    anchors: &AnchorSet,
    rois: &RoiSet,
    cfg: &PipelineConfig,
) -> Result<ForwardVars, StageError> {
    let raw_levels = prep
        .raw_topology
        .forward(g, bound, &model.raw_branch)
        .stage(Stage::Hierarchy)?;
    let pse_levels = match (&prep.pse_topology, &model.pse_branch) {
        (Some(t), Some(p)) => t.forward(g, bound, p).stage(Stage::Hierarchy)?,
        _ => Vec::new(),
    };
    let raw = BranchVars {
        points: g.constant(prep.raw_features.clone()),
        levels: raw_levels.clone(),
    };
    let pse = cfg.use_pseudo.then(|| BranchVars {
        points: g.constant(prep.pse_features.clone()),
        levels: pse_levels,
    });
    let kp = prep
        .plan
        .forward(g, bound, &model.keypoint_mlp, &raw, pse.as_ref())
        .stage(Stage::Aggregate)?;

    let bev = prep.bev.forward(g, raw_levels[LEVELS - 1]).stage(Stage::Bev)?;
    let (rpn_out, l_rpn) = (|| -> Result<(Var, Var)> {
        let cells = g.gather_rows(bev, prep.bev.occupied())?;
        let out = model.rpn_head.forward(g, bound, cells)?;
        let loss = head_loss(g, out, &anchors.targets, cfg.delta)?;
        Ok((out, loss))
    })()
    .stage(Stage::Proposals)?;

    let zero = g.constant(Tensor::scalar(0.0));
    let mut out = ForwardVars {
        keypoints: kp,
        bev,
        rpn_out,
        f_raw: None,
        f_pse: None,
        gates: None,
        refine_out: None,
        losses: LossVars {
            l_rpn,
            l_ref: zero,
            l_depth: zero,
            l_as1: zero,
            l_as2: zero,
        },
        total: zero,
    };

    if !rois.is_empty() {
        let f_raw = pool_roi_graph(g, bound, kp.raw_channels, &rois.members, &model.proj_raw).stage(Stage::RoiPool)?;
        let f_pse = match &model.proj_pse {
            Some(p) => Some(pool_roi_graph(g, bound, kp.pse_channels, &rois.members, p).stage(Stage::RoiPool)?),
            None => None,
        };
        let fused = (|| -> Result<Var> {
            let Some(f_pse) = f_pse else { return Ok(f_raw) };
            let fused = match &model.fusion_fc {
                Some(fc) => {
                    let v = caaf_fuse_graph(g, bound, fc, f_raw, f_pse)?;
                    out.gates = Some((v.w_raw, v.w_pse));
                    v.fused
                }
                None => g.concat(&[f_raw, f_pse], 1)?,
            };
            match &model.adapter {
                Some(a) => a.forward(g, bound, fused),
                None => Ok(fused),
            }
        })()
        .stage(Stage::Fusion)?;
        let refine_out = model.refine_head.forward(g, bound, fused).stage(Stage::Refine)?;
        (|| -> Result<()> {
            out.losses.l_ref = head_loss(g, refine_out, &rois.targets, cfg.delta)?;
            let a1 = model.aux_raw.forward(g, bound, f_raw)?;
            out.losses.l_as1 = head_loss(g, a1, &rois.targets, cfg.delta)?;
            if let (Some(h), Some(f)) = (&model.aux_pse, f_pse) {
                let a2 = h.forward(g, bound, f)?;
                out.losses.l_as2 = head_loss(g, a2, &rois.targets, cfg.delta)?;
            }
            Ok(())
        })()
        .stage(Stage::Loss)?;
        out.f_raw = Some(f_raw);
        out.f_pse = f_pse;
        out.refine_out = Some(refine_out);
    }
    out.total = compose_total_graph(g, out.losses, cfg.alpha, cfg.beta).stage(Stage::Loss)?;
    Ok(out)
}
