//! RoI stage: proposals from the BEV map, per-species RoI pooling over
//! keypoint features, sigmoid-gated fusion of the raw/pseudo pair, and the
//! box refinement head.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};

use serde::Serialize;

use crate::prconv::{BevFeatureMap, KeypointFeatureTable, Species};
use crate::tensor::{Bound, Graph, LinearLayer, Mlp, ParamStore, PoolMode, Tensor, Var};
use crate::{Error, Result};

/// Residual layout: `dx dy dz dlog_l dlog_w dlog_h dyaw`.
pub const RESIDUALS: usize = 7;
/// Refinement head output: residuals plus one confidence logit.
pub const HEAD_OUTPUTS: usize = RESIDUALS + 1;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Oriented 3D box, yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoI {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub score: f64,
}

impl RoI {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, score: f64) -> Result<Self> {
        if center.iter().chain(&size).chain([&yaw, &score]).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box parameters".into()));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain(format!("box size must be positive, got {size:?}")));
        }
        Ok(Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            score,
        })
    }

    /// `p` in box coordinates (rotated by −yaw about the centre).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Closed containment: faces count as inside.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        (0..3).all(|k| l[k].abs() <= 0.5 * self.size[k])
    }

    /// Half length of the xy diagonal.
    pub fn half_diagonal_xy(&self) -> f64 {
        0.5 * self.size[0].hypot(self.size[1])
    }

    pub fn distance_xy(&self, other: &RoI) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        std::array::from_fn(|i| {
            let lx = if i & 1 == 0 { -0.5 } else { 0.5 } * self.size[0];
            let ly = if i & 2 == 0 { -0.5 } else { 0.5 } * self.size[1];
            let lz = if i & 4 == 0 { -0.5 } else { 0.5 } * self.size[2];
            [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
                self.center[2] + lz,
            ]
        })
    }

    /// Residuals taking `self` to `target`.
    pub fn encode(&self, target: &RoI) -> [f64; RESIDUALS] {
        [
            target.center[0] - self.center[0],
            target.center[1] - self.center[1],
            target.center[2] - self.center[2],
            (target.size[0] / self.size[0]).ln(),
            (target.size[1] / self.size[1]).ln(),
            (target.size[2] / self.size[2]).ln(),
            wrap_angle(target.yaw - self.yaw),
        ]
    }

    /// Inverse of [`RoI::encode`]; the score is carried over.
    pub fn decode(&self, r: &[f64]) -> Result<RoI> {
        if r.len() != RESIDUALS {
            return Err(Error::ShapeMismatch(format!("expected {RESIDUALS} residuals, got {}", r.len())));
        }
        RoI::new(
            [self.center[0] + r[0], self.center[1] + r[1], self.center[2] + r[2]],
            [self.size[0] * r[3].exp(), self.size[1] * r[4].exp(), self.size[2] * r[5].exp()],
            self.yaw + r[6],
            self.score,
        )
    }
}

impl fmt::Display for RoI {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [cx, cy, cz] = self.center;
        let [l, w, h] = self.size;
        write!(f, "{cx:?} {cy:?} {cz:?} {l:?} {w:?} {h:?} {:?} {:?}", self.yaw, self.score)
    }
}

/// One box per line: `cx cy cz l w h yaw score`.
pub fn write_boxes<W: Write>(mut w: W, boxes: &[RoI]) -> Result<()> {
    for b in boxes {
        writeln!(w, "{b}")?;
    }
    Ok(())
}

/// Reads [`write_boxes`] output; blank lines and `#` comments are skipped.
pub fn read_boxes<R: BufRead>(r: R) -> Result<Vec<RoI>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("box line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::Parse(format!("box line {}: expected 8 values, got {}", n + 1, v.len())));
        }
        out.push(RoI::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], v[7])?);
    }
    Ok(out)
}

/// Nominal box placed on each proposal peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrior {
    pub size: [f64; 3],
    pub z: f64,
}

impl Default for BoxPrior {
    fn default() -> Self {
        Self {
            size: [3.9, 1.6, 1.56],
            z: -0.95,
        }
    }
}

/// Local maxima of the BEV activation norm as axis-aligned boxes.
///
/// A cell is a peak when its norm is positive and no smaller than any of
/// its eight neighbours. Peaks are ranked by norm, descending, then by
/// `(row, col)`; the first `top_n` are returned with the norm as score.
pub fn propose_rois(bev: &BevFeatureMap, top_n: usize, prior: &BoxPrior) -> Result<Vec<RoI>> {
    if top_n == 0 {
        return Err(Error::Domain("top_n must be at least 1".into()));
    }
    let norms = bev.activation_norms();
    let (rows, cols) = (bev.layout.rows, bev.layout.cols);
    let mut peaks = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let n = norms[r * cols + c];
            if n <= 0.0 {
                continue;
            }
            let mut peak = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    if norms[rr as usize * cols + cc as usize] > n {
                        peak = false;
                    }
                }
            }
            if peak {
                peaks.push((n, r * cols + c));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks
        .into_iter()
        .take(top_n)
        .map(|(n, cell)| {
            let [x, y] = bev.layout.cell_center(cell);
            RoI::new([x, y, prior.z], prior.size, 0.0, n)
        })
        .collect()
}

/// Keypoint ordinals inside each box.
pub fn roi_members(rois: &[RoI], keypoints: &[[f64; 3]]) -> Vec<Vec<usize>> {
    rois.iter()
        .map(|r| (0..keypoints.len()).filter(|&i| r.contains(keypoints[i])).collect())
        .collect()
}

/// Graph form of RoI pooling: max over each member set, species
/// projection, and zeroing of empty boxes.
pub fn pool_roi_graph(
    g: &mut Graph,
    bound: &Bound,
    channels: Var,
    members: &[Vec<usize>],
    projection: &LinearLayer,
) -> Result<Var> {
    let pooled = g.segment_pool(channels, members, PoolMode::Max)?;
    let projected = projection.forward(g, bound, pooled)?;
    let width = projection.out_dim();
    let mut mask = Tensor::zeros(vec![members.len(), width]);
    for (i, m) in members.iter().enumerate() {
        if !m.is_empty() {
            mask.data_mut()[i * width..(i + 1) * width].fill(1.0);
        }
    }
    g.mul_const(projected, &mask)
}

/// Per-RoI max of the `species` keypoint channels inside each box,
/// projected to `D_m`; boxes with no keypoint give zero rows.
pub fn pool_roi_features(
    rois: &[RoI],
    keypoints: &[[f64; 3]],
    table: &KeypointFeatureTable,
    species: Species,
    projection: &LinearLayer,
    store: &ParamStore,
) -> Result<Tensor> {
    if table.is_empty() {
        return Err(Error::Domain("keypoint feature table is empty".into()));
    }
    if keypoints.len() != table.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} keypoint positions for {} feature rows",
            keypoints.len(),
            table.len()
        )));
    }
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let ch = g.constant(table.channels(species).clone());
    let out = pool_roi_graph(&mut g, &bound, ch, &roi_members(rois, keypoints), projection)?;
    Ok(g.value(out).clone())
}

/// Raw and pseudo RoI features of equal shape `n × D_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoIFeaturePair {
    f_raw: Tensor,
    f_pse: Tensor,
}

impl RoIFeaturePair {
    pub fn new(f_raw: Tensor, f_pse: Tensor) -> Result<Self> {
        if f_raw.ndim() != 2 || f_raw.shape() != f_pse.shape() {
            return Err(Error::ShapeMismatch(format!(
                "RoI feature pair {:?} vs {:?}",
                f_raw.shape(),
                f_pse.shape()
            )));
        }
        Ok(Self { f_raw, f_pse })
    }

    pub fn f_raw(&self) -> &Tensor {
        &self.f_raw
    }

    pub fn f_pse(&self) -> &Tensor {
        &self.f_pse
    }

    pub fn d_m(&self) -> usize {
        self.f_raw.cols()
    }
}

/// Fused RoI features, `n × 2·D_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedRoIFeatures {
    pub features: Tensor,
}

/// Gate values, each `n × D_m`, strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Gates {
    pub w_raw: Tensor,
    pub w_pse: Tensor,
}

/// Graph handles of a fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub fused: Var,
    pub w_raw: Var,
    pub w_pse: Var,
}

/// `g = σ(fc([F_raw | F_pse]))`, split into `(W_raw, W_pse)`; output
/// `[W_raw ⊙ F_raw | W_pse ⊙ F_pse]`.
pub fn caaf_fuse_graph(g: &mut Graph, bound: &Bound, fc: &LinearLayer, f_raw: Var, f_pse: Var) -> Result<FusionVars> {
    let shape = g.value(f_raw).shape().to_vec();
    if shape.len() != 2 || shape != g.value(f_pse).shape() {
        return Err(Error::ShapeMismatch(format!(
            "fusion inputs {:?} vs {:?}",
            shape,
            g.value(f_pse).shape()
        )));
    }
    let d_m = shape[1];
    if fc.in_dim() != 2 * d_m || fc.out_dim() != 2 * d_m {
        return Err(Error::ShapeMismatch(format!(
            "fusion FC must map {0} -> {0}, got {1} -> {2}",
            2 * d_m,
            fc.in_dim(),
            fc.out_dim()
        )));
    }
    let joint = g.concat(&[f_raw, f_pse], 1)?;
    let logits = fc.forward(g, bound, joint)?;
    let gates = g.sigmoid(logits);
    let w_raw = g.slice_cols(gates, 0, d_m)?;
    let w_pse = g.slice_cols(gates, d_m, d_m)?;
    let a = g.mul(w_raw, f_raw)?;
    let b = g.mul(w_pse, f_pse)?;
    let fused = g.concat(&[a, b], 1)?;
    Ok(FusionVars { fused, w_raw, w_pse })
}

pub fn caaf_fuse(pair: &RoIFeaturePair, fc: &LinearLayer, store: &ParamStore) -> Result<(FusedRoIFeatures, Gates)> {
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let r = g.constant(pair.f_raw.clone());
    let p = g.constant(pair.f_pse.clone());
    let v = caaf_fuse_graph(&mut g, &bound, fc, r, p)?;
    Ok((
        FusedRoIFeatures {
            features: g.value(v.fused).clone(),
        },
        Gates {
            w_raw: g.value(v.w_raw).clone(),
            w_pse: g.value(v.w_pse).clone(),
        },
    ))
}

/// Ungated fusion used when the attention stage is switched off.
pub fn concat_fuse(pair: &RoIFeaturePair) -> FusedRoIFeatures {
    let rows: Vec<Vec<f64>> = (0..pair.f_raw.rows())
        .map(|i| pair.f_raw.row(i).iter().chain(pair.f_pse.row(i)).copied().collect())
        .collect();
    FusedRoIFeatures {
        features: Tensor::from_rows(&rows, 2 * pair.d_m()).expect("rows have equal width"),
    }
}

/// A refined box with its confidence σ(logit).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RefinedBox {
    pub roi: RoI,
    pub confidence: f64,
}

/// Applies head outputs (`n × 8`) to their RoIs.
pub fn decode_head_outputs(rois: &[RoI], outputs: &Tensor) -> Result<Vec<RefinedBox>> {
    if outputs.ndim() != 2 || outputs.rows() != rois.len() || outputs.cols() != HEAD_OUTPUTS {
        return Err(Error::ShapeMismatch(format!(
            "{} RoIs with head output {:?}",
            rois.len(),
            outputs.shape()
        )));
    }
    rois.iter()
        .enumerate()
        .map(|(i, roi)| {
            let row = outputs.row(i);
            let confidence = 1.0 / (1.0 + (-row[RESIDUALS]).exp());
            let mut refined = roi.decode(&row[..RESIDUALS])?;
            refined.score = confidence;
            Ok(RefinedBox { roi: refined, confidence })
        })
        .collect()
}

/// Runs `head` on fused features and decodes the boxes.
pub fn refine_boxes(fused: &FusedRoIFeatures, rois: &[RoI], head: &Mlp, store: &ParamStore) -> Result<Vec<RefinedBox>> {
    if head.in_dim() != fused.features.cols() || head.out_dim() != HEAD_OUTPUTS {
        return Err(Error::ShapeMismatch(format!(
            "refinement head {} -> {} for fused width {}",
            head.in_dim(),
            head.out_dim(),
            fused.features.cols()
        )));
    }
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let x = g.constant(fused.features.clone());
    let out = head.forward(&mut g, &bound, x)?;
    decode_head_outputs(rois, g.value(out))
}
