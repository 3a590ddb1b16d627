//! Camera calibration and the LiDAR ↔ pixel-depth mapping.
//!
//! A LiDAR point `p` maps to the camera frame as `R·p + t`; its pixel is
//! the perspective division of `K·(R·p + t)` and its depth is the camera
//! `z`. [`unproject_pixel`] is the exact inverse on the image of
//! [`project_points`].

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    width: usize,
    height: usize,
}

impl Calibration {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidCalibration(format!("image size {width}×{height}")));
        }
        if k.iter().chain(r.iter()).chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidCalibration("non-finite entry".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidCalibration("K must be upper-triangular".into()));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCalibration(
                "K needs positive focal lengths and K[2][2] = 1".into(),
            ));
        }
        let gram = r.transpose() * r - Matrix3::identity();
        if gram.amax() >= ORTHO_TOL || (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidCalibration("R is not a proper rotation".into()));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::InvalidCalibration("K is singular".into()))?;
        Ok(Self {
            k,
            k_inv,
            r,
            t,
            width,
            height,
        })
    }

    /// `K = I`, `R = I`, `t = 0`.
    pub fn identity(width: usize, height: usize) -> Result<Self> {
        Self::new(Matrix3::identity(), Matrix3::identity(), Vector3::zeros(), width, height)
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn r(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn t(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Camera centre expressed in the LiDAR frame.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Unit-depth viewing ray through pixel `(u, v)` in the LiDAR frame:
    /// the point at camera depth `d` is `camera_center + d·ray`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.r.transpose() * (self.k_inv * Vector3::new(u, v, 1.0))
    }

    pub fn to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.r * Vector3::from(p) + self.t
    }

    /// Parses the plain-text calibration format:
    ///
    /// ```text
    /// # comment
    /// K: fx 0 cx 0 fy cy 0 0 1
    /// R: r00 r01 r02 r10 r11 r12 r20 r21 r22
    /// t: tx ty tz
    /// size: W H
    /// ```
    pub fn from_text(text: &str) -> Result<Self> {
        let (mut k, mut r, mut t, mut size) = (None, None, None, None);
        for (key, values) in key_values(text)? {
            match key.as_str() {
                "K" => k = Some(matrix3(&values, "K")?),
                "R" => r = Some(matrix3(&values, "R")?),
                "t" => t = Some(vector3(&values, "t")?),
                "size" => {
                    let [w, h] = values[..] else {
                        return Err(Error::Parse("size needs 2 values".into()));
                    };
                    size = Some((as_dim(w)?, as_dim(h)?));
                }
                other => return Err(Error::Parse(format!("unknown calibration key `{other}`"))),
            }
        }
        let missing = |name: &str| Error::Parse(format!("calibration is missing `{name}`"));
        let (w, h) = size.ok_or_else(|| missing("size"))?;
        Self::new(
            k.ok_or_else(|| missing("K"))?,
            r.ok_or_else(|| missing("R"))?,
            t.ok_or_else(|| missing("t"))?,
            w,
            h,
        )
    }

    pub fn to_text(&self) -> String {
        let row_major = |m: &Matrix3<f64>| {
            (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|ij| format!("{:?}", m[ij]))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "K: {}\nR: {}\nt: {:?} {:?} {:?}\nsize: {} {}\n",
            row_major(&self.k),
            row_major(&self.r),
            self.t.x,
            self.t.y,
            self.t.z,
            self.width,
            self.height
        )
    }

    /// Loads KITTI object-benchmark calibration (`P2`, `R0_rect`,
    /// `Tr_velo_to_cam`).
    ///
    /// KITTI maps a Velodyne point `X` to pixels as
    /// `P2 · R0_rect · Tr_velo_to_cam · [X; 1]` with `P2 = [K | K·b]`. The
    /// decomposition used here is `K = P2[:, :3]`, `b = K⁻¹·P2[:, 3]`,
    /// `R = R0_rect · Tr[:, :3]` and `t = R0_rect · Tr[:, 3] + b`. The
    /// published rotations are only orthonormal to a few decimals, so `R`
    /// is re-orthonormalised (Gram–Schmidt on its rows) before validation.
    pub fn from_kitti(text: &str, width: usize, height: usize) -> Result<Self> {
        let mut p2 = None;
        let mut r0 = None;
        let mut tr = None;
        for line in text.lines() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            let values = parse_floats(rest)?;
            match key.trim() {
                "P2" => p2 = Some(values),
                "R0_rect" => r0 = Some(values),
                "Tr_velo_to_cam" => tr = Some(values),
                _ => {}
            }
        }
        let missing = |name: &str| Error::Parse(format!("KITTI calibration is missing `{name}`"));
        let p2 = p2.ok_or_else(|| missing("P2"))?;
        let r0 = r0.ok_or_else(|| missing("R0_rect"))?;
        let tr = tr.ok_or_else(|| missing("Tr_velo_to_cam"))?;
        if p2.len() != 12 || r0.len() != 9 || tr.len() != 12 {
            return Err(Error::Parse("KITTI matrices have the wrong number of entries".into()));
        }
        let k = Matrix3::new(p2[0], p2[1], p2[2], p2[4], p2[5], p2[6], p2[8], p2[9], p2[10]);
        let p4 = Vector3::new(p2[3], p2[7], p2[11]);
        let r0 = matrix3(&r0, "R0_rect")?;
        let tr_r = Matrix3::new(tr[0], tr[1], tr[2], tr[4], tr[5], tr[6], tr[8], tr[9], tr[10]);
        let tr_t = Vector3::new(tr[3], tr[7], tr[11]);
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::InvalidCalibration("P2 intrinsics are singular".into()))?;
        let r = orthonormalize(&(r0 * tr_r));
        let t = r0 * tr_t + k_inv * p4;
        Self::new(k, r, t, width, height)
    }
}

fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let r0 = m.row(0).transpose().normalize();
    let r1 = m.row(1).transpose();
    let r1 = (r1 - r0 * r0.dot(&r1)).normalize();
    let r2 = r0.cross(&r1);
    Matrix3::from_rows(&[r0.transpose(), r1.transpose(), r2.transpose()])
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad number `{v}`"))))
        .collect()
}

fn key_values(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("expected `key: values`, got `{line}`")))?;
        out.push((key.trim().to_string(), parse_floats(rest)?));
    }
    Ok(out)
}

fn matrix3(v: &[f64], name: &str) -> Result<Matrix3<f64>> {
    if v.len() != 9 {
        return Err(Error::Parse(format!("{name} needs 9 values, got {}", v.len())));
    }
    Ok(Matrix3::from_row_slice(v))
}

fn vector3(v: &[f64], name: &str) -> Result<Vector3<f64>> {
    match v {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(Error::Parse(format!("{name} needs 3 values, got {}", v.len()))),
    }
}

fn as_dim(v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Parse(format!("bad image dimension {v}")))
    }
}

/// LiDAR points in meters with optional intensities in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawPointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
}

impl RawPointCloud {
    pub fn new(points: Vec<[f64; 3]>, intensity: Option<Vec<f64>>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw point coordinate".into()));
        }
        if let Some(i) = &intensity {
            if i.len() != points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} intensities for {} points",
                    i.len(),
                    points.len()
                )));
            }
            if i.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain("intensity outside [0, 1]".into()));
            }
        }
        Ok(Self { points, intensity })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn intensity_at(&self, i: usize) -> f64 {
        self.intensity.as_ref().map_or(0.0, |v| v[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelDepthSample {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

/// Projects every point that lands in front of the camera and inside
/// `[0, W) × [0, H)`; other points are skipped.
pub fn project_points(cloud: &RawPointCloud, calib: &Calibration) -> Vec<(usize, PixelDepthSample)> {
    let (w, h) = (calib.width as f64, calib.height as f64);
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| {
            let cam = calib.to_camera(p);
            let d = cam.z;
            if d <= 0.0 {
                return None;
            }
            let img = calib.k * cam;
            let (u, v) = (img.x / img.z, img.y / img.z);
            (u >= 0.0 && u < w && v >= 0.0 && v < h).then_some((i, PixelDepthSample { u, v, d }))
        })
        .collect()
}

/// `p = Rᵀ(K⁻¹·(u·d, v·d, d) − t)`.
pub fn unproject_pixel(u: f64, v: f64, d: f64, calib: &Calibration) -> Result<[f64; 3]> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Domain(format!("unproject needs depth > 0, got {d}")));
    }
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite(format!("pixel ({u}, {v})")));
    }
    let cam = calib.k_inv * Vector3::new(u * d, v * d, d);
    let p = calib.r.transpose() * (cam - calib.t);
    Ok([p.x, p.y, p.z])
}

/// Sparse per-pixel depth; empty cells hold [`SparseDepthMap::EMPTY`].
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid_count: usize,
}

impl SparseDepthMap {
    pub const EMPTY: f64 = 0.0;

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![Self::EMPTY; width * height],
            valid_count: 0,
        }
    }

    /// Builds a map from a row-major grid; cells equal to
    /// [`Self::EMPTY`] are empty, all others must be positive.
    pub fn from_grid(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for a {width}×{height} map",
                depth.len()
            )));
        }
        if depth.iter().any(|&d| d != Self::EMPTY && !(d > 0.0 && d.is_finite())) {
            return Err(Error::Domain("sparse depth cells must be empty or > 0".into()));
        }
        let valid_count = depth.iter().filter(|&&d| d != Self::EMPTY).count();
        Ok(Self {
            width,
            height,
            depth,
            valid_count,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    /// Depth at column `u`, row `v`, or `None` for an empty cell.
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.depth[v * self.width + u];
        (d != Self::EMPTY).then_some(d)
    }

    /// Row-major cells, [`Self::EMPTY`] where nothing was written.
    pub fn cells(&self) -> &[f64] {
        &self.depth
    }

    /// Keeps only the cells for which `keep(u, v)` is true.
    pub fn masked(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let mut out = self.clone();
        for v in 0..self.height {
            for u in 0..self.width {
                let i = v * self.width + u;
                if out.depth[i] != Self::EMPTY && !keep(u, v) {
                    out.depth[i] = Self::EMPTY;
                    out.valid_count -= 1;
                }
            }
        }
        out
    }
}

/// Z-buffers samples into a `W×H` map: each sample lands in cell
/// `(⌊u⌋, ⌊v⌋)` and the nearest depth per cell wins.
pub fn rasterize_depth(samples: &[PixelDepthSample], width: usize, height: usize) -> Result<SparseDepthMap> {
    let mut map = SparseDepthMap::empty(width, height);
    for s in samples {
        if !s.u.is_finite() || !s.v.is_finite() || !s.d.is_finite() {
            return Err(Error::NonFinite(format!("sample ({}, {}, {})", s.u, s.v, s.d)));
        }
        if s.d <= 0.0 {
            return Err(Error::Domain(format!("sample depth {} must be > 0", s.d)));
        }
        let (cu, cv) = (s.u.floor(), s.v.floor());
        if cu < 0.0 || cv < 0.0 || cu >= width as f64 || cv >= height as f64 {
            return Err(Error::Domain(format!(
                "sample ({}, {}) outside the {width}×{height} map",
                s.u, s.v
            )));
        }
        let cell = &mut map.depth[cv as usize * width + cu as usize];
        if *cell == SparseDepthMap::EMPTY {
            *cell = s.d;
            map.valid_count += 1;
        } else if s.d < *cell {
            *cell = s.d;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_calib() -> Calibration {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        Calibration::new(k, Matrix3::identity(), Vector3::zeros(), 100, 100).unwrap()
    }

    #[test]
    fn projects_pinhole_example() {
        let cloud = RawPointCloud::new(vec![[1.0, 0.0, 5.0], [0.0, 0.0, -1.0]], None).unwrap();
        let out = project_points(&cloud, &example_calib());
        assert_eq!(out.len(), 1);
        let (i, s) = out[0];
        assert_eq!(i, 0);
        // K·p = (100·1 + 50·5, 100·0 + 50·5, 5) = (350, 250, 5)
        assert_eq!((s.u, s.v, s.d), (70.0, 50.0, 5.0));
    }

    #[test]
    fn unprojects_pinhole_example() {
        let p = unproject_pixel(70.0, 50.0, 5.0, &example_calib()).unwrap();
        for (a, b) in p.iter().zip([1.0, 0.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let id = Calibration::identity(10, 10).unwrap();
        assert_eq!(unproject_pixel(0.0, 0.0, 3.5, &id).unwrap(), [0.0, 0.0, 3.5]);
        assert!(matches!(unproject_pixel(1.0, 1.0, 0.0, &id), Err(Error::Domain(_))));
        assert!(matches!(unproject_pixel(1.0, 1.0, -2.0, &id), Err(Error::Domain(_))));
    }

    #[test]
    fn frustum_filter_drops_out_of_image_points() {
        let cloud = RawPointCloud::new(vec![[10.0, 0.0, 1.0], [0.0, -10.0, 1.0], [0.0, 0.0, 1.0]], None).unwrap();
        let out = project_points(&cloud, &example_calib());
        assert_eq!(out.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn zbuffer_keeps_nearest() {
        let samples = [
            PixelDepthSample { u: 10.2, v: 10.7, d: 5.0 },
            PixelDepthSample { u: 10.9, v: 10.1, d: 3.0 },
        ];
        let map = rasterize_depth(&samples, 32, 32).unwrap();
        assert_eq!(map.get(10, 10), Some(3.0));
        assert_eq!(map.valid_count(), 1);
        assert_eq!(rasterize_depth(&[], 32, 32).unwrap().valid_count(), 0);
    }

    #[test]
    fn rasterize_rejects_bad_samples() {
        let nan = [PixelDepthSample { u: f64::NAN, v: 1.0, d: 1.0 }];
        assert!(matches!(rasterize_depth(&nan, 4, 4), Err(Error::NonFinite(_))));
        let outside = [PixelDepthSample { u: 4.0, v: 1.0, d: 1.0 }];
        assert!(rasterize_depth(&outside, 4, 4).is_err());
    }

    #[test]
    fn distinct_cells_count_each_sample() {
        let samples: Vec<_> = (0..7)
            .map(|i| PixelDepthSample { u: i as f64 + 0.5, v: 2.0, d: 1.0 + i as f64 })
            .collect();
        assert_eq!(rasterize_depth(&samples, 8, 4).unwrap().valid_count(), 7);
    }

    #[test]
    fn calibration_invariants_are_enforced() {
        let k = *example_calib().k();
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Calibration::new(k, skewed, Vector3::zeros(), 10, 10).is_err());
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Calibration::new(k, reflection, Vector3::zeros(), 10, 10).is_err());
        let lower = Matrix3::new(100.0, 0.0, 0.0, 5.0, 100.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Calibration::new(lower, Matrix3::identity(), Vector3::zeros(), 10, 10).is_err());
    }

    #[test]
    fn text_format_round_trips() {
        let text = "# test rig\nK: 100 0 50 0 100 50 0 0 1\nR: 1 0 0 0 1 0 0 0 1\nt: 0.1 -0.2 0.3\nsize: 100 80\n";
        let c = Calibration::from_text(text).unwrap();
        assert_eq!(c.width(), 100);
        assert_eq!(c.height(), 80);
        assert_eq!(c.t().y, -0.2);
        assert_eq!(Calibration::from_text(&c.to_text()).unwrap(), c);
        assert!(Calibration::from_text("K: 1 0 0 0 1 0 0 0 1\n").is_err());
    }

    #[test]
    fn kitti_decomposition_matches_chained_projection() {
        let text = "\
P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.351614e-03 7.402527e-03 4.424769e-03 9.999628e-01
Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01
";
        let c = Calibration::from_kitti(text, 1242, 375).unwrap();
        // Direct KITTI chain, with the same rotation cleanup, for a point ahead.
        let x = [12.0, 1.5, -0.8];
        let cam = c.to_camera(x);
        let pix = c.k() * cam;
        let (u, v) = (pix.x / pix.z, pix.y / pix.z);
        assert!(u > 0.0 && u < 1242.0 && v > 0.0 && v < 375.0);
        let back = unproject_pixel(u, v, cam.z, &c).unwrap();
        for (a, b) in back.iter().zip(x) {
            assert!((a - b).abs() < 1e-9);
        }
        // Unmodified chain agrees to the precision of the published rotation.
        let p2 = nalgebra::Matrix3x4::new(
            7.215377e+02, 0.0, 6.095593e+02, 4.485728e+01, 0.0, 7.215377e+02, 1.728540e+02, 2.163791e-01, 0.0, 0.0, 1.0,
            2.745884e-03,
        );
        let r0 = Matrix3::new(
            9.999239e-01, 9.837760e-03, -7.445048e-03, -9.869795e-03, 9.999421e-01, -4.351614e-03, 7.402527e-03,
            4.424769e-03, 9.999628e-01,
        );
        let tr = nalgebra::Matrix3x4::new(
            7.533745e-03, -9.999714e-01, -6.166020e-04, -4.069766e-03, 1.480249e-02, 7.280733e-04, -9.998902e-01,
            -7.631618e-02, 9.998621e-01, 7.523790e-03, 1.480755e-02, -2.717806e-01,
        );
        let xh = nalgebra::Vector4::new(x[0], x[1], x[2], 1.0);
        let rect = r0 * (tr * xh);
        let img = p2 * nalgebra::Vector4::new(rect.x, rect.y, rect.z, 1.0);
        assert!((img.x / img.z - u).abs() < 0.05);
        assert!((img.y / img.z - v).abs() < 0.05);
    }
}
