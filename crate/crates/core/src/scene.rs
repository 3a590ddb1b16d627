//! Deterministic synthetic scenes: boxes on a ground plane, seen by a
//! ray-cast LiDAR and a ray-cast pinhole camera.
//!
//! Scenes carry exact ground truth (boxes, per-pixel depth, surfaces),
//! which the tests use as the oracle for projection, completion and
//! pseudo-point placement.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use rayon::prelude::*;

use crate::caaf::{write_boxes, RoI};
use crate::calib::{Calibration, RawPointCloud};
use crate::cloud::write_points;
use crate::config::SceneConfig;
use crate::depth::{DenseDepthMap, RgbImage};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// What a ray hit first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Box(usize),
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub boxes: Vec<RoI>,
    pub colors: Vec<[f64; 3]>,
    pub ground_z: Option<f64>,
    pub raw_cloud: RawPointCloud,
    pub image: RgbImage,
    /// Camera depth of the ray through each integer pixel; `None` when
    /// some pixel sees nothing.
    pub gt_depth: Option<DenseDepthMap>,
    pub calib: Calibration,
    pub seed: u64,
}

/// Camera looking along +x of the LiDAR frame, tilted down by `pitch`.
pub fn scene_calibration(cfg: &SceneConfig) -> Result<Calibration> {
    let p = cfg.pitch_deg.to_radians();
    let (s, c) = p.sin_cos();
    let right = Vector3::new(0.0, -1.0, 0.0);
    let down = Vector3::new(-s, 0.0, -c);
    let forward = Vector3::new(c, 0.0, -s);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let k = Matrix3::new(cfg.fx, 0.0, cfg.cx, 0.0, cfg.fy, cfg.cy, 0.0, 0.0, 1.0);
    let t = -(r * Vector3::from(cfg.camera_position));
    Calibration::new(k, r, t, cfg.width, cfg.height)
}

/// Entry parameter `t` of the ray `o + t·d` into `b`, if it enters at
/// `t > 0`.
fn ray_box(o: Vector3<f64>, d: Vector3<f64>, b: &RoI) -> Option<f64> {
    let lo = b.to_local([o.x, o.y, o.z]);
    let (s, c) = b.yaw.sin_cos();
    let ld = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        let h = 0.5 * b.size[k];
        if ld[k] == 0.0 {
            if lo[k].abs() > h {
                return None;
            }
            continue;
        }
        let a = (-h - lo[k]) / ld[k];
        let z = (h - lo[k]) / ld[k];
        t0 = t0.max(a.min(z));
        t1 = t1.min(a.max(z));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

impl SyntheticScene {
    /// Nearest hit along `o + t·d`, `t > 0`.
    pub fn trace(&self, o: Vector3<f64>, d: Vector3<f64>) -> Option<(f64, Surface)> {
        trace(&self.boxes, self.ground_z, o, d)
    }

    /// Distance from `p` to the nearest scene surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        let ground = self.ground_z.map_or(f64::INFINITY, |z| (p[2] - z).abs());
        self.boxes
            .iter()
            .map(|b| {
                let l = b.to_local(p);
                let e: [f64; 3] = std::array::from_fn(|k| l[k].abs() - 0.5 * b.size[k]);
                if e.iter().all(|&v| v <= 0.0) {
                    -e.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    e.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt()
                }
            })
            .fold(ground, f64::min)
    }

    /// Writes `points.bin` (x y z intensity), `image.ppm`, `depth.bin`
    /// (when available), `boxes.txt` and `calib.txt` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let rows: Vec<Vec<f64>> = self
            .raw_cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| vec![p[0], p[1], p[2], self.raw_cloud.intensity_at(i)])
            .collect();
        write_points(std::fs::File::create(dir.join("points.bin"))?, &Tensor::from_rows(&rows, 4)?)?;
        self.image.write_ppm(std::fs::File::create(dir.join("image.ppm"))?)?;
        if let Some(d) = &self.gt_depth {
            d.write_raw(std::fs::File::create(dir.join("depth.bin"))?)?;
        }
        write_boxes(std::fs::File::create(dir.join("boxes.txt"))?, &self.boxes)?;
        std::fs::File::create(dir.join("calib.txt"))?.write_all(self.calib.to_text().as_bytes())?;
        Ok(())
    }
}

fn trace(boxes: &[RoI], ground_z: Option<f64>, o: Vector3<f64>, d: Vector3<f64>) -> Option<(f64, Surface)> {
    let mut best = ground_z.and_then(|z| {
        let t = (z - o.z) / d.z;
        (d.z < 0.0 && t > 0.0).then_some((t, Surface::Ground))
    });
    for (i, b) in boxes.iter().enumerate() {
        if let Some(t) = ray_box(o, d, b) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Surface::Box(i)));
            }
        }
    }
    best
}

fn sample_boxes(cfg: &SceneConfig, ground_z: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<RoI>, Vec<[f64; 3]>)> {
    let mut boxes: Vec<RoI> = Vec::with_capacity(cfg.box_count);
    let mut colors = Vec::with_capacity(cfg.box_count);
    let mut tries = 0;
    while boxes.len() < cfg.box_count {
        if tries == cfg.max_retries {
            return Err(Error::Infeasible(format!(
                "placed {} of {} boxes after {} attempts",
                boxes.len(),
                cfg.box_count,
                cfg.max_retries
            )));
        }
        tries += 1;
        let size = [
            rng.random_range(cfg.length_range[0]..=cfg.length_range[1]),
            rng.random_range(cfg.width_range[0]..=cfg.width_range[1]),
            rng.random_range(cfg.height_range[0]..=cfg.height_range[1]),
        ];
        let x = rng.random_range(cfg.x_range[0]..=cfg.x_range[1]);
        let y = rng.random_range(cfg.y_range[0]..=cfg.y_range[1]);
        let yaw = rng.random_range(-cfg.yaw_max..=cfg.yaw_max);
        let candidate = RoI::new([x, y, ground_z + 0.5 * size[2]], size, yaw, 1.0)?;
        // bounding circles keep the test rotation-free and conservative
        let clear = boxes
            .iter()
            .all(|b| b.distance_xy(&candidate) > b.half_diagonal_xy() + candidate.half_diagonal_xy() + cfg.min_gap);
        if clear {
            boxes.push(candidate);
            colors.push([
                rng.random_range(0.2..=1.0),
                rng.random_range(0.2..=1.0),
                rng.random_range(0.2..=1.0),
            ]);
        }
    }
    Ok((boxes, colors))
}

fn lidar_directions(cfg: &SceneConfig) -> Vec<Vector3<f64>> {
    let lerp = |lo: f64, hi: f64, i: usize, n: usize| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let az = cfg.azimuth_half_fov_deg;
    let mut dirs = Vec::with_capacity(cfg.azimuths * cfg.elevations);
    for e in 0..cfg.elevations {
        let el = lerp(cfg.elevation_min_deg, cfg.elevation_max_deg, e, cfg.elevations).to_radians();
        for a in 0..cfg.azimuths {
            let phi = lerp(-az, az, a, cfg.azimuths).to_radians();
            dirs.push(Vector3::new(el.cos() * phi.cos(), el.cos() * phi.sin(), el.sin()));
        }
    }
    dirs
}

/// Builds a scene from `cfg`; identical `(cfg, seed)` give identical
/// scenes.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let calib = scene_calibration(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (boxes, colors) = sample_boxes(cfg, cfg.ground_z, &mut rng)?;

    let origin = Vector3::zeros();
    let hits: Vec<Option<([f64; 3], Surface)>> = lidar_directions(cfg)
        .par_iter()
        .map(|&d| trace(&boxes, cfg.ground_plane(), origin, d).map(|(t, s)| ((origin + d * t).into(), s)))
        .collect();
    let noise = Normal::new(0.0, cfg.range_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let drop = Bernoulli::new(cfg.dropout).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for (p, s) in hits.into_iter().flatten() {
        if cfg.dropout > 0.0 && drop.sample(&mut rng) {
            continue;
        }
        let p = if cfg.range_noise_std > 0.0 {
            let v = Vector3::from(p);
            let r = v.norm();
            let scale = (r + noise.sample(&mut rng)).max(1e-3) / r;
            (v * scale).into()
        } else {
            p
        };
        points.push(p);
        intensity.push(match s {
            Surface::Ground => cfg.ground_intensity,
            Surface::Box(_) => cfg.box_intensity,
        });
    }
    let raw_cloud = RawPointCloud::new(points, Some(intensity))?;

    let center = calib.camera_center();
    let (w, h) = (cfg.width, cfg.height);
    let pixels: Vec<Option<(f64, Surface)>> = (0..w * h)
        .into_par_iter()
        .map(|i| trace(&boxes, cfg.ground_plane(), center, calib.pixel_ray((i % w) as f64, (i / w) as f64)))
        .collect();
    let mut rgb = Vec::with_capacity(3 * w * h);
    for hit in &pixels {
        rgb.extend_from_slice(&match hit {
            None => cfg.background_color,
            Some((_, Surface::Ground)) => cfg.ground_color,
            Some((_, Surface::Box(b))) => colors[*b],
        });
    }
    let image = RgbImage::new(w, h, rgb)?;
    let gt_depth = pixels
        .iter()
        .map(|hit| hit.map(|(t, _)| t))
        .collect::<Option<Vec<f64>>>()
        .map(|d| DenseDepthMap::new(w, h, d))
        .transpose()?;

    Ok(SyntheticScene {
        boxes,
        colors,
        ground_z: cfg.ground_plane(),
        raw_cloud,
        image,
        gt_depth,
        calib,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::project_points;

    fn cfg(boxes: usize) -> SceneConfig {
        SceneConfig {
            box_count: boxes,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn every_pixel_sees_the_ground_by_default() {
        let s = generate_scene(&cfg(0), 1).unwrap();
        assert!(s.gt_depth.is_some());
        assert!(s.raw_cloud.points.iter().all(|p| (p[2] + 1.73).abs() < 1e-9));
    }

    #[test]
    fn empty_scene_has_nothing() {
        let s = generate_scene(&SceneConfig::empty(), 1).unwrap();
        assert!(s.raw_cloud.is_empty());
        assert!(s.gt_depth.is_none());
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&cfg(3), 42).unwrap();
        let b = generate_scene(&cfg(3), 42).unwrap();
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.raw_cloud, b.raw_cloud);
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt_depth, b.gt_depth);
        let c = generate_scene(&cfg(3), 43).unwrap();
        assert_ne!(a.boxes, c.boxes);
    }

    #[test]
    fn boxes_do_not_overlap() {
        let s = generate_scene(&cfg(5), 7).unwrap();
        for (i, a) in s.boxes.iter().enumerate() {
            for b in &s.boxes[i + 1..] {
                assert!(a.distance_xy(b) > a.half_diagonal_xy() + b.half_diagonal_xy());
            }
        }
    }

    #[test]
    fn infeasible_packing_errors() {
        let c = SceneConfig {
            box_count: 50,
            x_range: [10.0, 11.0],
            y_range: [0.0, 1.0],
            max_retries: 200,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&c, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn points_lie_on_surfaces() {
        let s = generate_scene(&cfg(3), 5).unwrap();
        assert!(s.raw_cloud.points.iter().all(|&p| s.surface_distance(p) < 1e-9));
    }

    #[test]
    fn box_ahead_depths_are_face_distances() {
        let c = cfg(0);
        let mut s = generate_scene(&c, 0).unwrap();
        let b = RoI::new([10.0, 0.0, -1.73 + 0.75], [4.0, 1.6, 1.5], 0.0, 1.0).unwrap();
        s.boxes = vec![b];
        let center = s.calib.camera_center();
        let (u, v) = (64.0, 5.0);
        let ray = s.calib.pixel_ray(u, v);
        let (t, surf) = s.trace(center, ray).unwrap();
        assert_eq!(surf, Surface::Box(0));
        // the ray meets the front face x = 8
        assert!((t - 8.0 / ray.x).abs() < 1e-12);
    }

    #[test]
    fn one_box_gives_one_colored_region() {
        let c = SceneConfig {
            box_count: 1,
            x_range: [10.0, 10.0],
            y_range: [0.0, 0.0],
            yaw_max: 0.0,
            ..SceneConfig::default()
        };
        let s = generate_scene(&c, 3).unwrap();
        let color = s.colors[0];
        let (w, h) = (c.width, c.height);
        let inside: Vec<(usize, usize)> = (0..h)
            .flat_map(|v| (0..w).map(move |u| (u, v)))
            .filter(|&(u, v)| s.image.get(u, v) == color)
            .collect();
        assert!(!inside.is_empty());
        // flood fill from one pixel reaches every pixel of that colour
        let mut seen = vec![false; w * h];
        let mut stack = vec![inside[0]];
        let mut count = 0;
        while let Some((u, v)) = stack.pop() {
            if seen[v * w + u] || s.image.get(u, v) != color {
                continue;
            }
            seen[v * w + u] = true;
            count += 1;
            if u > 0 {
                stack.push((u - 1, v));
            }
            if u + 1 < w {
                stack.push((u + 1, v));
            }
            if v > 0 {
                stack.push((u, v - 1));
            }
            if v + 1 < h {
                stack.push((u, v + 1));
            }
        }
        assert_eq!(count, inside.len());
        let depth = s.gt_depth.as_ref().unwrap();
        let center = s.calib.camera_center();
        let b = s.boxes[0];
        let grown = RoI::new(b.center, b.size.map(|v| v + 1e-9), b.yaw, 0.0).unwrap();
        for &(u, v) in &inside {
            let ray = s.calib.pixel_ray(u as f64, v as f64);
            let p = center + ray * depth.get(u, v);
            assert!(s.surface_distance(p.into()) < 1e-9);
            assert!(grown.contains(p.into()));
        }
    }

    #[test]
    fn lidar_depths_match_camera_rays() {
        let s = generate_scene(&cfg(3), 11).unwrap();
        let center = s.calib.camera_center();
        let samples = project_points(&s.raw_cloud, &s.calib);
        assert!(samples.len() > 100);
        for (_, smp) in samples {
            let (t, _) = s.trace(center, s.calib.pixel_ray(smp.u, smp.v)).unwrap();
            assert!((t - smp.d).abs() < 1e-6, "{t} vs {}", smp.d);
        }
    }

    #[test]
    fn noise_and_dropout_are_seeded() {
        let c = SceneConfig {
            range_noise_std: 0.05,
            dropout: 0.2,
            ..cfg(2)
        };
        let a = generate_scene(&c, 9).unwrap();
        let b = generate_scene(&c, 9).unwrap();
        assert_eq!(a.raw_cloud, b.raw_cloud);
        let clean = generate_scene(&cfg(2), 9).unwrap();
        assert!(a.raw_cloud.len() < clean.raw_cloud.len());
    }
}
