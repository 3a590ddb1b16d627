//! Run configuration, read from TOML key/value files.
//!
//! Every field has a default, so an empty file is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::prconv::{SourceToggles, LEVELS};
use crate::tensor::PoolMode;
use crate::{Error, Result};

/// Synthetic scene parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Downward camera tilt.
    pub pitch_deg: f64,
    /// Camera centre in the LiDAR frame.
    pub camera_position: [f64; 3],
    /// Height of the ground plane; boxes stand on it.
    pub ground_z: f64,
    /// `false` removes the ground plane (boxes still stand at `ground_z`).
    pub ground: bool,
    pub azimuths: usize,
    pub azimuth_half_fov_deg: f64,
    pub elevations: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub box_count: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub yaw_max: f64,
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    /// Extra xy clearance between sampled boxes.
    pub min_gap: f64,
    pub max_retries: usize,
    /// Standard deviation of Gaussian noise on LiDAR ranges (0 = off).
    pub range_noise_std: f64,
    /// Probability of dropping each LiDAR return.
    pub dropout: f64,
    pub ground_color: [f64; 3],
    pub background_color: [f64; 3],
    pub box_intensity: f64,
    pub ground_intensity: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 48,
            fx: 120.0,
            fy: 120.0,
            cx: 64.0,
            cy: 24.0,
            pitch_deg: 13.0,
            camera_position: [0.0, 0.0, 0.0],
            ground_z: -1.73,
            ground: true,
            azimuths: 240,
            azimuth_half_fov_deg: 40.0,
            elevations: 32,
            elevation_min_deg: -24.0,
            elevation_max_deg: 2.0,
            box_count: 2,
            x_range: [8.0, 30.0],
            y_range: [-6.0, 6.0],
            yaw_max: 0.5,
            length_range: [3.6, 4.4],
            width_range: [1.5, 1.8],
            height_range: [1.4, 1.7],
            min_gap: 0.5,
            max_retries: 1000,
            range_noise_std: 0.0,
            dropout: 0.0,
            ground_color: [0.35, 0.35, 0.35],
            background_color: [0.0, 0.0, 0.0],
            box_intensity: 0.8,
            ground_intensity: 0.3,
        }
    }
}

impl SceneConfig {
    /// No boxes and no ground: every ray misses.
    pub fn empty() -> Self {
        Self {
            box_count: 0,
            ground: false,
            ..Self::default()
        }
    }

    pub fn ground_plane(&self) -> Option<f64> {
        self.ground.then_some(self.ground_z)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || self.height == 0 || self.azimuths == 0 || self.elevations == 0 {
            return bad("image size and LiDAR grid must be positive".into());
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive".into());
        }
        for (name, r) in [
            ("x_range", self.x_range),
            ("y_range", self.y_range),
            ("length_range", self.length_range),
            ("width_range", self.width_range),
            ("height_range", self.height_range),
        ] {
            if !(r[0] <= r[1]) || r.iter().any(|v| !v.is_finite()) {
                return bad(format!("{name} must be an ordered finite pair"));
            }
        }
        if self.length_range[0] <= 0.0 || self.width_range[0] <= 0.0 || self.height_range[0] <= 0.0 {
            return bad("box dimensions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(self.range_noise_std >= 0.0) {
            return bad("dropout must be in [0, 1] and noise ≥ 0".into());
        }
        if self.elevation_min_deg > self.elevation_max_deg {
            return bad("elevation range is reversed".into());
        }
        let colors = [self.ground_color, self.background_color];
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("colors must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Optimizer used by the overfit loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Cloud that farthest point sampling draws keypoints from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointSource {
    /// In-range raw points only.
    Raw,
    /// In-range raw points followed by in-range pseudo points.
    Union,
}

/// Pipeline, model and training parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub keypoint_count: usize,
    pub keypoint_source: KeypointSource,
    pub voxel_size: f64,
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    /// Ball radius for points, then the metric radius of voxel levels 1..4.
    pub radii: [f64; LEVELS + 1],
    pub max_neighbors: usize,
    pub pool_mode: PoolMode,
    pub level_widths: [usize; LEVELS],
    pub keypoint_hidden: Vec<usize>,
    pub keypoint_dim: usize,
    pub d_m: usize,
    pub head_hidden: usize,
    /// Linear `2·D_m → D_m` adapter in front of the refinement head.
    pub fusion_adapter: bool,
    pub stride: usize,
    pub top_n: usize,
    pub prior_size: [f64; 3],
    pub prior_z: f64,
    /// Positive match when the xy centre distance is below this fraction
    /// of the ground-truth xy diagonal.
    pub match_fraction: f64,
    /// Jittered ground-truth copies added to the RoIs during training.
    pub gt_jitter_copies: usize,
    pub jitter_center: f64,
    pub jitter_log_size: f64,
    pub jitter_yaw: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub divergence_threshold: f64,
    pub use_pseudo: bool,
    pub prconv: bool,
    pub caaf: bool,
    pub sources: SourceToggles,
    pub scene: SceneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            keypoint_count: 2048,
            keypoint_source: KeypointSource::Raw,
            voxel_size: 0.4,
            range_min: [0.0, -19.2, -3.2],
            range_max: [38.4, 19.2, 3.2],
            radii: [0.4, 0.8, 1.2, 2.4, 4.8],
            max_neighbors: 16,
            pool_mode: PoolMode::Max,
            level_widths: [16; LEVELS],
            keypoint_hidden: vec![32],
            keypoint_dim: 32,
            d_m: 16,
            head_hidden: 32,
            fusion_adapter: false,
            stride: 2,
            top_n: 8,
            prior_size: [3.9, 1.6, 1.56],
            prior_z: -0.95,
            match_fraction: 0.5,
            gt_jitter_copies: 0,
            jitter_center: 0.3,
            jitter_log_size: 0.1,
            jitter_yaw: 0.1,
            alpha: 0.5,
            beta: 0.5,
            delta: 1.0,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.2,
            steps: 500,
            divergence_threshold: 1e6,
            use_pseudo: true,
            prconv: true,
            caaf: true,
            sources: SourceToggles::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.keypoint_count == 0
            || self.max_neighbors == 0
            || self.keypoint_dim == 0
            || self.d_m == 0
            || self.head_hidden == 0
            || self.stride == 0
            || self.top_n == 0
        {
            return bad("counts and widths must be positive");
        }
        if self.level_widths.contains(&0) || self.keypoint_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(self.voxel_size > 0.0) || self.radii.iter().any(|r| !(*r > 0.0)) {
            return bad("voxel size and radii must be positive");
        }
        if (0..3).any(|k| !(self.range_max[k] > self.range_min[k])) {
            return bad("range_max must exceed range_min on every axis");
        }
        if self.prior_size.iter().any(|s| !(*s > 0.0)) {
            return bad("prior box size must be positive");
        }
        if !(self.match_fraction > 0.0) || !(self.delta > 0.0) {
            return bad("match_fraction and delta must be positive");
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be ≥ 0");
        }
        if !(self.learning_rate > 0.0) || !(self.divergence_threshold > 0.0) {
            return bad("learning rate and divergence threshold must be positive");
        }
        if [self.jitter_center, self.jitter_log_size, self.jitter_yaw].iter().any(|j| !(*j >= 0.0)) {
            return bad("jitter scales must be ≥ 0");
        }
        if !self.sources.any() {
            return bad("at least one keypoint feature source must be enabled");
        }
        if self.caaf && !self.use_pseudo {
            return bad("gated fusion needs the pseudo branch");
        }
        if self.keypoint_source == KeypointSource::Union && !self.use_pseudo {
            return bad("union keypoints need the pseudo branch");
        }
        self.scene.validate()
    }

    /// Fusion ablation rows: `a` = neither pseudo convolutions nor gated
    /// fusion, `b` = pseudo convolutions only, `c` = both.
    pub fn with_fusion_row(mut self, row: char) -> Result<Self> {
        let (prconv, caaf) = match row {
            'a' => (false, false),
            'b' => (true, false),
            'c' => (true, true),
            _ => return Err(Error::Config(format!("unknown fusion ablation row `{row}`"))),
        };
        self.use_pseudo = true;
        self.prconv = prconv;
        self.caaf = caaf;
        Ok(self)
    }

    /// Source ablation rows: `a` = point features only, then `b`..`e`
    /// add voxel levels 1..4.
    pub fn with_source_row(mut self, row: char) -> Result<Self> {
        let levels = match row {
            'a'..='e' => row as usize - 'a' as usize,
            _ => return Err(Error::Config(format!("unknown source ablation row `{row}`"))),
        };
        self.sources = SourceToggles {
            point: true,
            conv: std::array::from_fn(|k| k < levels),
        };
        Ok(self)
    }

    /// Labels of the ablation rows this config matches, if any.
    pub fn ablation_rows(&self) -> (Option<char>, Option<char>) {
        let fusion = match (self.use_pseudo, self.prconv, self.caaf) {
            (true, false, false) => Some('a'),
            (true, true, false) => Some('b'),
            (true, true, true) => Some('c'),
            _ => None,
        };
        let levels = self.sources.conv.iter().take_while(|&&c| c).count();
        let prefix = self.sources.point && self.sources.conv[levels..].iter().all(|&c| !c);
        let source = prefix.then(|| (b'a' + levels as u8) as char);
        (fusion, source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = PipelineConfig::default();
        c.keypoint_count = 64;
        c.pool_mode = PoolMode::Avg;
        c.scene.ground = false;
        c.scene.box_count = 0;
        let text = c.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_override() {
        let c = PipelineConfig::from_toml("keypoint_count = 128\n[scene]\nbox_count = 1\n").unwrap();
        assert_eq!(c.keypoint_count, 128);
        assert_eq!(c.scene.box_count, 1);
        assert_eq!(c.d_m, 16);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(PipelineConfig::from_toml("keypoint_count = 0"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("bogus = 1"), Err(Error::Parse(_))));
        assert!(PipelineConfig::from_toml("use_pseudo = false").is_err());
        assert!(PipelineConfig::from_toml("use_pseudo = false\ncaaf = false").is_ok());
        let none = "[sources]\npoint = false\nconv = [false, false, false, false]\n";
        assert!(PipelineConfig::from_toml(none).is_err());
    }

    #[test]
    fn ablation_rows_round_trip() {
        for f in ['a', 'b', 'c'] {
            for s in ['a', 'b', 'c', 'd', 'e'] {
                let c = PipelineConfig::default().with_fusion_row(f).unwrap().with_source_row(s).unwrap();
                c.validate().unwrap();
                assert_eq!(c.ablation_rows(), (Some(f), Some(s)));
            }
        }
        assert!(PipelineConfig::default().with_source_row('f').is_err());
    }
}
