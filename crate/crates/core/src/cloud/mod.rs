//! Point species, voxelization, farthest point sampling and the two
//! neighborhood queries used for keypoint aggregation.

mod fps;
mod io;
mod query;
mod voxel;

pub use fps::{farthest_point_sample, KeypointSet};
pub use io::{read_points, read_points_csv, write_points};
pub use query::{ball_query, voxel_query, NeighborMatrix, NO_NEIGHBOR};
pub use voxel::{voxelize, voxelize_with_members, VoxelGrid, VoxelIndex};

use crate::calib::{unproject_pixel, Calibration};
use crate::depth::{DenseDepthMap, RgbImage};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One pseudo point per sampled pixel: position, colour and source pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoPoint {
    pub xyz: [f64; 3],
    pub rgb: [f64; 3],
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoPointCloud {
    pub points: Vec<PseudoPoint>,
}

impl PseudoPointCloud {
    pub const FIELDS: usize = 8;

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.xyz).collect()
    }

    /// `N × 8` rows of `x y z r g b u v`.
    pub fn to_matrix(&self) -> Tensor {
        let data = self
            .points
            .iter()
            .flat_map(|p| [p.xyz[0], p.xyz[1], p.xyz[2], p.rgb[0], p.rgb[1], p.rgb[2], p.u, p.v])
            .collect();
        Tensor::new(vec![self.points.len(), Self::FIELDS], data).expect("eight fields per point")
    }
}

/// Lifts every `stride`-th pixel (in both directions, starting at the
/// origin) to a pseudo point by inverse projection of its depth.
pub fn build_pseudo_cloud(
    image: &RgbImage,
    dense: &DenseDepthMap,
    calib: &Calibration,
    stride: usize,
) -> Result<PseudoPointCloud> {
    if image.width() != dense.width() || image.height() != dense.height() {
        return Err(Error::ShapeMismatch(format!(
            "image {}×{} vs depth {}×{}",
            image.width(),
            image.height(),
            dense.width(),
            dense.height()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("pseudo-point stride must be ≥ 1".into()));
    }
    let mut points = Vec::with_capacity(image.width() * image.height() / (stride * stride));
    for v in (0..image.height()).step_by(stride) {
        for u in (0..image.width()).step_by(stride) {
            let (uf, vf) = (u as f64, v as f64);
            points.push(PseudoPoint {
                xyz: unproject_pixel(uf, vf, dense.get(u, v), calib)?,
                rgb: image.get(u, v),
                u: uf,
                v: vf,
            });
        }
    }
    Ok(PseudoPointCloud { points })
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}
