use std::collections::HashMap;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Integer voxel coordinate.
pub type VoxelIndex = [i64; 3];

/// Occupied voxels of an axis-aligned range, sorted by index.
///
/// Each voxel stores the mean of its member feature rows (the first three
/// columns are the member positions, so their mean is the centroid) and
/// the member count.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    voxel_size: [f64; 3],
    range_min: [f64; 3],
    range_max: [f64; 3],
    dims: [i64; 3],
    keys: Vec<VoxelIndex>,
    features: Vec<f64>,
    counts: Vec<usize>,
    feature_dim: usize,
    lookup: HashMap<VoxelIndex, usize>,
}

fn check_geometry(voxel_size: [f64; 3], range_min: [f64; 3], range_max: [f64; 3]) -> Result<[i64; 3]> {
    let mut dims = [0; 3];
    for a in 0..3 {
        if !(voxel_size[a] > 0.0 && voxel_size[a].is_finite()) {
            return Err(Error::Domain(format!("voxel size {:?} must be positive", voxel_size)));
        }
        if !(range_min[a] < range_max[a]) {
            return Err(Error::Domain(format!(
                "range min {:?} must be below max {:?}",
                range_min, range_max
            )));
        }
        dims[a] = ((range_max[a] - range_min[a]) / voxel_size[a]).ceil() as i64;
    }
    Ok(dims)
}

impl VoxelGrid {
    /// A grid with no occupied voxels.
    pub fn empty(voxel_size: [f64; 3], range_min: [f64; 3], range_max: [f64; 3], feature_dim: usize) -> Result<Self> {
        let dims = check_geometry(voxel_size, range_min, range_max)?;
        Ok(Self {
            voxel_size,
            range_min,
            range_max,
            dims,
            keys: Vec::new(),
            features: Vec::new(),
            counts: Vec::new(),
            feature_dim,
            lookup: HashMap::new(),
        })
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn range_min(&self) -> [f64; 3] {
        self.range_min
    }

    pub fn range_max(&self) -> [f64; 3] {
        self.range_max
    }

    /// Number of voxels along each axis.
    pub fn dims(&self) -> [i64; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn keys(&self) -> &[VoxelIndex] {
        &self.keys
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn centroid(&self, i: usize) -> [f64; 3] {
        let f = self.feature(i);
        [f[0], f[1], f[2]]
    }

    pub fn centroids(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.centroid(i)).collect()
    }

    /// Mean features as a `voxels × F` matrix, rows in index order.
    pub fn feature_matrix(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.feature_dim], self.features.clone()).expect("consistent grid")
    }

    /// Position of voxel `key` in the sorted voxel list.
    pub fn ordinal(&self, key: &VoxelIndex) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    /// Voxel containing `p`, or `None` when `p` is outside the range.
    pub fn index_of(&self, p: &[f64]) -> Option<VoxelIndex> {
        let mut idx = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            idx[a] = ((p[a] - self.range_min[a]) / self.voxel_size[a]).floor() as i64;
            if idx[a] >= self.dims[a] {
                return None;
            }
        }
        Some(idx)
    }

    /// The same range with every voxel edge scaled by `factor`.
    pub fn coarsened_geometry(&self, factor: f64) -> Result<Self> {
        let size = self.voxel_size.map(|s| s * factor);
        Self::empty(size, self.range_min, self.range_max, self.feature_dim)
    }
}

/// Bins the rows of an `N × F` matrix (`F ≥ 3`, columns 0..3 are
/// positions in meters) by `⌊(p − range_min) / voxel_size⌋` and averages
/// each bin's rows. Points outside `[range_min, range_max)` are dropped.
pub fn voxelize(points: &Tensor, voxel_size: [f64; 3], range_min: [f64; 3], range_max: [f64; 3]) -> Result<VoxelGrid> {
    voxelize_with_members(points, voxel_size, range_min, range_max).map(|(g, _)| g)
}

/// [`voxelize`], also returning each voxel's member row indices
/// (ascending).
pub fn voxelize_with_members(
    points: &Tensor,
    voxel_size: [f64; 3],
    range_min: [f64; 3],
    range_max: [f64; 3],
) -> Result<(VoxelGrid, Vec<Vec<usize>>)> {
    if points.ndim() != 2 || points.shape()[1] < 3 {
        return Err(Error::ShapeMismatch(format!(
            "voxelize expects an N×F matrix with F ≥ 3, got {:?}",
            points.shape()
        )));
    }
    let f = points.shape()[1];
    let mut grid = VoxelGrid::empty(voxel_size, range_min, range_max, f)?;
    let mut bins: HashMap<VoxelIndex, Vec<usize>> = HashMap::new();
    for r in 0..points.rows() {
        if let Some(idx) = grid.index_of(points.row(r)) {
            bins.entry(idx).or_default().push(r);
        }
    }
    let mut entries: Vec<(VoxelIndex, Vec<usize>)> = bins.into_iter().collect();
    entries.sort_unstable_by_key(|(k, _)| *k);

    grid.features = Vec::with_capacity(entries.len() * f);
    for (i, (key, members)) in entries.iter().enumerate() {
        let mut mean = vec![0.0; f];
        for &r in members {
            for (m, v) in mean.iter_mut().zip(points.row(r)) {
                *m += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        grid.features.extend(mean.iter().map(|m| m * inv));
        grid.keys.push(*key);
        grid.counts.push(members.len());
        grid.lookup.insert(*key, i);
    }
    let members = entries.into_iter().map(|(_, m)| m).collect();
    Ok((grid, members))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 3]]) -> Tensor {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Tensor::from_rows(&v, 3).unwrap()
    }

    #[test]
    fn single_bin_mean() {
        let g = voxelize(&pts(&[[0.1, 0.1, 0.1], [0.3, 0.3, 0.3]]), [1.0; 3], [0.0; 3], [4.0; 3]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.counts(), &[2]);
        for (a, b) in g.centroid(0).iter().zip([0.2; 3]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn boundary_floors_up() {
        let g = voxelize(&pts(&[[1.0, 0.5, 0.5]]), [1.0; 3], [0.0; 3], [4.0; 3]).unwrap();
        assert_eq!(g.keys(), &[[1, 0, 0]]);
    }

    #[test]
    fn out_of_range_points_are_dropped() {
        let g = voxelize(
            &pts(&[[-0.1, 0.0, 0.0], [4.0, 1.0, 1.0], [3.99, 3.99, 3.99]]),
            [1.0; 3],
            [0.0; 3],
            [4.0; 3],
        )
        .unwrap();
        assert_eq!(g.keys(), &[[3, 3, 3]]);
    }

    #[test]
    fn keys_are_sorted_and_mapped() {
        let g = voxelize(
            &pts(&[[2.5, 0.0, 0.0], [0.5, 3.0, 0.0], [0.5, 0.0, 1.0], [0.5, 0.2, 1.5]]),
            [1.0; 3],
            [0.0; 3],
            [4.0; 3],
        )
        .unwrap();
        assert_eq!(g.keys(), &[[0, 0, 1], [0, 3, 0], [2, 0, 0]]);
        assert_eq!(g.counts(), &[2, 1, 1]);
        assert_eq!(g.ordinal(&[0, 3, 0]), Some(1));
        assert_eq!(g.ordinal(&[1, 1, 1]), None);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(voxelize(&pts(&[]), [0.0, 1.0, 1.0], [0.0; 3], [1.0; 3]).is_err());
        assert!(voxelize(&pts(&[]), [1.0; 3], [1.0; 3], [1.0; 3]).is_err());
    }
}
