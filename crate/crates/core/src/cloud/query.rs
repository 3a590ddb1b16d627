use rayon::prelude::*;

use super::{dist2, VoxelGrid};
use crate::{Error, Result};

/// Slot value for a center with no neighbor at all.
pub const NO_NEIGHBOR: usize = usize::MAX;

/// Fixed-width neighbor lists, one row per query center.
///
/// Rows hold ascending neighbor indices; rows with fewer hits than the
/// width are padded by repeating the first hit, and rows with no hit are
/// all [`NO_NEIGHBOR`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborMatrix {
    width: usize,
    slots: Vec<usize>,
    found: Vec<usize>,
}

impl NeighborMatrix {
    fn from_hits(width: usize, hits: Vec<Vec<usize>>) -> Self {
        let mut slots = Vec::with_capacity(hits.len() * width);
        let mut found = Vec::with_capacity(hits.len());
        for row in hits {
            found.push(row.len());
            match row.first() {
                None => slots.extend(std::iter::repeat_n(NO_NEIGHBOR, width)),
                Some(&first) => {
                    slots.extend_from_slice(&row);
                    slots.extend(std::iter::repeat_n(first, width - row.len()));
                }
            }
        }
        Self { width, slots, found }
    }

    pub fn rows(&self) -> usize {
        self.found.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.slots[i * self.width..(i + 1) * self.width]
    }

    /// Number of distinct neighbors found for center `i` (≤ width).
    pub fn found(&self, i: usize) -> usize {
        self.found[i]
    }

    /// The distinct neighbors of every center, without padding.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        (0..self.rows()).map(|i| self.row(i)[..self.found[i]].to_vec()).collect()
    }
}

fn check_width(max_neighbors: usize) -> Result<()> {
    if max_neighbors == 0 {
        return Err(Error::Domain("max_neighbors must be ≥ 1".into()));
    }
    Ok(())
}

/// Points within `radius` (inclusive) of each center, by brute force.
pub fn ball_query(
    centers: &[[f64; 3]],
    points: &[[f64; 3]],
    radius: f64,
    max_neighbors: usize,
) -> Result<NeighborMatrix> {
    check_width(max_neighbors)?;
    if !(radius > 0.0) {
        return Err(Error::Domain(format!("ball radius must be > 0, got {radius}")));
    }
    let r2 = radius * radius;
    let hits = centers
        .par_iter()
        .map(|c| {
            points
                .iter()
                .enumerate()
                .filter(|(_, p)| dist2(p, c) <= r2)
                .map(|(i, _)| i)
                .take(max_neighbors)
                .collect()
        })
        .collect();
    Ok(NeighborMatrix::from_hits(max_neighbors, hits))
}

/// Occupied voxels inside the `(2k+1)³` index kernel around each
/// center's voxel, as ordinals into `grid` (ascending index order).
/// Centers outside the grid range get an all-sentinel row.
pub fn voxel_query(
    centers: &[[f64; 3]],
    grid: &VoxelGrid,
    kernel_radius: usize,
    max_neighbors: usize,
) -> Result<NeighborMatrix> {
    check_width(max_neighbors)?;
    let k = kernel_radius as i64;
    let hits = centers
        .par_iter()
        .map(|c| {
            let Some(center) = grid.index_of(c) else {
                return Vec::new();
            };
            let mut out = Vec::new();
            'scan: for dx in -k..=k {
                for dy in -k..=k {
                    for dz in -k..=k {
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(o) = grid.ordinal(&key) {
                            out.push(o);
                            if out.len() == max_neighbors {
                                break 'scan;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    Ok(NeighborMatrix::from_hits(max_neighbors, hits))
}

#[cfg(test)]
mod tests {
    use super::super::voxelize;
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn ball_query_pads_with_first_hit() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let m = ball_query(&[[0.0; 3]], &pts, 1.5, 4).unwrap();
        assert_eq!(m.row(0), &[0, 1, 0, 0]);
        assert_eq!(m.groups(), vec![vec![0, 1]]);
    }

    #[test]
    fn ball_query_empty_and_truncated() {
        let pts = [[3.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let m = ball_query(&[[0.0; 3]], &pts, 0.5, 3).unwrap();
        assert_eq!(m.row(0), &[NO_NEIGHBOR; 3]);
        let m = ball_query(&[[0.0; 3]], &pts, 5.0, 1).unwrap();
        assert_eq!(m.row(0), &[0]);
        assert!(ball_query(&[[0.0; 3]], &pts, 0.0, 1).is_err());
        assert!(ball_query(&[[0.0; 3]], &pts, 1.0, 0).is_err());
    }

    fn cube_grid() -> VoxelGrid {
        let mut rows = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    rows.push(vec![x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]);
                }
            }
        }
        voxelize(&Tensor::from_rows(&rows, 3).unwrap(), [1.0; 3], [0.0; 3], [3.0; 3]).unwrap()
    }

    #[test]
    fn voxel_query_full_kernel_is_lexicographic() {
        let g = cube_grid();
        let m = voxel_query(&[[1.5; 3]], &g, 1, 27).unwrap();
        let keys: Vec<_> = m.row(0).iter().map(|&o| g.keys()[o]).collect();
        let mut expected = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    expected.push([x, y, z]);
                }
            }
        }
        assert_eq!(keys, expected);
    }

    #[test]
    fn voxel_query_self_and_degenerate_kernel() {
        let g = voxelize(&Tensor::from_rows(&[vec![1.5, 1.5, 1.5]], 3).unwrap(), [1.0; 3], [0.0; 3], [3.0; 3]).unwrap();
        let m = voxel_query(&[[1.2, 1.7, 1.1]], &g, 1, 4).unwrap();
        assert_eq!(m.row(0), &[0, 0, 0, 0]);
        assert_eq!(m.found(0), 1);
        let cube = cube_grid();
        let m = voxel_query(&[[0.5, 2.5, 1.5]], &cube, 0, 3).unwrap();
        assert_eq!(m.found(0), 1);
        assert_eq!(cube.keys()[m.row(0)[0]], [0, 2, 1]);
    }

    #[test]
    fn voxel_query_outside_range_is_sentinel() {
        let m = voxel_query(&[[-1.0, 0.0, 0.0]], &cube_grid(), 2, 2).unwrap();
        assert_eq!(m.row(0), &[NO_NEIGHBOR, NO_NEIGHBOR]);
    }
}
