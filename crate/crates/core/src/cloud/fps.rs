use super::dist2;
use crate::{Error, Result};

/// Keypoints chosen from a source cloud, in selection order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointSet {
    pub indices: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Greedy farthest point sampling seeded at `start_index`.
///
/// Each step picks the unselected point whose squared distance to the
/// selected set is largest, the lowest index winning ties. Asking for
/// more points than exist returns all of them.
pub fn farthest_point_sample(points: &[[f64; 3]], count: usize, start_index: usize) -> Result<KeypointSet> {
    if points.is_empty() {
        return Err(Error::Domain("farthest point sampling needs at least one point".into()));
    }
    if count == 0 {
        return Err(Error::Domain("keypoint count must be ≥ 1".into()));
    }
    if start_index >= points.len() {
        return Err(Error::Domain(format!(
            "start index {start_index} out of range for {} points",
            points.len()
        )));
    }
    let n = points.len();
    let m = count.min(n);
    let mut selected = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(m);
    let mut current = start_index;
    loop {
        selected[current] = true;
        indices.push(current);
        if indices.len() == m {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    let positions = indices.iter().map(|&i| points[i]).collect();
    Ok(KeypointSet { indices, positions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Vec<[f64; 3]> {
        (0..10).map(|x| [x as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn picks_far_endpoint_then_middle() {
        assert_eq!(farthest_point_sample(&line(), 2, 0).unwrap().indices, vec![0, 9]);
        // 4 and 5 are both 4 away from {0, 9}; the lower index wins.
        assert_eq!(farthest_point_sample(&line(), 3, 0).unwrap().indices, vec![0, 9, 4]);
    }

    #[test]
    fn exhausts_source() {
        let mut idx = farthest_point_sample(&line(), 10, 3).unwrap().indices;
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert_eq!(farthest_point_sample(&line(), 50, 0).unwrap().len(), 10);
    }

    #[test]
    fn duplicates_are_never_reselected() {
        let pts = vec![[0.0; 3]; 5];
        let idx = farthest_point_sample(&pts, 5, 2).unwrap().indices;
        assert_eq!(idx, vec![2, 0, 1, 3, 4]);
    }

    #[test]
    fn preconditions() {
        assert!(farthest_point_sample(&[], 1, 0).is_err());
        assert!(farthest_point_sample(&line(), 0, 0).is_err());
        assert!(farthest_point_sample(&line(), 1, 10).is_err());
    }
}
