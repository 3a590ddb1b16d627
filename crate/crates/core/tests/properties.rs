use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use pseudofuse::caaf::{wrap_angle, RoI};
use pseudofuse::calib::SparseDepthMap;
use pseudofuse::cloud::{farthest_point_sample, voxelize};
use pseudofuse::depth::{complete_depth, RgbImage};
use pseudofuse::loss::{bce, compose_total, smooth_l1, LossParts};
use pseudofuse::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tensor};

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-10.0..10.0f64)
}

fn roi() -> impl Strategy<Value = RoI> {
    (point(), prop::array::uniform3(0.2..6.0f64), -PI..PI).prop_map(|(c, s, y)| RoI::new(c, s, y, 0.0).unwrap())
}

proptest! {
    #[test]
    fn wrapped_angles_stay_in_half_open_interval(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let turns = (a - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn box_residuals_round_trip(anchor in roi(), target in roi()) {
        let back = anchor.decode(&anchor.encode(&target)).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(back.center[k], target.center[k], epsilon = 1e-9);
            assert_abs_diff_eq!(back.size[k], target.size[k], epsilon = 1e-9);
        }
        assert_abs_diff_eq!(wrap_angle(back.yaw - target.yaw), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn boxes_contain_their_center_and_corners(b in roi()) {
        prop_assert!(b.contains(b.center));
        let local = b.to_local(b.center);
        prop_assert!(local.iter().all(|v| v.abs() < 1e-12));
        prop_assert_eq!(b.corners().len(), 8);
    }

    #[test]
    fn voxel_means_preserve_feature_mass(
        pts in prop::collection::vec((point(), -1.0..1.0f64), 1..300),
        size in 0.3..3.0f64,
    ) {
        let rows: Vec<Vec<f64>> = pts.iter().map(|(p, f)| vec![p[0], p[1], p[2], *f]).collect();
        let lo = [-8.0; 3];
        let hi = [8.0; 3];
        let grid = voxelize(&Tensor::from_rows(&rows, 4).unwrap(), [size; 3], lo, hi).unwrap();
        let inside: Vec<&Vec<f64>> = rows.iter().filter(|r| (0..3).all(|k| r[k] >= lo[k] && r[k] < hi[k])).collect();
        prop_assert_eq!(grid.counts().iter().sum::<usize>(), inside.len());
        for col in 0..4 {
            let direct: f64 = inside.iter().map(|r| r[col]).sum();
            let pooled: f64 = (0..grid.len()).map(|i| grid.counts()[i] as f64 * grid.feature(i)[col]).sum();
            assert_abs_diff_eq!(direct, pooled, epsilon = 1e-9);
        }
    }

    #[test]
    fn fps_picks_distinct_points_starting_at_seed(
        pts in prop::collection::vec(point(), 1..80),
        count in 1usize..100,
        start_frac in 0.0..1.0f64,
    ) {
        let start = ((pts.len() as f64 * start_frac) as usize).min(pts.len() - 1);
        let k = farthest_point_sample(&pts, count, start).unwrap();
        prop_assert_eq!(k.len(), count.min(pts.len()));
        prop_assert_eq!(k.indices[0], start);
        let mut sorted = k.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k.len());
    }

    #[test]
    fn bce_matches_the_textbook_form(xs in prop::collection::vec((-20.0..20.0f64, any::<bool>()), 1..20)) {
        let logits: Vec<f64> = xs.iter().map(|x| x.0).collect();
        let labels: Vec<f64> = xs.iter().map(|x| f64::from(u8::from(x.1))).collect();
        let expect = logits
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / logits.len() as f64;
        assert_abs_diff_eq!(bce(&logits, &labels).unwrap(), expect, epsilon = 1e-7);
    }

    #[test]
    fn smooth_l1_is_bounded_by_l1_and_l2(
        pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..20),
        delta in 0.1..3.0f64,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let v = smooth_l1(&p, &t, delta).unwrap();
        let n = p.len() as f64;
        let l1: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let l2: f64 = p.iter().zip(&t).map(|(a, b)| 0.5 * (a - b).powi(2) / delta).sum::<f64>() / n;
        prop_assert!(v >= 0.0);
        prop_assert!(v <= l1 + 1e-12);
        prop_assert!(v <= l2 + 1e-12);
    }

    #[test]
    fn total_is_linear_in_the_aux_weights(
        parts in prop::array::uniform5(0.0..10.0f64),
        alpha in 0.0..2.0f64,
        beta in 0.0..2.0f64,
    ) {
        let p = LossParts { l_rpn: parts[0], l_ref: parts[1], l_depth: parts[2], l_as1: parts[3], l_as2: parts[4] };
        let a = compose_total(p, alpha, beta).unwrap().total;
        let b = compose_total(p, 2.0 * alpha, beta).unwrap().total;
        assert_abs_diff_eq!(b - a, alpha * parts[3], epsilon = 1e-9);
    }

    #[test]
    fn completion_keeps_measured_pixels(
        cells in prop::collection::vec(prop::option::weighted(0.2, 1.0..50.0f64), 4 * 6),
    ) {
        prop_assume!(cells.iter().any(Option::is_some));
        let grid: Vec<f64> = cells.iter().map(|c| c.unwrap_or(SparseDepthMap::EMPTY)).collect();
        let sparse = SparseDepthMap::from_grid(6, 4, grid).unwrap();
        let image = RgbImage::filled(6, 4, [0.2, 0.3, 0.4]).unwrap();
        let dense = complete_depth(&image, &sparse).unwrap();
        let lo = cells.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = cells.iter().flatten().copied().fold(0.0, f64::max);
        for (i, c) in cells.iter().enumerate() {
            let d = dense.cells()[i];
            match c {
                Some(v) => prop_assert_eq!(d, *v),
                None => prop_assert!(d >= lo && d <= hi),
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5), fill in -3.0..3.0f64) {
        let mut store = ParamStore::new();
        for (i, (r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c).map(|k| fill + k as f64 * 0.125).collect();
            store.add(format!("p{i}"), Tensor::new(vec![*r, *c], data).unwrap()).unwrap();
        }
        let mut buf = Vec::new();
        save_checkpoint(&store, &mut buf).unwrap();
        let back = load_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for ((_, na, ta), (_, nb, tb)) in store.iter().zip(back.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta, tb);
        }
    }
}
