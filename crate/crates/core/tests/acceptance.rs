//! Acceptance checks. Runs without the libtest harness so every
//! criterion prints its own PASS/FAIL line; exits nonzero on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pseudofuse::caaf::{caaf_fuse, RoIFeaturePair};
use pseudofuse::calib::{project_points, unproject_pixel, RawPointCloud};
use pseudofuse::cloud::{ball_query, build_pseudo_cloud, farthest_point_sample, voxelize, NO_NEIGHBOR};
use pseudofuse::config::PipelineConfig;
use pseudofuse::depth::{DepthCompleter, MorphologicalCompleter};
use pseudofuse::loss::{compose_total, LossParts};
use pseudofuse::pipeline::gradsuite::gradient_suite;
use pseudofuse::pipeline::{overfit_test, run_pipeline, Model, TrainingSetup};
use pseudofuse::scene::{generate_scene, scene_calibration};
use pseudofuse::tensor::{Graph, LinearLayer, ParamStore, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn round_trip() -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let calib = scene_calibration(&cfg.scene).unwrap();
    let (k, r, t) = (calib.k(), calib.r(), calib.t());
    let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // camera-frame points through uniformly drawn pixels, mapped to the world
    let points: Vec<[f64; 3]> = (0..10_000)
        .map(|_| {
            let u = rng.random_range(0.0..calib.width() as f64);
            let v = rng.random_range(0.0..calib.height() as f64);
            let z = rng.random_range(0.5..80.0);
            let cam = Vector3::new((u - cx) / fx * z, (v - cy) / fy * z, z);
            let p = r.transpose() * (cam - t);
            [p.x, p.y, p.z]
        })
        .collect();
    let cloud = RawPointCloud::new(points.clone(), None).unwrap();
    let projected = project_points(&cloud, &calib);
    let mut worst: f64 = 0.0;
    for (i, s) in &projected {
        let q = unproject_pixel(s.u, s.v, s.d, &calib).unwrap();
        let e = (0..3).map(|a| (q[a] - points[*i][a]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(e);
    }
    let elapsed = start.elapsed();
    outcome(
        projected.len() == points.len() && worst <= 1e-9 && within(elapsed, 1.0),
        format!(
            "{} / {} projected, max error {worst:.2e} m (tol 1e-9), {:.3} s (limit 1 s)",
            projected.len(),
            points.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_fps(points: &[[f64; 3]], count: usize, start: usize) -> Vec<usize> {
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let mut chosen = vec![start];
    while chosen.len() < count.min(points.len()) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let nearest = chosen.iter().map(|&c| d2(p, &points[c])).fold(f64::INFINITY, f64::min);
            if nearest > best.0 {
                best = (nearest, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, lattice: bool) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            if lattice {
                // coarse lattice so distance ties actually occur
                std::array::from_fn(|_| rng.random_range(0..4) as f64)
            } else {
                std::array::from_fn(|_| rng.random_range(-5.0..5.0))
            }
        })
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fps_ok = 0;
    for inst in 0..200 {
        let n = rng.random_range(1..=64);
        let pts = random_cloud(&mut rng, n, inst % 4 == 0);
        let count = rng.random_range(1..=n);
        let s = rng.random_range(0..n);
        if farthest_point_sample(&pts, count, s).unwrap().indices == oracle_fps(&pts, count, s) {
            fps_ok += 1;
        }
    }
    let mut ball_ok = 0;
    for inst in 0..200 {
        let n = rng.random_range(1..=512);
        let m = rng.random_range(1..=32);
        let pts = random_cloud(&mut rng, n, inst % 4 == 0);
        let centers = random_cloud(&mut rng, m, inst % 4 == 0);
        let radius = rng.random_range(0.5..3.0);
        let k = rng.random_range(1..=48);
        let got = ball_query(&centers, &pts, radius, k).unwrap();
        let same = centers.iter().enumerate().all(|(ci, c)| {
            let mut expect: Vec<usize> = pts
                .iter()
                .enumerate()
                .filter(|(_, p)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= radius * radius)
                .map(|(i, _)| i)
                .take(k)
                .collect();
            let hits = expect.len();
            // short rows repeat their first hit; empty rows are all sentinel
            expect.resize(k, expect.first().copied().unwrap_or(NO_NEIGHBOR));
            got.found(ci) == hits && got.row(ci) == expect.as_slice()
        });
        if same {
            ball_ok += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        fps_ok == 200 && ball_ok == 200 && within(elapsed, 10.0),
        format!(
            "fps {fps_ok}/200, ball query {ball_ok}/200 exact, {:.3} s (limit 10 s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (lo, hi) = ([0.0, -10.0, -3.0], [20.0, 10.0, 1.0]);
    let mut exact = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=2000);
        let size = rng.random_range(0.1..2.0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                vec![
                    rng.random_range(-5.0..25.0),
                    rng.random_range(-12.0..12.0),
                    rng.random_range(-4.0..2.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let inside = rows.iter().filter(|r| (0..3).all(|k| r[k] >= lo[k] && r[k] < hi[k])).count();
        let grid = voxelize(&Tensor::from_rows(&rows, 4).unwrap(), [size; 3], lo, hi).unwrap();
        if grid.counts().iter().sum::<usize>() == inside {
            exact += 1;
        }
    }
    outcome(exact == 100, format!("{exact}/100 clouds keep their in-range count exactly"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let checks = gradient_suite(50, 4).unwrap();
    let elapsed = start.elapsed();
    let failing: Vec<&str> = checks.iter().filter(|c| !c.passes(1e-4)).map(|c| c.name.as_str()).collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let entries: usize = checks.iter().map(|c| c.checked).sum();
    outcome(
        failing.is_empty() && checks.iter().all(|c| c.draws >= 50) && within(elapsed, 30.0),
        format!(
            "{} ops x 50 draws, {entries} entries, worst rel {worst:.2e} (tol 1e-4), failing {failing:?}, {:.2} s (limit 30 s)",
            checks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    let data = (0..r * c).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![r, c], data).unwrap()
}

fn gate_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (6, 8);
    let f_raw = random_matrix(&mut rng, n, d, 3.0);
    let f_pse = random_matrix(&mut rng, n, d, 3.0);
    let mut store = ParamStore::new();
    let zero = LinearLayer::from_parts(&mut store, "fc", Tensor::zeros(vec![2 * d, 2 * d]), Tensor::zeros(vec![2 * d]))
        .unwrap();
    let (fused, _) = caaf_fuse(&RoIFeaturePair::new(f_raw.clone(), f_pse.clone()).unwrap(), &zero, &store).unwrap();
    let half_concat = (0..n).all(|i| {
        let expect: Vec<f64> = f_raw.row(i).iter().chain(f_pse.row(i)).map(|v| 0.5 * v).collect();
        fused.features.row(i) == expect.as_slice()
    });

    let mut inside = 0;
    let mut extremes = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=4);
        let mut store = ParamStore::new();
        let fc = LinearLayer::from_parts(
            &mut store,
            "fc",
            random_matrix(&mut rng, 2 * d, 2 * d, 1.0),
            random_matrix(&mut rng, 1, 2 * d, 1.0).reshape(vec![2 * d]).unwrap(),
        )
        .unwrap();
        let pair = RoIFeaturePair::new(random_matrix(&mut rng, n, d, 4.0), random_matrix(&mut rng, n, d, 4.0)).unwrap();
        let (_, gates) = caaf_fuse(&pair, &fc, &store).unwrap();
        let all: Vec<f64> = gates.w_raw.data().iter().chain(gates.w_pse.data()).copied().collect();
        for &w in &all {
            extremes = (extremes.0.min(w), extremes.1.max(w));
        }
        if all.iter().all(|&w| w > 0.0 && w < 1.0) {
            inside += 1;
        }
    }
    outcome(
        half_concat && inside == 1000,
        format!(
            "zero FC gives 0.5*concat exactly: {half_concat}; gates in (0,1) for {inside}/1000 draws (range {:.4}..{:.4})",
            extremes.0, extremes.1
        ),
    )
}

fn composition() -> Outcome {
    let ones = LossParts {
        l_rpn: 1.0,
        l_ref: 1.0,
        l_depth: 1.0,
        l_as1: 1.0,
        l_as2: 1.0,
    };
    let total = compose_total(ones, 0.5, 0.5).unwrap().total;

    let mut cfg = PipelineConfig::default();
    let scene = generate_scene(&cfg.scene, cfg.seed).unwrap();
    let model = Model::new(&cfg).unwrap();
    let setup = TrainingSetup::new(&cfg, &scene, &model).unwrap().unwrap();
    let aux_ids: Vec<_> = model.aux_raw.layers().iter().flat_map(|l| [l.weight, l.bias]).collect();
    let mut aux_grads = |alpha: f64| -> Vec<f64> {
        cfg.alpha = alpha;
        let mut g = Graph::new();
        let (fv, bound) = setup.forward(&mut g, &model, &cfg, true).unwrap();
        let grads = g.backward(fv.total).unwrap();
        aux_ids
            .iter()
            .flat_map(|&id| grads.get(bound.var(id)).unwrap().data().to_vec())
            .collect()
    };
    let base = aux_grads(0.5);
    let doubled = aux_grads(1.0);
    let nonzero = base.iter().filter(|g| g.abs() > 1e-12).count();
    let worst = base
        .iter()
        .zip(&doubled)
        .filter(|(b, _)| b.abs() > 1e-12)
        .map(|(b, d)| (d / b - 2.0).abs())
        .fold(0.0, f64::max);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ratio = norm(&doubled) / norm(&base);
    outcome(
        total == 4.0 && nonzero > 0 && worst <= 1e-9 && (ratio - 2.0).abs() <= 1e-9,
        format!(
            "all-ones total {total} (want 4.0 exactly); aux gradient norm ratio {ratio:.12}, worst elementwise |ratio-2| {worst:.1e} over {nonzero} entries (tol 1e-9)"
        ),
    )
}

fn fidelity() -> Outcome {
    let cfg = PipelineConfig::default();
    let scene = generate_scene(&cfg.scene, 7).unwrap();
    let gt = scene.gt_depth.as_ref().expect("default scene covers every pixel");
    let exact = build_pseudo_cloud(&scene.image, gt, &scene.calib, 1).unwrap();
    let worst = exact.positions().iter().map(|&p| scene.surface_distance(p)).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sparse = gt.to_sparse(|_, _| rng.random_bool(0.5));
    let dense = MorphologicalCompleter::default().complete(&scene.image, &sparse).unwrap();
    let completed = build_pseudo_cloud(&scene.image, &dense, &scene.calib, 1).unwrap();
    let mut errs: Vec<f64> = completed.positions().iter().map(|&p| scene.surface_distance(p)).collect();
    errs.sort_by(f64::total_cmp);
    let median = errs[errs.len() / 2];
    outcome(
        worst <= 1e-6 && median < 0.5,
        format!(
            "{} exact pseudo points, max surface distance {worst:.2e} m (tol 1e-6); half-masked completion median {median:.4} m (limit 0.5)",
            exact.len()
        ),
    )
}

fn overfit() -> Outcome {
    let cfg = PipelineConfig::default();
    let scene = generate_scene(&cfg.scene, cfg.seed).unwrap();
    let start = Instant::now();
    let (report, _) = overfit_test(&cfg, &scene, 500).unwrap();
    let elapsed = start.elapsed();
    let ratio = report.final_total() / report.initial_total();
    let conf = report.min_gt_confidence();
    outcome(
        ratio < 0.2 && conf > 0.9 && within(elapsed, 300.0),
        format!(
            "total {:.4} -> {:.4} ({:.1}% of initial, limit 20%), min gt confidence {conf:.4} (limit 0.9), {:.1} s (limit 300 s)",
            report.initial_total(),
            report.final_total(),
            100.0 * ratio,
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_matrix() -> Outcome {
    let base = PipelineConfig::default();
    let scene = generate_scene(&base.scene, base.seed).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for row in ['a', 'b', 'c'] {
        let cfg = base.clone().with_fusion_row(row).unwrap();
        match run_pipeline(&cfg, &scene) {
            Ok(run) => lines.push(format!("fusion({row}) fused {}", run.record.widths.fused)),
            Err(e) => {
                ok = false;
                lines.push(format!("fusion({row}) error {e}"));
            }
        }
    }
    let mut widths = Vec::new();
    for row in ['a', 'b', 'c', 'd', 'e'] {
        let cfg = base.clone().with_source_row(row).unwrap();
        match run_pipeline(&cfg, &scene) {
            Ok(run) => widths.push(run.record.widths.pre_mlp),
            Err(e) => {
                ok = false;
                lines.push(format!("sources({row}) error {e}"));
            }
        }
    }
    let monotone = widths.len() == 5 && widths.windows(2).all(|w| w[0] <= w[1]);
    lines.push(format!("sources(a..e) pre-MLP widths {widths:?}"));
    outcome(ok && monotone, lines.join("; "))
}

fn determinism() -> Outcome {
    let cfg = PipelineConfig::default();
    let record = || {
        let scene = generate_scene(&cfg.scene, cfg.seed).unwrap();
        run_pipeline(&cfg, &scene).unwrap().record.to_json().unwrap()
    };
    let (a, b) = (record(), record());
    outcome(a == b, format!("{} vs {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("geometry round trip", round_trip),
        ("fps / ball query oracles", oracle_equivalence),
        ("voxel count conservation", conservation),
        ("gradient suite", gradients),
        ("gate contract", gate_contract),
        ("loss composition", composition),
        ("pseudo-point fidelity", fidelity),
        ("end-to-end overfit", overfit),
        ("ablation wiring", ablation_matrix),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag} {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
