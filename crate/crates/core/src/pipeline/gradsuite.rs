//! Finite-difference checks of every differentiable graph operation, of
//! the fusion + refinement path, and of the whole detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::caaf::{caaf_fuse_graph, HEAD_OUTPUTS, RESIDUALS};
use crate::config::PipelineConfig;
use crate::error::StageContext;
use crate::loss::{bce_graph, smooth_l1_graph};
use crate::scene::SyntheticScene;
use crate::tensor::{check_gradients, Bound, GradCheckOptions, GradCheckReport, Graph, LinearLayer, Mlp, ParamStore, PoolMode, Tensor, Var};
use crate::{Error, Result, Stage, StageError};

use super::forward::forward;
use super::model::Model;
use super::run::TrainingSetup;

/// Worst relative error of one operation over all random draws.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub draws: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A random draw: inputs and the scalar function to differentiate.
type Case = (Vec<Tensor>, Builder);

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values with magnitude in [0.1, 1.5], away from the kinks at zero.
fn away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.5);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `out` to a scalar with fixed random weights.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let m = g.mul_const(out, w)?;
    Ok(g.sum(m))
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    let w = uniform(rng, x.shape(), -1.0, 1.0);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = op(g, v[0])?;
            weighted(g, y, &w)
        }),
    )
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    let a = away(rng, &[3, 4]);
    let b = away(rng, &[3, 4]);
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    (
        vec![a, b],
        Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted(g, y, &w)
        }),
    )
}

fn pool_case(rng: &mut ChaCha8Rng, mode: PoolMode, axis: usize) -> Case {
    let x = away(rng, &[4, 5]);
    let w = uniform(rng, &[if axis == 0 { 5 } else { 4 }], -1.0, 1.0);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = g.pool(v[0], mode, axis)?;
            weighted(g, y, &w)
        }),
    )
}

fn segment_case(rng: &mut ChaCha8Rng, mode: PoolMode) -> Case {
    let x = away(rng, &[5, 3]);
    let groups = vec![vec![0, 2, 4], vec![], vec![1], vec![3, 1]];
    let w = uniform(rng, &[4, 3], -1.0, 1.0);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = g.segment_pool(v[0], &groups, mode)?;
            weighted(g, y, &w)
        }),
    )
}

/// Fusion gate, refinement MLP and head loss on random features.
fn fusion_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, d, hidden) = (3, 4, 6);
    let inputs = vec![
        away(rng, &[n, d]),
        away(rng, &[n, d]),
        uniform(rng, &[2 * d, 2 * d], -0.7, 0.7),
        uniform(rng, &[2 * d], -0.5, 0.5),
        uniform(rng, &[hidden, 2 * d], -0.7, 0.7),
        uniform(rng, &[hidden], -0.5, 0.5),
        uniform(rng, &[HEAD_OUTPUTS, hidden], -0.7, 0.7),
        uniform(rng, &[HEAD_OUTPUTS], -0.5, 0.5),
    ];
    let mut store = ParamStore::new();
    let fc = LinearLayer::from_parts(&mut store, "fc", inputs[2].clone(), inputs[3].clone()).expect("shapes");
    let h0 = LinearLayer::from_parts(&mut store, "h0", inputs[4].clone(), inputs[5].clone()).expect("shapes");
    let h1 = LinearLayer::from_parts(&mut store, "h1", inputs[6].clone(), inputs[7].clone()).expect("shapes");
    let head = Mlp::from_layers(vec![h0, h1]).expect("chain");
    let labels = Tensor::new(vec![n, 1], (0..n).map(|i| (i % 2) as f64).collect()).expect("sized");
    let targets = uniform(rng, &[n, RESIDUALS], -1.0, 1.0);
    (
        inputs,
        Box::new(move |g, v| {
            let bound = Bound::from_vars(v[2..].to_vec());
            let fused = caaf_fuse_graph(g, &bound, &fc, v[0], v[1])?;
            let out = head.forward(g, &bound, fused.fused)?;
            let logits = g.slice_cols(out, RESIDUALS, 1)?;
            let res = g.slice_cols(out, 0, RESIDUALS)?;
            let cls = bce_graph(g, logits, &labels)?;
            let reg = smooth_l1_graph(g, res, &targets, 1.0)?;
            g.add(cls, reg)
        }),
    )
}

fn cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> Case)> {
    vec![
        ("add", |r| binary(r, |g, a, b| g.add(a, b))),
        ("sub", |r| binary(r, |g, a, b| g.sub(a, b))),
        ("mul", |r| binary(r, |g, a, b| g.mul(a, b))),
        ("scale", |r| {
            let x = away(r, &[2, 3]);
            unary(r, x, |g, v| Ok(g.scale(v, -1.7)))
        }),
        ("mul_const", |r| {
            let x = away(r, &[2, 3]);
            let c = uniform(r, &[2, 3], -2.0, 2.0);
            let w = uniform(r, &[2, 3], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = g.mul_const(v[0], &c)?;
                    weighted(g, y, &w)
                }),
            )
        }),
        ("linear", |r| {
            let inputs = vec![away(r, &[4, 3]), away(r, &[5, 3]), away(r, &[5])];
            let w = uniform(r, &[4, 5], -1.0, 1.0);
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    weighted(g, y, &w)
                }),
            )
        }),
        ("relu", |r| {
            let x = away(r, &[3, 4]);
            unary(r, x, |g, v| Ok(g.relu(v)))
        }),
        ("sigmoid", |r| {
            let x = uniform(r, &[3, 4], -4.0, 4.0);
            unary(r, x, |g, v| Ok(g.sigmoid(v)))
        }),
        ("softplus", |r| {
            let x = uniform(r, &[3, 4], -4.0, 4.0);
            unary(r, x, |g, v| Ok(g.softplus(v)))
        }),
        ("exp", |r| {
            let x = uniform(r, &[3, 4], -2.0, 2.0);
            unary(r, x, |g, v| Ok(g.exp(v)))
        }),
        ("huber", |r| {
            let mut x = uniform(r, &[3, 4], -3.0, 3.0);
            for v in x.data_mut() {
                // keep clear of the |e| = δ seam
                if (v.abs() - 1.0).abs() < 0.05 {
                    *v *= 1.2;
                }
            }
            unary(r, x, |g, v| g.huber(v, 1.0))
        }),
        ("concat_rows", |r| {
            let inputs = vec![away(r, &[2, 3]), away(r, &[1, 3])];
            let w = uniform(r, &[3, 3], -1.0, 1.0);
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.concat(&[v[0], v[1]], 0)?;
                    weighted(g, y, &w)
                }),
            )
        }),
        ("concat_cols", |r| {
            let inputs = vec![away(r, &[2, 3]), away(r, &[2, 2])];
            let w = uniform(r, &[2, 5], -1.0, 1.0);
            (
                inputs,
                Box::new(move |g, v| {
                    let y = g.concat(&[v[0], v[1]], 1)?;
                    weighted(g, y, &w)
                }),
            )
        }),
        ("slice_cols", |r| {
            let x = away(r, &[3, 5]);
            let w = uniform(r, &[3, 2], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = g.slice_cols(v[0], 2, 2)?;
                    weighted(g, y, &w)
                }),
            )
        }),
        ("pool_max_rows", |r| pool_case(r, PoolMode::Max, 0)),
        ("pool_max_cols", |r| pool_case(r, PoolMode::Max, 1)),
        ("pool_avg_rows", |r| pool_case(r, PoolMode::Avg, 0)),
        ("pool_avg_cols", |r| pool_case(r, PoolMode::Avg, 1)),
        ("segment_pool_max", |r| segment_case(r, PoolMode::Max)),
        ("segment_pool_avg", |r| segment_case(r, PoolMode::Avg)),
        ("gather_rows", |r| {
            let x = away(r, &[4, 3]);
            let w = uniform(r, &[5, 3], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = g.gather_rows(v[0], &[3, 0, 3, 1, 2])?;
                    weighted(g, y, &w)
                }),
            )
        }),
        ("scatter_rows", |r| {
            let x = away(r, &[3, 2]);
            let w = uniform(r, &[4, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = g.scatter_rows(v[0], &[(0, 2), (3, 0), (0, 0)], 4, 4)?;
                    weighted(g, y, &w)
                }),
            )
        }),
        ("sum", |r| (vec![away(r, &[3, 3])], Box::new(|g, v| Ok(g.sum(v[0]))))),
        ("mean", |r| (vec![away(r, &[3, 3])], Box::new(|g, v| Ok(g.mean(v[0]))))),
        ("bce", |r| {
            let x = uniform(r, &[6], -5.0, 5.0);
            let y = Tensor::vector((0..6).map(|i| (i % 2) as f64).collect());
            (vec![x], Box::new(move |g, v| bce_graph(g, v[0], &y)))
        }),
        ("smooth_l1", |r| {
            let x = uniform(r, &[6], -3.0, 3.0);
            let mut t = uniform(r, &[6], -3.0, 3.0);
            for (tv, xv) in t.data_mut().iter_mut().zip(x.data()) {
                if ((xv - *tv).abs() - 1.0).abs() < 0.05 {
                    *tv += 0.2;
                }
            }
            (vec![x], Box::new(move |g, v| smooth_l1_graph(g, v[0], &t, 1.0)))
        }),
        ("fusion_refine", fusion_case),
    ]
}

/// Checks every operation over `draws` random draws each.
pub fn gradient_suite(draws: usize, seed: u64) -> Result<Vec<OpCheck>> {
    if draws == 0 {
        return Err(Error::Domain("gradient suite needs at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, make) in cases() {
        let mut check = OpCheck {
            name: name.to_string(),
            draws,
            checked: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..draws {
            let (inputs, f) = make(&mut rng);
            let r = check_gradients(&inputs, GradCheckOptions::default(), f)?;
            check.checked += r.checked;
            check.max_rel_error = check.max_rel_error.max(r.max_rel_error);
        }
        out.push(check);
    }
    Ok(out)
}

/// Finite-difference check of the full detector loss with respect to
/// every parameter tensor, probing at most `max_per_param` elements of
/// each.
pub fn model_gradient_check(
    cfg: &PipelineConfig,
    scene: &SyntheticScene,
    max_per_param: usize,
) -> Result<GradCheckReport, StageError> {
    let model = Model::new(cfg).stage(Stage::Config)?;
    let setup = TrainingSetup::new(cfg, scene, &model)?
        .ok_or_else(|| Error::Domain("no raw point inside the voxel range".into()))
        .stage(Stage::Voxelize)?;
    let inputs: Vec<Tensor> = model.store.iter().map(|(_, _, t)| t.clone()).collect();
    let opts = GradCheckOptions {
        max_per_input: max_per_param,
        ..GradCheckOptions::default()
    };
    check_gradients(&inputs, opts, |g, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        forward(g, &bound, &model, &setup.prep, &setup.anchors, &setup.rois, cfg)
            .map(|v| v.total)
            .map_err(|e| e.source)
    })
    .stage(Stage::Backward)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_draws() {
        for c in gradient_suite(3, 1).unwrap() {
            assert!(c.passes(1e-4), "{c:?}");
            assert!(c.checked > 0);
        }
    }
}
