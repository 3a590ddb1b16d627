//! Detection losses and the weighted total with auxiliary supervision.
//!
//! Scalar versions operate on plain slices; the `*_graph` versions build
//! the same expressions on a [`Graph`] for training.

use serde::Serialize;

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_DELTA: f64 = 1.0;

/// Mean Huber penalty of `pred − target`: `0.5·e²/δ` when `|e| < δ`,
/// `|e| − 0.5·δ` otherwise. Empty input gives 0.
pub fn smooth_l1(pred: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "smooth_l1: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("smooth_l1 delta must be > 0, got {delta}")));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e < delta {
                0.5 * e * e / delta
            } else {
                e - 0.5 * delta
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// `softplus(x) − y·x`.
pub fn bce(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "bce: {} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    check_labels(labels)?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| x.max(0.0) + (-x.abs()).exp().ln_1p() - y * x)
        .sum();
    Ok(sum / logits.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_rpn: f64,
    pub l_ref: f64,
    pub l_depth: f64,
    pub l_as1: f64,
    pub l_as2: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_rpn: f64,
    pub l_ref: f64,
    pub l_depth: f64,
    pub l_as1: f64,
    pub l_as2: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_rpn,l_ref,l_depth,l_as1,l_as2,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.l_rpn, self.l_ref, self.l_depth, self.l_as1, self.l_as2, self.total
        )
    }
}

/// `total = l_rpn + l_ref + l_depth + α·l_as1 + β·l_as2`, summed left to
/// right.
pub fn compose_total(parts: LossParts, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    let all = [parts.l_rpn, parts.l_ref, parts.l_depth, parts.l_as1, parts.l_as2, alpha, beta];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss component or weight".into()));
    }
    if all.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("loss components and weights must be ≥ 0".into()));
    }
    let total = parts.l_rpn + parts.l_ref + parts.l_depth + alpha * parts.l_as1 + beta * parts.l_as2;
    Ok(LossBreakdown {
        l_rpn: parts.l_rpn,
        l_ref: parts.l_ref,
        l_depth: parts.l_depth,
        l_as1: parts.l_as1,
        l_as2: parts.l_as2,
        total,
        alpha,
        beta,
    })
}

/// Graph form of [`smooth_l1`] against a constant target.
pub fn smooth_l1_graph(g: &mut Graph, pred: Var, target: &Tensor, delta: f64) -> Result<Var> {
    if g.value(pred).shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "smooth_l1: {:?} vs {:?}",
            g.value(pred).shape(),
            target.shape()
        )));
    }
    let t = g.constant(target.clone());
    let e = g.sub(pred, t)?;
    let h = g.huber(e, delta)?;
    Ok(g.mean(h))
}

/// Graph form of [`bce`] against constant labels.
pub fn bce_graph(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<Var> {
    if g.value(logits).shape() != labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "bce: {:?} vs {:?}",
            g.value(logits).shape(),
            labels.shape()
        )));
    }
    check_labels(labels.data())?;
    let sp = g.softplus(logits);
    let yx = g.mul_const(logits, labels)?;
    let per = g.sub(sp, yx)?;
    Ok(g.mean(per))
}

/// Graph handles of the five loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_rpn: Var,
    pub l_ref: Var,
    pub l_depth: Var,
    pub l_as1: Var,
    pub l_as2: Var,
}

/// Graph form of [`compose_total`], same summation order.
pub fn compose_total_graph(g: &mut Graph, parts: LossVars, alpha: f64, beta: f64) -> Result<Var> {
    let a1 = g.scale(parts.l_as1, alpha);
    let b2 = g.scale(parts.l_as2, beta);
    let mut total = g.add(parts.l_rpn, parts.l_ref)?;
    total = g.add(total, parts.l_depth)?;
    total = g.add(total, a1)?;
    g.add(total, b2)
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> Result<LossParts> {
        Ok(LossParts {
            l_rpn: g.value(self.l_rpn).item()?,
            l_ref: g.value(self.l_ref).item()?,
            l_depth: g.value(self.l_depth).item()?,
            l_as1: g.value(self.l_as1).item()?,
            l_as2: g.value(self.l_as2).item()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[1.0], &[0.0], 1.0).unwrap(), 0.5);
        assert_eq!(smooth_l1(&[3.0], &[0.0], 1.0).unwrap(), 2.5);
        assert!(smooth_l1(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((bce(&[0.0], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(&[30.0], &[1.0]).unwrap() < 1e-12);
        assert!((bce(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(&[1e4, -1e4], &[0.0, 1.0]).unwrap().is_finite());
        assert!(bce(&[0.0], &[0.5]).is_err());
    }

    #[test]
    fn compose_examples() {
        let ones = LossParts {
            l_rpn: 1.0,
            l_ref: 1.0,
            l_depth: 1.0,
            l_as1: 1.0,
            l_as2: 1.0,
        };
        assert_eq!(compose_total(ones, 0.5, 0.5).unwrap().total, 4.0);
        assert_eq!(compose_total(LossParts::default(), 0.5, 0.5).unwrap().total, 0.0);
        let mixed = LossParts {
            l_rpn: 0.2,
            l_ref: 0.3,
            l_depth: 0.0,
            l_as1: 0.4,
            l_as2: 0.6,
        };
        assert!((compose_total(mixed, 0.5, 0.5).unwrap().total - 1.0).abs() < 1e-15);
        let neg = LossParts { l_rpn: -0.1, ..mixed };
        assert!(matches!(compose_total(neg, 0.5, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn graph_forms_match_scalar_forms() {
        let pred = vec![0.3, -2.0, 1.5, 0.0];
        let target = vec![0.0, 0.5, 1.4, -3.0];
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(pred.clone()));
        let l = smooth_l1_graph(&mut g, p, &Tensor::vector(target.clone()), 1.0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), smooth_l1(&pred, &target, 1.0).unwrap());

        let labels = vec![1.0, 0.0, 1.0, 0.0];
        let b = bce_graph(&mut g, p, &Tensor::vector(labels.clone())).unwrap();
        let expect = bce(&pred, &labels).unwrap();
        assert!((g.value(b).item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn graph_total_is_bit_identical() {
        let parts = LossParts {
            l_rpn: 0.123,
            l_ref: 0.456,
            l_depth: 0.0,
            l_as1: 0.789,
            l_as2: 0.321,
        };
        let mut g = Graph::new();
        let vars = LossVars {
            l_rpn: g.constant(Tensor::scalar(parts.l_rpn)),
            l_ref: g.constant(Tensor::scalar(parts.l_ref)),
            l_depth: g.constant(Tensor::scalar(parts.l_depth)),
            l_as1: g.constant(Tensor::scalar(parts.l_as1)),
            l_as2: g.constant(Tensor::scalar(parts.l_as2)),
        };
        let t = compose_total_graph(&mut g, vars, 0.5, 0.5).unwrap();
        let expect = compose_total(parts, 0.5, 0.5).unwrap().total;
        assert_eq!(g.value(t).item().unwrap().to_bits(), expect.to_bits());
    }
}
