use super::{Graph, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// numerically zero are compared on an absolute scale.
    pub floor: f64,
    /// Upper bound on checked elements per input; larger inputs are
    /// probed at evenly spaced positions.
    pub max_per_input: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_per_input: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn probe_positions(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut out: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    out.dedup();
    out
}

/// Compares tape gradients of the scalar built by `f` against central
/// finite differences over every input element.
///
/// `f` receives the inputs as graph leaves and must return a
/// single-element node. The numeric side only ever evaluates `f`
/// forward, so it shares no code with the backward sweep.
pub fn check_gradients<F>(inputs: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("inputs are trainable").clone();
        for e in probe_positions(inputs[i].numel(), opts.max_per_input) {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = check_gradients(&[x], GradCheckOptions::default(), |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn probe_positions_are_capped() {
        assert_eq!(probe_positions(4, 10), vec![0, 1, 2, 3]);
        assert_eq!(probe_positions(100, 4), vec![0, 25, 50, 75]);
    }
}
