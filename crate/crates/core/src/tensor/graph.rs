use super::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

const NO_SOURCE: usize = usize::MAX;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Huber(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    /// Reduction along one axis. `sources[i]` is the input element that
    /// produced output `i` (max mode only).
    Pool {
        x: Var,
        axis: usize,
        mode: PoolMode,
        sources: Vec<usize>,
    },
    /// Row-group reduction of a matrix; empty groups produce zero rows.
    SegmentPool {
        x: Var,
        groups: Vec<Vec<usize>>,
        mode: PoolMode,
        sources: Vec<usize>,
    },
    /// Copies input rows into `(row, column offset)` slots of a larger
    /// zero-initialised matrix.
    ScatterRows { x: Var, dest: Vec<(usize, usize)> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a reverse scan.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Graph::backward`], one per `requires_grad` node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward output with respect to `v`. Nodes created
    /// without `requires_grad` have none; leaves that did not contribute
    /// to the output get a zero tensor.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::ShapeMismatch(msg))
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn huber_scalar(e: f64, delta: f64) -> f64 {
    if e.abs() < delta {
        0.5 * e * e / delta
    } else {
        e.abs() - 0.5 * delta
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data.iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return shape_err(format!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if src.shape != c.shape {
            return shape_err(format!("mul_const: {:?} vs {:?}", src.shape, c.shape));
        }
        let data = src.data.iter().zip(&c.data).map(|(a, b)| a * b).collect();
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MulConst(x, c.data.clone()), rg))
    }

    /// `y = x·Wᵀ + b` for `x: n×in`, `W: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if xv.ndim() != 2 || wv.ndim() != 2 || bv.ndim() != 1 {
            return shape_err(format!(
                "linear expects 2-D input/weight and 1-D bias, got {:?}, {:?}, {:?}",
                xv.shape, wv.shape, bv.shape
            ));
        }
        let (n, k) = (xv.shape[0], xv.shape[1]);
        let (m, kw) = (wv.shape[0], wv.shape[1]);
        if k != kw || bv.shape[0] != m {
            return shape_err(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape, wv.shape, bv.shape
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = &xv.data[i * k..(i + 1) * k];
            for j in 0..m {
                let wr = &wv.data[j * k..(j + 1) * k];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                out[i * m + j] = dot + bv.data[j];
            }
        }
        let value = Tensor {
            shape: vec![n, m],
            data: out,
        };
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus_scalar)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Elementwise Huber penalty: quadratic below `delta`, linear above.
    pub fn huber(&mut self, x: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 || !delta.is_finite() {
            return Err(Error::Domain(format!("huber delta must be > 0, got {delta}")));
        }
        Ok(self.unary(x, Op::Huber(x, delta), |e| huber_scalar(e, delta)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.nodes[p.0].value.shape.clone(),
            None => return shape_err("concat of zero tensors".into()),
        };
        if axis >= first.len() {
            return Err(Error::Domain(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].value.shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat along axis {axis}: {first:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.ndim() != 2 || start + len > v.shape[1] {
            return shape_err(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                v.shape
            ));
        }
        let (n, c) = (v.shape[0], v.shape[1]);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&v.data[r * c + start..r * c + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![n, len],
                data,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Max or mean along `axis`; the axis is removed from the shape.
    pub fn pool(&mut self, x: Var, mode: PoolMode, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if axis >= v.ndim() {
            return Err(Error::Domain(format!(
                "pool axis {axis} out of range for rank {}",
                v.ndim()
            )));
        }
        let (outer, len, inner) = split_axis(&v.shape, axis);
        if len == 0 {
            return shape_err("pool over an empty axis".into());
        }
        let mut data = vec![0.0; outer * inner];
        let mut sources = Vec::new();
        if mode == PoolMode::Max {
            sources = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let out = o * inner + i;
                match mode {
                    PoolMode::Max => {
                        let mut best = at(0);
                        for k in 1..len {
                            if v.data[at(k)] > v.data[best] {
                                best = at(k);
                            }
                        }
                        data[out] = v.data[best];
                        sources[out] = best;
                    }
                    PoolMode::Avg => {
                        data[out] = (0..len).map(|k| v.data[at(k)]).sum::<f64>() / len as f64;
                    }
                }
            }
        }
        let mut shape = v.shape.clone();
        shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Pool {
                x,
                axis,
                mode,
                sources,
            },
            rg,
        ))
    }

    /// Pools the rows of matrix `x` listed in each group into one output
    /// row per group. Empty groups yield zero rows.
    pub fn segment_pool(&mut self, x: Var, groups: &[Vec<usize>], mode: PoolMode) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.ndim() != 2 {
            return shape_err(format!("segment_pool expects a matrix, got {:?}", v.shape));
        }
        let (n, c) = (v.shape[0], v.shape[1]);
        let mut data = vec![0.0; groups.len() * c];
        let mut sources = Vec::new();
        if mode == PoolMode::Max {
            sources = vec![NO_SOURCE; groups.len() * c];
        }
        for (gi, members) in groups.iter().enumerate() {
            if let Some(&bad) = members.iter().find(|&&r| r >= n) {
                return shape_err(format!("segment_pool row {bad} out of range for {n} rows"));
            }
            if members.is_empty() {
                continue;
            }
            for col in 0..c {
                let out = gi * c + col;
                match mode {
                    PoolMode::Max => {
                        let mut best = members[0] * c + col;
                        for &r in &members[1..] {
                            if v.data[r * c + col] > v.data[best] {
                                best = r * c + col;
                            }
                        }
                        data[out] = v.data[best];
                        sources[out] = best;
                    }
                    PoolMode::Avg => {
                        let s: f64 = members.iter().map(|&r| v.data[r * c + col]).sum();
                        data[out] = s / members.len() as f64;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![groups.len(), c],
                data,
            },
            Op::SegmentPool {
                x,
                groups: groups.to_vec(),
                mode,
                sources,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let groups: Vec<Vec<usize>> = rows.iter().map(|&r| vec![r]).collect();
        self.segment_pool(x, &groups, PoolMode::Avg)
    }

    /// Places row `i` of `x` at `dest[i] = (row, col_offset)` of an
    /// `out_rows × out_cols` zero matrix. Destinations must not overlap.
    pub fn scatter_rows(
        &mut self,
        x: Var,
        dest: &[(usize, usize)],
        out_rows: usize,
        out_cols: usize,
    ) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.ndim() != 2 || v.shape[0] != dest.len() {
            return shape_err(format!(
                "scatter_rows: {:?} with {} destinations",
                v.shape,
                dest.len()
            ));
        }
        let c = v.shape[1];
        let mut data = vec![0.0; out_rows * out_cols];
        for (i, &(r, off)) in dest.iter().enumerate() {
            if r >= out_rows || off + c > out_cols {
                return shape_err(format!(
                    "scatter_rows destination ({r}, {off}) outside {out_rows}×{out_cols}"
                ));
            }
            data[r * out_cols + off..r * out_cols + off + c]
                .copy_from_slice(&v.data[i * c..(i + 1) * c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![out_rows, out_cols],
                data,
            },
            Op::ScatterRows {
                x,
                dest: dest.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = if v.data.is_empty() {
            0.0
        } else {
            v.data.iter().sum::<f64>() / v.data.len() as f64
        };
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse-mode sweep from a single-element output.
    ///
    /// A tape can be swept once; build a new graph for the next step.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "output must be scalar, got shape {:?}",
                out.value.shape
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| vec![0.0; n.value.numel()]))
            .collect();
        if let Some(g) = grads[output.0].as_mut() {
            g[0] = 1.0;
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|data| Tensor {
                    shape: n.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value.data;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if let Some(buf) = grads[v.0].as_mut() {
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * s));
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * c[i];
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[x.0].value.shape;
                let (n, k) = (xs[0], xs[1]);
                let m = self.nodes[w.0].value.shape[0];
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                gx[i * k + t] += gij * wv[j * k + t];
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                gw[j * k + t] += gij * xv[i * k + t];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += g[i * m + j];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sigmoid_scalar(xv[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value.data;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i];
                    }
                });
            }
            Op::Huber(x, delta) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let e = xv[i];
                        let d = if e.abs() < *delta { e / delta } else { e.signum() };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape[*axis];
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gp[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.shape[1];
                let (n, len) = (node.value.shape[0], node.value.shape[1]);
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        for t in 0..len {
                            gx[r * c + start + t] += g[r * len + t];
                        }
                    }
                });
            }
            Op::Pool {
                x,
                axis,
                mode,
                sources,
            } => {
                let (outer, len, inner) = split_axis(&self.nodes[x.0].value.shape, *axis);
                acc(*x, &mut |gx| match mode {
                    PoolMode::Max => {
                        for (o, &s) in sources.iter().enumerate() {
                            gx[s] += g[o];
                        }
                    }
                    PoolMode::Avg => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let share = g[o * inner + i] / len as f64;
                                for k in 0..len {
                                    gx[o * len * inner + k * inner + i] += share;
                                }
                            }
                        }
                    }
                });
            }
            Op::SegmentPool {
                x,
                groups,
                mode,
                sources,
            } => {
                let c = node.value.shape[1];
                acc(*x, &mut |gx| match mode {
                    PoolMode::Max => {
                        for (o, &s) in sources.iter().enumerate() {
                            if s != NO_SOURCE {
                                gx[s] += g[o];
                            }
                        }
                    }
                    PoolMode::Avg => {
                        for (gi, members) in groups.iter().enumerate() {
                            if members.is_empty() {
                                continue;
                            }
                            let inv = 1.0 / members.len() as f64;
                            for &r in members {
                                for col in 0..c {
                                    gx[r * c + col] += g[gi * c + col] * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::ScatterRows { x, dest } => {
                let out_cols = node.value.shape[1];
                let c = self.nodes[x.0].value.shape[1];
                acc(*x, &mut |gx| {
                    for (i, &(r, off)) in dest.iter().enumerate() {
                        for t in 0..c {
                            gx[i * c + t] += g[r * out_cols + off + t];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                acc(*x, &mut |gx| {
                    let n = gx.len().max(1) as f64;
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                });
            }
        }
    }
}
