use rand::Rng;

use super::{Gradients, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, e.g. the inputs of a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Plain gradient descent: `p ← p − lr·∂L/∂p`.
    pub fn sgd_step(&mut self, bound: &Bound, grads: &Gradients, lr: f64) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                for (p, d) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * d;
                }
            }
        }
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Adam optimizer state, one moment pair per parameter element.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, t) in store.tensors.iter_mut().enumerate() {
            let Some(g) = grads.get(bound.vars[i]) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (p, d)) in t.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * d;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * d * d;
                *p -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl LinearLayer {
    /// Weights and bias drawn uniformly from `[−1/√in, 1/√in]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "layer `{name}` needs positive widths, got {in_dim}→{out_dim}"
            )));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let weight = Tensor::new(vec![out_dim, in_dim], draw(out_dim * in_dim))?;
        let bias = Tensor::vector(draw(out_dim));
        Self::from_parts(store, name, weight, bias)
    }

    pub fn from_parts(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || bias.shape()[0] != weight.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "layer `{name}`: weight {:?}, bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(format!("{name}.weight"), weight)?;
        let bias = store.add(format!("{name}.bias"), bias)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Self::from_parts(store, name, Tensor::eye(dim), Tensor::zeros(vec![dim]))
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        g.linear(x, bound.var(self.weight), bound.var(self.bias))
    }
}

/// Linear layers with ReLU between them and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "mlp `{name}` needs at least input and output widths"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "mlp layer widths {} → {} do not chain",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, bound, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_linear(weight: Tensor, bias: Tensor, x: Tensor) -> Tensor {
        let mut store = ParamStore::new();
        let layer = LinearLayer::from_parts(&mut store, "l", weight, bias).unwrap();
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let y = layer.forward(&mut g, &bound, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let x = Tensor::from_rows(&[vec![1.5, -2.0, 0.25]], 3).unwrap();
        let y = run_linear(Tensor::eye(3), Tensor::zeros(vec![3]), x.clone());
        assert_eq!(y, x);
    }

    #[test]
    fn constant_layer_emits_bias() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 4.0]], 2).unwrap();
        let c = vec![0.5, -1.0, 2.0];
        let y = run_linear(Tensor::zeros(vec![3, 2]), Tensor::vector(c.clone()), x);
        assert_eq!(y.row(0), c.as_slice());
        assert_eq!(y.row(1), c.as_slice());
    }

    #[test]
    fn hand_matrix_multiply() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]], 2).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]], 2).unwrap();
        let y = run_linear(w, Tensor::zeros(vec![2]), x);
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn init_stays_inside_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = LinearLayer::new(&mut store, "l", 16, 4, &mut rng).unwrap();
        let bound = 0.25;
        assert!(store.get(layer.weight).data().iter().all(|w| w.abs() <= bound));
        assert!(store.get(layer.bias).data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn mlp_rejects_unchained_layers() {
        let mut store = ParamStore::new();
        let a = LinearLayer::identity(&mut store, "a", 3).unwrap();
        let b = LinearLayer::identity(&mut store, "b", 2).unwrap();
        assert!(Mlp::from_layers(vec![a, b]).is_err());
        assert!(store.add("a.weight", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0, -1.0])).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let y = g.sum(bound.var(id));
        let grads = g.backward(y).unwrap();
        store.sgd_step(&bound, &grads, 0.5);
        assert_eq!(store.get(id).data(), &[0.5, -1.5]);
    }
}
