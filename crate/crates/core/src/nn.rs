//! Parameter containers and the dense building blocks shared by every network.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Ordered, named parameter arrays of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every array as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Register every array as a constant (frozen network).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.input(t.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Replace arrays by name from `(name, tensor)` pairs, checking shapes.
    pub fn load_from<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| Error::Format(format!("missing array {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "array {name}: stored {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Parameters plus their optimizer state.
#[derive(Clone, Debug)]
pub struct Trainable {
    pub params: ParamSet,
    pub opt: Adam,
}

impl Trainable {
    pub fn step(&mut self, grads: &[Tensor]) -> Result<()> {
        self.opt.step(self.params.tensors_mut(), grads)
    }
}

/// Dense network `in -> hidden... -> out` with SiLU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    pub params: ParamSet,
}

impl Mlp {
    /// He-style normal init for hidden layers; the output layer is scaled by
    /// `out_scale` (0 gives a zero-initialized head).
    pub fn new(prefix: &str, dims: &[usize], out_scale: f64, rng: &RngStream) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let mut params = ParamSet::new();
        let layers = dims.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = if l + 1 == layers { out_scale / (fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            let w = rng.child(l as u64).normal(&[fan_in, fan_out]).map(|v| v * std);
            params.push(format!("{prefix}.l{l}.w"), w);
            params.push(format!("{prefix}.l{l}.b"), Tensor::zeros(&[fan_out]));
        }
        Mlp { dims: dims.to_vec(), params }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.params.tensors()[2 * layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.params.tensors_mut()[2 * layer]
    }

    /// Forward pass with parameters already bound into `g` (see [`ParamSet::bind`]).
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.num_layers() {
            h = g.affine(h, vars[2 * l], vars[2 * l + 1])?;
            if l + 1 < self.num_layers() {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Plain forward without a graph.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let xi = g.input(x.clone());
        let out = self.forward(&mut g, &vars, xi)?;
        Ok(g.value(out).clone())
    }
}

/// Sinusoidal features of `t / t_max`, `dim` columns per row.
pub fn time_embedding(ts: &[usize], t_max: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let u = t as f64 / t_max as f64;
        for i in 0..half {
            let freq = std::f64::consts::PI * (1u64 << i.min(20)) as f64 / 2.0;
            data.push((u * freq).sin());
        }
        for i in 0..half {
            let freq = std::f64::consts::PI * (1u64 << i.min(20)) as f64 / 2.0;
            data.push((u * freq).cos());
        }
        for _ in 2 * half..dim {
            data.push(u);
        }
    }
    Tensor::from_raw(vec![ts.len(), dim], data)
}

/// Largest singular value by power iteration on `W^T W`.
pub fn operator_norm(w: &Tensor, iters: usize, tol: f64) -> f64 {
    let (m, n) = (w.rows(), w.cols());
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mut u = vec![0.0; m];
        for i in 0..m {
            u[i] = w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut next = vec![0.0; n];
        for i in 0..m {
            for (nv, a) in next.iter_mut().zip(w.row(i)) {
                *nv += a * u[i];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let s = norm.sqrt();
        v = next;
        if (s - sigma).abs() <= tol * s.max(1e-300) {
            sigma = s;
            break;
        }
        sigma = s;
    }
    // ||W v|| for the final unit vector
    let mut wv = 0.0;
    for i in 0..m {
        let r: f64 = w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        wv += r * r;
    }
    sigma.max(wv.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embedding_shape_and_range() {
        let e = time_embedding(&[0, 32, 64], 64, 32);
        assert_eq!(e.shape(), &[3, 32]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.row(0), e.row(2));
    }

    #[test]
    fn operator_norm_of_diagonal() {
        let w = Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((operator_norm(&w, 100, 1e-12) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mlp = Mlp::new("t", &[4, 8, 3], 0.0, &RngStream::new(1));
        let out = mlp.eval(&Tensor::matrix(2, 4, vec![1.0; 8]).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
