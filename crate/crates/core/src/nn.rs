//! Named parameter storage and the small set of layers the network uses.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learned tensors keyed by module path (`"pst.path1.aec.weight"`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.params.contains_key(&name), "duplicate parameter {name}");
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Seeded parameter initializer.
pub struct Initializer<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Initializer<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect();
        Tensor::new(shape, data)
    }

    /// Variance-preserving uniform init (`var = 1 / fan_in`).
    pub fn conv(&mut self, name: &str, out_c: usize, in_c: usize, kh: usize, kw: usize) {
        let bound = (3.0 / (in_c * kh * kw) as f64).sqrt();
        let w = self.uniform(&[out_c, in_c, kh, kw], bound);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[out_c]));
    }

    pub fn linear(&mut self, name: &str, out_d: usize, in_d: usize) {
        let bound = (3.0 / in_d as f64).sqrt();
        let w = self.uniform(&[out_d, in_d], bound);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[out_d]));
    }

    /// Affine normalization parameters (`gamma = 1`, `beta = 0`).
    pub fn norm(&mut self, name: &str, dim: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
    }

    /// Free tensor drawn uniformly from `[-scale, scale]`.
    pub fn embedding(&mut self, name: &str, shape: &[usize], scale: f64) {
        let t = self.uniform(shape, scale);
        self.store.insert(name.to_string(), t);
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) {
        *self.store.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")) = value;
    }
}

/// A forward pass in progress: a fresh tape plus lazily bound parameters.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { graph: Graph::new(), store, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Binds (once) and returns the parameter `name`.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self.store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        let v = self.graph.param(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.graph.conv2d(x, w, Some(b), stride, pad)
    }

    /// Stride-1 convolution with "same" padding for odd kernels.
    pub fn conv_same(&mut self, name: &str, x: Var) -> Var {
        let k = self.store.get(&format!("{name}.weight")).expect("conv weight").shape()[2];
        self.conv(name, x, (1, 1), (k / 2, k / 2))
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.graph.linear(x, w, Some(b))
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Var {
        let g = self.p(&format!("{name}.gamma"));
        let b = self.p(&format!("{name}.beta"));
        self.graph.layer_norm(x, g, b)
    }

    pub fn group_norm(&mut self, name: &str, x: Var, groups: usize) -> Var {
        let g = self.p(&format!("{name}.gamma"));
        let b = self.p(&format!("{name}.beta"));
        self.graph.group_norm(x, g, b, groups)
    }

    /// Backward from `root`, returning gradients of every bound parameter.
    /// Parameters the root does not depend on get zero gradients.
    pub fn param_grads(&self, root: Var) -> BTreeMap<String, Tensor<T>> {
        let mut grads = self.graph.backward(root);
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    /// Names of parameters bound so far.
    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}

/// Largest group count `<= 8` dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}
