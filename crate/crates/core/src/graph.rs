//! A small reverse-mode automatic differentiation tape.
//!
//! Every forward op appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products.
//! Only nodes that (transitively) depend on a parameter receive gradients.

use crate::bins;
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeometry, Tensor};
use crate::types::DepthRange;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry, out_c: usize },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, s: T },
    Silu { a: Var },
    Gelu { a: Var },
    Relu { a: Var },
    Softmax { a: Var, outer: usize, axis: usize, inner: usize },
    LayerNorm { a: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    GroupNorm { a: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Resize { a: Var, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize, len: usize },
    SliceCols { a: Var, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    NormalizeWidths { a: Var, tau: T },
    BinCenters { range: DepthRange<T>, a: Var },
    ScalarFn { a: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_CUBIC: f64 = 0.044715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_CUBIC);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

fn normalize_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize_lossy(cols);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
        let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
        let s = T::one() / (var + eps).sqrt();
        rstd[r] = s;
        for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (xhat, rstd)
}

/// Backward of row normalization given `d xhat`.
fn normalize_rows_backward<T: Scalar>(gxhat: &[T], xhat: &[T], rstd: &[T], cols: usize) -> Vec<T> {
    let n = T::from_usize_lossy(cols);
    let mut gx = vec![T::zero(); gxhat.len()];
    for (r, &s) in rstd.iter().enumerate() {
        let range = r * cols..(r + 1) * cols;
        let g = &gxhat[range.clone()];
        let xh = &xhat[range.clone()];
        let mean_g = g.iter().fold(T::zero(), |a, &b| a + b) / n;
        let mean_gx = g.iter().zip(xh).fold(T::zero(), |a, (&p, &q)| a + p * q) / n;
        for ((o, &gi), &xi) in gx[range].iter_mut().zip(g).zip(xh) {
            *o = s * (gi - mean_g - xi * mean_gx);
        }
    }
    gx
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, kh, kw]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,kh,kw], got {ws:?}");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        let geom = ConvGeometry {
            in_c: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride_y: stride.0,
            stride_x: stride.1,
            pad_y: pad.0,
            pad_x: pad.1,
        };
        assert!(xs[1] + 2 * pad.0 >= ws[2] && xs[2] + 2 * pad.1 >= ws[3], "kernel larger than padded input");
        let out_c = ws[0];
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let p = oh * ow;
        let k = xs[0] * ws[2] * ws[3];
        let cols = tensor::im2col(self.value(input).data(), &geom);
        let mut out = vec![T::zero(); out_c * p];
        if let Some(b) = bias {
            for (o, &bv) in self.value(b).data().iter().enumerate() {
                out[o * p..(o + 1) * p].fill(bv);
            }
        }
        tensor::gemm_nn(self.value(weight).data(), &cols, &mut out, out_c, k, p);
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&[out_c, oh, ow], out), Op::Conv2d { input, weight, bias, geom, out_c }, ng)
    }

    /// `[L, in] x [out, in]^T + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shape mismatch {xs:?} x {ws:?}");
        let (l, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); l * dout];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        tensor::gemm_nt(self.value(input).data(), self.value(weight).data(), &mut out, l, din, dout);
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&[l, dout], out), Op::Linear { input, weight, bias }, ng)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shape mismatch {sa:?} x {sb:?}");
        let mut out = vec![T::zero(); sa[0] * sb[1]];
        tensor::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, sa[0], sa[1], sb[1]);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[sa[0], sb[1]], out), Op::MatMul { a, b }, ng)
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_nt shape mismatch {sa:?} x {sb:?}^T");
        let mut out = vec![T::zero(); sa[0] * sb[0]];
        tensor::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, sa[0], sa[1], sb[0]);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[sa[0], sb[0]], out), Op::MatMulNt { a, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add: {:?} vs {:?}", self.shape(a), self.shape(b));
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, s }, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu { a }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(out, Op::Relu { a }, ng)
    }

    /// Softmax over the middle axis of a logical `[outer, axis, inner]` view.
    pub fn softmax(&mut self, a: Var, outer: usize, axis: usize, inner: usize) -> Var {
        assert_eq!(outer * axis * inner, self.value(a).len());
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * axis + k) * inner + i;
                let m = (0..axis).fold(T::neg_infinity(), |m, k| m.max(x[idx(k)]));
                let mut sum = T::zero();
                for k in 0..axis {
                    let e = (x[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..axis {
                    out[idx(k)] /= sum;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::Softmax { a, outer, axis, inner }, ng)
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        self.softmax(a, s[0], s[1], 1)
    }

    /// Layer normalization over the last axis of `[rows, cols]`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        let (xhat, rstd) = normalize_rows(self.value(a).data(), rows, cols, T::lit(NORM_EPS));
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(cols) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::new(&s, out), Op::LayerNorm { a, gamma, beta, cols, xhat, rstd }, ng)
    }

    /// Group normalization of a `[C, H, W]` tensor with per-channel affine.
    pub fn group_norm(&mut self, a: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        assert!(groups > 0 && s[0] % groups == 0, "{} channels not divisible into {groups} groups", s[0]);
        let plane = s[1] * s[2];
        let cols = s[0] / groups * plane;
        let (xhat, rstd) = normalize_rows(self.value(a).data(), groups, cols, T::lit(NORM_EPS));
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            for o in chunk.iter_mut() {
                *o = *o * g[c] + b[c];
            }
        }
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::new(&s, out), Op::GroupNorm { a, gamma, beta, groups, xhat, rstd }, ng)
    }

    /// Bilinear resize of `[C, H, W]` (or `[H, W]`, treated as one channel).
    pub fn resize(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = match s.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            _ => panic!("resize expects [C,H,W] or [H,W], got {s:?}"),
        };
        let out = tensor::resize_bilinear(self.value(a).data(), c, h, w, oh, ow);
        let shape = if s.len() == 3 { vec![c, oh, ow] } else { vec![oh, ow] };
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::Resize { a, c, h, w, oh, ow }, ng)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[cols, rows], out), Op::Transpose { a, rows, cols }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(out, Op::Reshape { a }, ng)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[1..], first[1..], "concat trailing dims differ");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&shape, data), Op::Concat { parts: parts.to_vec() }, ng)
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        let inner: usize = s[1..].iter().product();
        assert!(start + len <= s[0]);
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, data), Op::Slice { a, start, len }, ng)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s.len() == 2 && start + len <= s[1]);
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[rows, len], data), Op::SliceCols { a, rows, cols, start, len }, ng)
    }

    /// Concatenation of 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert!(s.len() == 2 && s[0] == rows);
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let parts = parts.iter().copied().zip(widths).collect();
        self.push(Tensor::new(&[rows, total], data), Op::ConcatCols { parts, rows }, ng)
    }

    /// Rectify, shift by `tau` and normalize a raw width vector to sum 1.
    pub fn normalize_widths(&mut self, a: Var, tau: T) -> Var {
        let raw = self.value(a);
        let shape = raw.shape().to_vec();
        let out = bins::normalize_bin_widths(raw.data(), tau).expect("finite raw widths");
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::NormalizeWidths { a, tau }, ng)
    }

    /// Bin centers from normalized widths.
    pub fn bin_centers(&mut self, a: Var, range: DepthRange<T>) -> Var {
        let b = self.value(a);
        let shape = b.shape().to_vec();
        let out = bins::bin_centers(b.data(), &range).expect("normalized widths");
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::BinCenters { range, a }, ng)
    }

    /// Records an externally evaluated scalar function of `a` whose gradient
    /// was computed alongside its value.
    pub fn scalar_fn(&mut self, a: Var, value: T, grad: Vec<T>) -> Var {
        assert_eq!(grad.len(), self.value(a).len());
        let ng = self.ng(a);
        self.push(Tensor::scalar(value), Op::ScalarFn { a, grad }, ng)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, g: Tensor<T>) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
            let val = |v: Var| self.nodes[v.0].value.data();
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            let g = gy.data();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv2d { input, weight, bias, geom, out_c } => {
                    let p = geom.out_h() * geom.out_w();
                    let k = geom.in_c * geom.kernel_h * geom.kernel_w;
                    if let Some(b) = bias {
                        if ng(*b) {
                            let gb: Vec<T> = g.chunks(p).map(|row| row.iter().fold(T::zero(), |a, &x| a + x)).collect();
                            acc(&mut grads, &self.nodes, *b, Tensor::new(&[*out_c], gb));
                        }
                    }
                    if ng(*weight) {
                        let cols = tensor::im2col(val(*input), geom);
                        let mut gw = vec![T::zero(); *out_c * k];
                        tensor::gemm_nt(g, &cols, &mut gw, *out_c, p, k);
                        acc(&mut grads, &self.nodes, *weight, Tensor::new(&shape_of(*weight), gw));
                    }
                    if ng(*input) {
                        let mut gcols = vec![T::zero(); k * p];
                        tensor::gemm_tn(val(*weight), g, &mut gcols, k, *out_c, p);
                        let gx = tensor::col2im(&gcols, geom);
                        acc(&mut grads, &self.nodes, *input, Tensor::new(&shape_of(*input), gx));
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let xs = shape_of(*input);
                    let (l, din) = (xs[0], xs[1]);
                    let dout = shape_of(*weight)[0];
                    if let Some(b) = bias {
                        if ng(*b) {
                            let mut gb = vec![T::zero(); dout];
                            for row in g.chunks(dout) {
                                for (o, &x) in gb.iter_mut().zip(row) {
                                    *o += x;
                                }
                            }
                            acc(&mut grads, &self.nodes, *b, Tensor::new(&[dout], gb));
                        }
                    }
                    if ng(*weight) {
                        let mut gw = vec![T::zero(); dout * din];
                        tensor::gemm_tn(g, val(*input), &mut gw, dout, l, din);
                        acc(&mut grads, &self.nodes, *weight, Tensor::new(&[dout, din], gw));
                    }
                    if ng(*input) {
                        let mut gx = vec![T::zero(); l * din];
                        tensor::gemm_nn(g, val(*weight), &mut gx, l, dout, din);
                        acc(&mut grads, &self.nodes, *input, Tensor::new(&xs, gx));
                    }
                }
                Op::MatMul { a, b } => {
                    let (sa, sb) = (shape_of(*a), shape_of(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if ng(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        tensor::gemm_nt(g, val(*b), &mut ga, m, n, k);
                        acc(&mut grads, &self.nodes, *a, Tensor::new(&sa, ga));
                    }
                    if ng(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        tensor::gemm_tn(val(*a), g, &mut gb, k, m, n);
                        acc(&mut grads, &self.nodes, *b, Tensor::new(&sb, gb));
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (sa, sb) = (shape_of(*a), shape_of(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[0]);
                    if ng(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        tensor::gemm_nn(g, val(*b), &mut ga, m, n, k);
                        acc(&mut grads, &self.nodes, *a, Tensor::new(&sa, ga));
                    }
                    if ng(*b) {
                        let mut gb = vec![T::zero(); n * k];
                        tensor::gemm_tn(g, val(*a), &mut gb, n, m, k);
                        acc(&mut grads, &self.nodes, *b, Tensor::new(&sb, gb));
                    }
                }
                Op::Add { a, b } => {
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), g.to_vec()));
                    acc(&mut grads, &self.nodes, *b, Tensor::new(&shape_of(*b), g.to_vec()));
                }
                Op::Scale { a, s } => {
                    acc(&mut grads, &self.nodes, *a, gy.map(|x| x * *s));
                }
                Op::Silu { a } => {
                    let gx = g
                        .iter()
                        .zip(val(*a))
                        .map(|(&gi, &x)| {
                            let sg = sigmoid(x);
                            gi * sg * (T::one() + x * (T::one() - sg))
                        })
                        .collect();
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                }
                Op::Gelu { a } => {
                    let gx = g.iter().zip(val(*a)).map(|(&gi, &x)| gi * gelu_grad(x)).collect();
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                }
                Op::Relu { a } => {
                    let gx = g
                        .iter()
                        .zip(val(*a))
                        .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                        .collect();
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                }
                Op::Softmax { a, outer, axis, inner } => {
                    let y = node.value.data();
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |k: usize| (o * axis + k) * inner + i;
                            let dot = (0..*axis).fold(T::zero(), |s, k| s + g[idx(k)] * y[idx(k)]);
                            for k in 0..*axis {
                                gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                }
                Op::LayerNorm { a, gamma, beta, cols, xhat, rstd } => {
                    let gam = val(*gamma);
                    if ng(*gamma) || ng(*beta) {
                        let mut gg = vec![T::zero(); *cols];
                        let mut gb = vec![T::zero(); *cols];
                        for (grow, xrow) in g.chunks(*cols).zip(xhat.chunks(*cols)) {
                            for c in 0..*cols {
                                gg[c] += grow[c] * xrow[c];
                                gb[c] += grow[c];
                            }
                        }
                        acc(&mut grads, &self.nodes, *gamma, Tensor::new(&[*cols], gg));
                        acc(&mut grads, &self.nodes, *beta, Tensor::new(&[*cols], gb));
                    }
                    if ng(*a) {
                        let gxhat: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * gam[i % cols]).collect();
                        let gx = normalize_rows_backward(&gxhat, xhat, rstd, *cols);
                        acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                    }
                }
                Op::GroupNorm { a, gamma, beta, groups, xhat, rstd } => {
                    let s = shape_of(*a);
                    let plane = s[1] * s[2];
                    let gam = val(*gamma);
                    if ng(*gamma) || ng(*beta) {
                        let mut gg = vec![T::zero(); s[0]];
                        let mut gb = vec![T::zero(); s[0]];
                        for c in 0..s[0] {
                            for p in c * plane..(c + 1) * plane {
                                gg[c] += g[p] * xhat[p];
                                gb[c] += g[p];
                            }
                        }
                        acc(&mut grads, &self.nodes, *gamma, Tensor::new(&[s[0]], gg));
                        acc(&mut grads, &self.nodes, *beta, Tensor::new(&[s[0]], gb));
                    }
                    if ng(*a) {
                        let gxhat: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * gam[i / plane]).collect();
                        let cols = s[0] / groups * plane;
                        let gx = normalize_rows_backward(&gxhat, xhat, rstd, cols);
                        acc(&mut grads, &self.nodes, *a, Tensor::new(&s, gx));
                    }
                }
                Op::Resize { a, c, h, w, oh, ow } => {
                    let gx = tensor::resize_bilinear_backward(g, *c, *h, *w, *oh, *ow);
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                }
                Op::Transpose { a, rows, cols } => {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gx[r * cols + c] = g[c * rows + r];
                        }
                    }
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&[*rows, *cols], gx));
                }
                Op::Reshape { a } => {
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), g.to_vec()));
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        acc(&mut grads, &self.nodes, p, Tensor::new(&shape_of(p), g[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::Slice { a, start, len } => {
                    let s = shape_of(*a);
                    let inner: usize = s[1..].iter().product();
                    let mut gx = vec![T::zero(); s.iter().product()];
                    gx[start * inner..(start + len) * inner].copy_from_slice(g);
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&s, gx));
                }
                Op::SliceCols { a, rows, cols, start, len } => {
                    let mut gx = vec![T::zero(); rows * cols];
                    for r in 0..*rows {
                        gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&[*rows, *cols], gx));
                }
                Op::ConcatCols { parts, rows } => {
                    let total: usize = parts.iter().map(|(_, w)| w).sum();
                    let mut offset = 0;
                    for &(p, w) in parts {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(&mut grads, &self.nodes, p, Tensor::new(&[*rows, w], gp));
                        offset += w;
                    }
                }
                Op::NormalizeWidths { a, tau } => {
                    let gx = bins::normalize_bin_widths_vjp(val(*a), *tau, g);
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                }
                Op::BinCenters { range, a } => {
                    let gx = bins::bin_centers_vjp(range, g);
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                }
                Op::ScalarFn { a, grad } => {
                    let gx = grad.iter().map(|&d| d * g[0]).collect();
                    acc(&mut grads, &self.nodes, *a, Tensor::new(&shape_of(*a), gx));
                }
            }
        }
        Gradients { grads }
    }
}
