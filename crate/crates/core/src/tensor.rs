//! Dense row-major tensors and the numeric kernels behind the graph ops.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_y: usize,
    pub stride_x: usize,
    pub pad_y: usize,
    pub pad_x: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad_y - self.kernel_h) / self.stride_y + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad_x - self.kernel_w) / self.stride_x + 1
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel_h * self.kernel_w
    }
}

/// Unfolds patches into a `[C*kh*kw, out_h*out_w]` matrix.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let mut out = vec![T::zero(); g.patch_len() * cols];
    for c in 0..g.in_c {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let y = (oy * g.stride_y + ky) as isize - g.pad_y as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    let src = &input[(c * g.in_h + y as usize) * g.in_w..][..g.in_w];
                    for ox in 0..ow {
                        let x = (ox * g.stride_x + kx) as isize - g.pad_x as isize;
                        if x >= 0 && x < g.in_w as isize {
                            dst[oy * ow + ox] = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(cols_grad: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let mut out = vec![T::zero(); g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let y = (oy * g.stride_y + ky) as isize - g.pad_y as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    let base = (c * g.in_h + y as usize) * g.in_w;
                    for ox in 0..ow {
                        let x = (ox * g.stride_x + kx) as isize - g.pad_x as isize;
                        if x >= 0 && x < g.in_w as isize {
                            out[base + x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// One output coordinate's two source taps under half-pixel bilinear
/// resampling (`align_corners = false`).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

pub(crate) fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac: T::lit(frac) }
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` tensor.
pub fn resize_bilinear<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v00 = plane[a.lo * w + b.lo];
                let v01 = plane[a.lo * w + b.hi];
                let v10 = plane[a.hi * w + b.lo];
                let v11 = plane[a.hi * w + b.hi];
                let top = v00 + (v01 - v00) * b.frac;
                let bot = v10 + (v11 - v10) * b.frac;
                out[(ch * oh + oy) * ow + ox] = top + (bot - top) * a.frac;
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward<T: Scalar>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let one = T::one();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = grad_out[(ch * oh + oy) * ow + ox];
                let gt = g * (one - a.frac);
                let gb = g * a.frac;
                plane[a.lo * w + b.lo] += gt * (one - b.frac);
                plane[a.lo * w + b.hi] += gt * b.frac;
                plane[a.hi * w + b.lo] += gb * (one - b.frac);
                plane[a.hi * w + b.hi] += gb * b.frac;
            }
        }
    }
    out
}
