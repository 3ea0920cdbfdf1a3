//! Forward kernels and their adjoints. The graph layer in [`crate::graph`]
//! records these; they are also usable directly on plain tensors.

use crate::error::{dim_err, Result};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero-pad so that `out = ceil(in / stride)`.
    Same,
    /// No padding.
    Valid,
}

/// Resolved geometry of one channels-last convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn resolve_axis(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if k > input {
                None
            } else {
                Some(((input - k) / stride + 1, 0))
            }
        }
    }
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        padding: Padding,
        stride: usize,
    ) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(dim_err(format!(
                "conv2d expects input [H,W,C] and kernel [kh,kw,Cin,Cout], got {input:?} and {kernel:?}"
            )));
        }
        if input[2] != kernel[2] {
            return Err(dim_err(format!(
                "conv2d channel mismatch: input {input:?} has {} channels, kernel {kernel:?} expects {}",
                input[2], kernel[2]
            )));
        }
        if stride == 0 {
            return Err(dim_err("conv2d stride must be positive"));
        }
        let (out_h, pad_top) = resolve_axis(input[0], kernel[0], stride, padding).ok_or_else(|| {
            dim_err(format!(
                "conv2d kernel {kernel:?} larger than padded input {input:?}"
            ))
        })?;
        let (out_w, pad_left) = resolve_axis(input[1], kernel[1], stride, padding).ok_or_else(|| {
            dim_err(format!(
                "conv2d kernel {kernel:?} larger than padded input {input:?}"
            ))
        })?;
        Ok(Self {
            in_h: input[0],
            in_w: input[1],
            cin: input[2],
            kh: kernel[0],
            kw: kernel[1],
            cout: kernel[3],
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.cout]
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row/col for output position `(oy, ox)` and tap `(dy, dx)`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, dy: usize, dx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + dy).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + dx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// Unfold `input` into `[out_h*out_w, kh*kw*cin]` patches, zeros where the
/// window hangs over the border.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let q = g.patch_len();
    let mut cols = vec![T::zero(); g.positions() * q];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * q;
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    if let Some((y, x)) = g.source(oy, ox, dy, dx) {
                        let src = (y * g.in_w + x) * g.cin;
                        let dst = row + (dy * g.kw + dx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let q = g.patch_len();
    let mut out = vec![T::zero(); g.in_h * g.in_w * g.cin];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * q;
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    if let Some((y, x)) = g.source(oy, ox, dy, dx) {
                        let dst = (y * g.in_w + x) * g.cin;
                        let src = row + (dy * g.kw + dx) * g.cin;
                        for c in 0..g.cin {
                            out[dst + c] = out[dst + c] + cols[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_from_cols<T: Scalar>(cols: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let (p, q) = (g.positions(), g.patch_len());
    let mut out = vec![T::zero(); p * g.cout];
    T::gemm(p, q, g.cout, cols, (q, 1), kernel, (g.cout, 1), T::zero(), &mut out);
    out
}

/// Channels-last 2-D convolution. `input` is `[H,W,Cin]`, `kernel` is
/// `[kh,kw,Cin,Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), padding, stride)?;
    let cols = im2col(input.data(), &g);
    let out = conv2d_from_cols(&cols, kernel.data(), &g);
    Tensor::new(&g.output_shape(), out)
}

/// Gradients of a convolution w.r.t. its input and kernel, given the saved
/// patch matrix.
pub(crate) fn conv2d_backward<T: Scalar>(
    cols: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let (p, q) = (g.positions(), g.patch_len());
    let mut grad_kernel = vec![T::zero(); q * g.cout];
    T::gemm(q, p, g.cout, cols, (1, q), grad_out, (g.cout, 1), T::zero(), &mut grad_kernel);
    let mut grad_cols = vec![T::zero(); p * q];
    T::gemm(p, g.cout, q, grad_out, (g.cout, 1), kernel, (1, g.cout), T::zero(), &mut grad_cols);
    (col2im(&grad_cols, g), grad_kernel)
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), T::zero(), &mut out);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(dim_err(format!("matmul shapes {a:?} x {b:?} incompatible")));
    }
    Ok((a[0], a[1], b[1]))
}

/// Numerically stable softmax over a rank-1 tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 1 {
        return Err(dim_err(format!(
            "softmax expects a rank-1 tensor, got {:?}",
            logits.shape()
        )));
    }
    Ok(Tensor::from_parts_unchecked(
        logits.shape().to_vec(),
        softmax_slice(logits.data()),
    ))
}

pub(crate) fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Geometry of a non-overlapping max pool with trailing rows/cols truncated.
pub(crate) fn pool_output(shape: &[usize], window: usize) -> Result<[usize; 3]> {
    if shape.len() != 3 {
        return Err(dim_err(format!(
            "max_pool2d expects [H,W,C], got {shape:?}"
        )));
    }
    if window == 0 || window > shape[0] || window > shape[1] {
        return Err(dim_err(format!(
            "max_pool2d window {window} does not fit input {shape:?}"
        )));
    }
    Ok([shape[0] / window, shape[1] / window, shape[2]])
}

/// Returns the pooled values and, per output element, the flat input index
/// that supplied it.
pub(crate) fn max_pool2d_with_argmax<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [oh, ow, c] = pool_output(input.shape(), window)?;
    let w = input.shape()[1];
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = (oy * window * w + ox * window) * c + ch;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ((oy * window + dy) * w + ox * window + dx) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(vec![oh, ow, c], out), arg))
}

pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    max_pool2d_with_argmax(input, window).map(|(t, _)| t)
}

/// `(outer, extent, inner)` decomposition of `shape` around `axis`, and the
/// reduced output shape.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(dim_err(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    let mut reduced: Vec<usize> = shape[..axis]
        .iter()
        .chain(&shape[axis + 1..])
        .copied()
        .collect();
    if reduced.is_empty() {
        reduced.push(1);
    }
    Ok((outer, shape[axis], inner, reduced))
}

pub fn sum_axis<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner, reduced) = axis_split(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..n {
            let base = (o * n + i) * inner;
            for j in 0..inner {
                out[o * inner + j] = out[o * inner + j] + x[base + j];
            }
        }
    }
    Tensor::new(&reduced, out)
}

pub(crate) fn max_axis_with_argmax<T: Scalar>(
    input: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (outer, n, inner, reduced) = axis_split(input.shape(), axis)?;
    let x = input.data();
    let mut out = Vec::with_capacity(outer * inner);
    let mut arg = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for j in 0..inner {
            let mut best = o * n * inner + j;
            for i in 1..n {
                let idx = (o * n + i) * inner + j;
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    Ok((Tensor::new(&reduced, out)?, arg))
}

pub fn max_axis<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    max_axis_with_argmax(input, axis).map(|(t, _)| t)
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_convolution_is_scalar_multiply() {
        let x = Tensor::<f64>::new(&[1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::<f64>::new(&[1, 1, 1, 1], vec![-2.5]).unwrap();
        let y = conv2d(&x, &k, Padding::Same, 1).unwrap();
        assert_eq!(y.data(), &[-7.5]);
    }

    #[test]
    fn ones_convolution_counts_overlaps() {
        let x = Tensor::<f32>::full(&[3, 3, 1], 1.0).unwrap();
        let k = Tensor::<f32>::full(&[3, 3, 1, 1], 1.0).unwrap();
        let y = conv2d(&x, &k, Padding::Same, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        assert_eq!(y.get(&[1, 1, 0]).unwrap(), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(&[r, c, 0]).unwrap(), 4.0);
        }
        assert_eq!(y.get(&[0, 1, 0]).unwrap(), 6.0);
    }

    #[test]
    fn channel_mismatch_reports_both_shapes() {
        let x = Tensor::<f32>::zeros(&[4, 4, 3]).unwrap();
        let k = Tensor::<f32>::zeros(&[3, 3, 2, 5]).unwrap();
        let msg = conv2d(&x, &k, Padding::Same, 1).unwrap_err().to_string();
        assert!(msg.contains("[4, 4, 3]") && msg.contains("[3, 3, 2, 5]"), "{msg}");
    }

    #[test]
    fn valid_kernel_larger_than_input_errors() {
        let x = Tensor::<f32>::zeros(&[2, 2, 1]).unwrap();
        let k = Tensor::<f32>::zeros(&[3, 3, 1, 1]).unwrap();
        assert!(conv2d(&x, &k, Padding::Valid, 1).is_err());
    }

    #[test]
    fn strided_same_and_valid_extents() {
        let g = ConvGeometry::new(&[32, 32, 3], &[3, 3, 3, 16], Padding::Same, 2).unwrap();
        assert_eq!(g.output_shape(), [16, 16, 16]);
        let g = ConvGeometry::new(&[32, 32, 3], &[3, 3, 3, 16], Padding::Valid, 2).unwrap();
        assert_eq!(g.output_shape(), [15, 15, 16]);
    }

    #[test]
    fn max_pool_picks_block_maximum_and_truncates() {
        let x = Tensor::<f32>::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2d(&x, 2).unwrap().data(), &[4.0]);
        let x = Tensor::<f32>::from_fn(&[5, 5, 1], |i| i as f32).unwrap();
        let y = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[6.0, 8.0, 16.0, 18.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax(&Tensor::<f64>::from_slice(&[0.0; 4]).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let y = softmax(&Tensor::<f32>::from_slice(&[1000.0, 0.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && y.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_f64_direct() {
        let y = softmax(&Tensor::<f32>::from_slice(&[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let total: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((y.data()[i] as f64 - v.exp() / total).abs() < 1e-6);
        }
    }

    #[test]
    fn axis_reductions() {
        let x = Tensor::<f32>::new(&[2, 3], vec![1.0, -2.0, 3.0, -1.0, 5.0, 0.0]).unwrap();
        assert_eq!(sum_axis(&x, 0).unwrap().data(), &[0.0, 3.0, 3.0]);
        assert_eq!(sum_axis(&x, 1).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(max_axis(&x, 0).unwrap().data(), &[1.0, 5.0, 3.0]);
        assert!(sum_axis(&x, 2).is_err());
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0f64), 0.5);
    }
}
