//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and `backward` is a single reverse sweep.

use crate::error::{dim_err, Result, TensorError};
use crate::ops::{self, ConvGeometry, Padding};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Clamp { x: Var, lo: T, hi: T },
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Stack(Vec<Var>),
    ScaleRows { x: Var, w: Var },
    AddBias { x: Var, b: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient shaped like `var`; zeros when `var` did not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]).expect("recorded shape is valid"),
        }
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!(
            "{op}: shapes {:?} and {:?} differ (no implicit broadcasting)",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Element count of a node's value.
    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(ops::sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::ln);
        self.push(value, Op::Log(x))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| if v.is_nan() { v } else { v.max(lo).min(hi) });
        self.push(value, Op::Clamp { x, lo, hi })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, padding: Padding, stride: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(k), padding, stride)?;
        let cols = ops::im2col(self.data(x), &geom);
        let out = ops::conv2d_from_cols(&cols, self.data(k), &geom);
        let value = Tensor::from_parts_unchecked(geom.output_shape().to_vec(), out);
        Ok(self.push(value, Op::Conv2d { x, k, geom, cols }))
    }

    /// Non-overlapping `window x window` max pool over `[H,W,C]`.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (value, argmax) = ops::max_pool2d_with_argmax(self.value(x), window)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax(self.value(x))?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_usize(t.len()).expect("length fits");
        let value = Tensor::scalar(t.sum() / n);
        self.push(value, Op::Mean(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::sum_axis(self.value(x), axis)?;
        Ok(self.push(value, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| dim_err(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_usize(n).expect("extent fits")))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, argmax) = ops::max_axis_with_argmax(self.value(x), axis)?;
        Ok(self.push(value, Op::MaxAxis { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.reshape(x, &[n]).expect("flatten preserves element count")
    }

    /// Stack equally-shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::stack(&tensors)?;
        Ok(self.push(value, Op::Stack(parts.to_vec())))
    }

    /// `y[n, :] = w[n] * x[n, :]` for `x: [N, D]`, `w: [N]`. The only
    /// broadcasting op, and its broadcast axis is explicit.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 1 || xs[0] != ws[0] {
            return Err(dim_err(format!(
                "scale_rows expects x [N,D] and w [N], got {xs:?} and {ws:?}"
            )));
        }
        let d = xs[1];
        let wd = self.data(w);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wd[i / d])
            .collect();
        let shape = xs.to_vec();
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::ScaleRows { x, w }))
    }

    /// `y[..., c] = x[..., c] + b[c]`: bias broadcast over every leading
    /// position of the trailing (channel) axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        let c = *xs.last().expect("rank >= 1");
        if bs.len() != 1 || bs[0] != c {
            return Err(dim_err(format!(
                "add_bias expects bias [{c}] for input {xs:?}, got {bs:?}"
            )));
        }
        let bd = self.data(b);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        let shape = xs.to_vec();
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::AddBias { x, b }))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward() needs a scalar loss, node has shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.data(*b), |gv, bv| gv * bv);
                    let gb = zip_map(&g, self.data(*a), |gv, av| gv * av);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Affine { x, scale } => {
                    let gx: Vec<T> = g.iter().map(|&v| v * *scale).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, y, |gv, s| gv * s * (T::one() - s));
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Tanh(x) => {
                    let gx = zip_map(&g, y, |gv, t| gv * (T::one() - t * t));
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Log(x) => {
                    let gx = zip_map(&g, self.data(*x), |gv, xv| gv / xv);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let gx = zip_map(&g, self.data(*x), |gv, xv| {
                        if xv < *lo || xv > *hi {
                            T::zero()
                        } else {
                            gv
                        }
                    });
                    accumulate(&mut grads, *x, &gx);
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = ops::matmul_dims(self.shape(*a), self.shape(*b))?;
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g, (n, 1), self.data(*b), (1, n), T::zero(), &mut ga);
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.data(*a), (1, k), &g, (n, 1), T::zero(), &mut gb);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Conv2d { x, k, geom, cols } => {
                    let (gx, gk) = ops::conv2d_backward(cols, self.data(*k), &g, geom);
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *k, &gk);
                }
                Op::MaxPool2d { x, argmax } | Op::MaxAxis { x, argmax } => {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        gx[src] = gx[src] + gv;
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Softmax(x) => {
                    let dot: T = zip_map(&g, y, |gv, yv| gv * yv).into_iter().sum();
                    let gx = zip_map(&g, y, |gv, yv| yv * (gv - dot));
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; self.value(*x).len()];
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let gx = vec![g[0] / T::from_usize(n).expect("length fits"); n];
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SumAxis { x, axis } => {
                    let (outer, n, inner, _) = ops::axis_split(self.shape(*x), *axis)?;
                    let mut gx = vec![T::zero(); outer * n * inner];
                    for o in 0..outer {
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, &g),
                Op::Stack(parts) => {
                    let block = g.len() / parts.len();
                    for (j, p) in parts.iter().enumerate() {
                        accumulate(&mut grads, *p, &g[j * block..(j + 1) * block]);
                    }
                }
                Op::ScaleRows { x, w } => {
                    let d = self.shape(*x)[1];
                    let wd = self.data(*w);
                    let xd = self.data(*x);
                    let gx: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * wd[i / d]).collect();
                    let gw: Vec<T> = (0..wd.len())
                        .map(|r| (0..d).map(|c| g[r * d + c] * xd[r * d + c]).sum())
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *w, &gw);
                }
                Op::AddBias { x, b } => {
                    let c = self.value(*b).len();
                    let mut gb = vec![T::zero(); c];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % c] = gb[i % c] + gv;
                    }
                    accumulate(&mut grads, *x, &g);
                    accumulate(&mut grads, *b, &gb);
                }
            }
        }

        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&shapes)
            .map(|(g, s)| g.map(|d| Tensor::from_parts_unchecked(s.clone(), d)))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
