use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Deliberate backward-rule corruptions, used to prove that gradient
/// checking catches broken rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlipReluBackward,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var },
    Relu { x: Var },
    Concat { a: Var, b: Var },
    Dropout { x: Var, mask: Vec<T> },
    ChannelSum { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, alpha: T },
    Sum { x: Var },
    SqDiffSum { a: Var, b: Var, scale: f64 },
    AbsDiffSum { a: Var, b: Var, scale: f64 },
    DiffNorm { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Unrounded value of one-element reductions and of scalar arithmetic on them.
    exact: Option<f64>,
}

/// A tape of operator nodes in creation (hence topological) order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not
    /// influence the output.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
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

    /// Value of a one-element node in f64. Loss reductions accumulate in
    /// f64 and keep that value here even when `T` is f32.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        match node.exact {
            Some(x) => Ok(x),
            None => Ok(node.value.item()?.as_f64()),
        }
    }

    fn exact_of(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or_else(|| node.value.data()[0].as_f64())
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, exact: f64, op: Op<T>, requires_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(T::from_f64(exact)), op, requires_grad);
        self.nodes[v.0].exact = Some(exact);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Cross-correlation of `x` (N,Cin,H,W) with `w` (Cout,Cin,kh,kw) plus bias `b` (Cout).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Padding) -> Result<Var> {
        let [n, c_in, h, wd] = self.value(x).dims4()?;
        let [c_out, wc, kh, kw] = self.value(w).dims4()?;
        if wc != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels, kernel expects {wc}"
            )));
        }
        if self.value(b).numel() != c_out {
            return Err(Error::shape(format!(
                "conv2d: bias has {} entries for {c_out} output channels",
                self.value(b).numel()
            )));
        }
        if stride == 0 {
            return Err(Error::param("conv2d stride must be >= 1"));
        }
        let pad_px = match pad {
            Padding::Valid => 0,
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
                    return Err(Error::shape("same padding needs a square odd kernel"));
                }
                kh / 2
            }
        };
        if h + 2 * pad_px < kh || wd + 2 * pad_px < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad: pad_px,
            h_out: (h + 2 * pad_px - kh) / stride + 1,
            w_out: (wd + 2 * pad_px - kw) / stride + 1,
        };
        let out = kernels::conv_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let t = Tensor::new(&[n, c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n * c, h, w);
        let t = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let out = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let t = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Upsample2 { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            out.extend_from_slice(&self.value(a).data()[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let t = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xs = self.value(x);
        let data = xs.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xs.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Sums channels in ascending order: (N,C,H,W) -> (N,1,H,W).
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let s = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                if ch == 0 {
                    dst.copy_from_slice(s);
                } else {
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d = *d + v;
                    }
                }
            }
        }
        let t = Tensor::new(&[n, 1, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ChannelSum { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        if self.value(a).is_scalar() {
            let rg = self.rg(&[a, b]);
            let s = self.exact_of(a) + self.exact_of(b);
            return Ok(self.push_scalar(s, Op::Add { a, b }, rg));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        if self.value(a).is_scalar() {
            let rg = self.rg(&[a, b]);
            let s = self.exact_of(a) * self.exact_of(b);
            return Ok(self.push_scalar(s, Op::Mul { a, b }, rg));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        if self.value(x).is_scalar() {
            let rg = self.rg(&[x]);
            let s = self.exact_of(x) * alpha;
            return self.push_scalar(s, Op::Scale { x, alpha: T::from_f64(alpha) }, rg);
        }
        let alpha = T::from_f64(alpha);
        let t = self.value(x).map(|v| v * alpha);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, alpha }, rg)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push_scalar(s, Op::Sum { x }, rg)
    }

    /// `scale * Σ (a - b)²`, accumulated in f64.
    pub fn sq_diff_sum(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        self.same_shape(a, b, "squared difference")?;
        let s = diff_fold(self.value(a), self.value(b), |d| d * d);
        let rg = self.rg(&[a, b]);
        Ok(self.push_scalar(scale * s, Op::SqDiffSum { a, b, scale }, rg))
    }

    /// `scale * Σ |a - b|`, accumulated in f64.
    pub fn abs_diff_sum(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        self.same_shape(a, b, "absolute difference")?;
        let s = diff_fold(self.value(a), self.value(b), f64::abs);
        let rg = self.rg(&[a, b]);
        Ok(self.push_scalar(scale * s, Op::AbsDiffSum { a, b, scale }, rg))
    }

    /// Euclidean norm `‖a - b‖₂`.
    pub fn diff_norm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "difference norm")?;
        let s = diff_fold(self.value(a), self.value(b), |d| d * d).sqrt();
        let rg = self.rg(&[a, b]);
        Ok(self.push_scalar(s, Op::DiffNorm { a, b }, rg))
    }

    /// Reverse pass from a one-element output. Every node is visited once,
    /// in reverse creation order; fan-out gradients accumulate by addition.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.value(*x);
                let n = xs.shape()[0];
                let (dx, dw, db) = kernels::conv_backward(geom, n, xs.data(), self.value(*w).data(), g.data());
                self.accumulate(grads, *x, Tensor::new(xs.shape(), dx)?);
                self.accumulate(grads, *w, Tensor::new(self.value(*w).shape(), dw)?);
                self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?);
            }
            Op::MaxPool2 { x, argmax } => {
                let xs = self.value(*x);
                let mut dx = vec![T::zero(); xs.numel()];
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dx[i] = dx[i] + gv;
                }
                self.accumulate(grads, *x, Tensor::new(xs.shape(), dx)?);
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let dx = kernels::upsample2_backward(g.data(), n * c, h, w);
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::Relu { x } => {
                let sign = if self.fault == Some(Fault::FlipReluBackward) {
                    -T::one()
                } else {
                    T::one()
                };
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { sign * gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut dbv = Vec::with_capacity(n * cb * plane);
                for item in g.data().chunks((ca + cb) * plane) {
                    da.extend_from_slice(&item[..ca * plane]);
                    dbv.extend_from_slice(&item[ca * plane..]);
                }
                self.accumulate(grads, *a, Tensor::new(&[n, ca, h, w], da)?);
                self.accumulate(grads, *b, Tensor::new(&[n, cb, h, w], dbv)?);
            }
            Op::Dropout { x, mask } => {
                let dx = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
            }
            Op::ChannelSum { x } => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let plane = h * w;
                let mut dx = Vec::with_capacity(n * c * plane);
                for item in g.data().chunks(plane) {
                    for _ in 0..c {
                        dx.extend_from_slice(item);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), da)?);
                self.accumulate(grads, *b, Tensor::new(g.shape(), db)?);
            }
            Op::Scale { x, alpha } => {
                self.accumulate(grads, *x, g.map(|v| v * *alpha));
            }
            Op::Sum { x } => {
                let gv = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::SqDiffSum { a, b, scale } => {
                let k = T::from_f64(2.0 * scale) * g.item()?;
                self.diff_backward(grads, *a, *b, |d| k * d)?;
            }
            Op::AbsDiffSum { a, b, scale } => {
                let k = T::from_f64(*scale) * g.item()?;
                self.diff_backward(grads, *a, *b, |d| {
                    if d > T::zero() {
                        k
                    } else if d < T::zero() {
                        -k
                    } else {
                        T::zero()
                    }
                })?;
            }
            Op::DiffNorm { a, b } => {
                let norm = node.value.item()?;
                let k = if norm > T::zero() { g.item()? / norm } else { T::zero() };
                self.diff_backward(grads, *a, *b, |d| k * d)?;
            }
        }
        Ok(())
    }

    /// Routes `f(a - b)` to `a` and its negation to `b`.
    fn diff_backward(&self, grads: &mut [Option<Tensor<T>>], a: Var, b: Var, f: impl Fn(T) -> T) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let da: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x - y)).collect();
        let db = da.iter().map(|&v| -v).collect();
        self.accumulate(grads, a, Tensor::new(av.shape(), da)?);
        self.accumulate(grads, b, Tensor::new(bv.shape(), db)?);
        Ok(())
    }
}

fn diff_fold<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x.as_f64() - y.as_f64()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Nested-loop cross-correlation oracle, valid padding, stride 1.
    fn conv_oracle(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..=h - kh {
            for j in 0..=w - kw {
                let mut s = 0.0;
                for a in 0..kh {
                    for b in 0..kw {
                        s += x[(i + a) * w + j + b] * k[a * kw + b];
                    }
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loops() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let expected = conv_oracle(&x, 3, 3, &[1.0; 4], 2, 2);
        assert_eq!(expected, vec![12.0, 16.0, 24.0, 28.0]);
        let mut g = Graph::new();
        let xv = g.input(t(&[1, 1, 3, 3], &x));
        let w = g.param(t(&[1, 1, 2, 2], &[1.0; 4]));
        let b = g.param(t(&[1], &[0.0]));
        let y = g.conv2d(xv, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &expected[..]);
    }

    #[test]
    fn conv_stride_and_same_padding() {
        let x: Vec<f64> = (0..25).map(|v| v as f64 * 0.5 - 3.0).collect();
        let k: Vec<f64> = (0..9).map(|v| (v as f64 - 4.0) * 0.25).collect();
        let mut g = Graph::new();
        let xv = g.input(t(&[1, 1, 5, 5], &x));
        let w = g.param(t(&[1, 1, 3, 3], &k));
        let b = g.param(t(&[1], &[0.5]));
        let same = g.conv2d(xv, w, b, 1, Padding::Same).unwrap();
        assert_eq!(g.value(same).shape(), &[1, 1, 5, 5]);
        // Oracle: zero-pad to 7x7 then valid conv.
        let mut padded = vec![0.0; 49];
        for i in 0..5 {
            for j in 0..5 {
                padded[(i + 1) * 7 + j + 1] = x[i * 5 + j];
            }
        }
        let oracle: Vec<f64> = conv_oracle(&padded, 7, 7, &k, 3, 3).iter().map(|v| v + 0.5).collect();
        for (a, b) in g.value(same).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let strided = g.conv2d(xv, w, b, 2, Padding::Valid).unwrap();
        assert_eq!(g.value(strided).shape(), &[1, 1, 2, 2]);
        let full = conv_oracle(&x, 5, 5, &k, 3, 3);
        let picked = [full[0], full[2], full[6], full[8]];
        for (a, b) in g.value(strided).data().iter().zip(picked) {
            assert!((a - (b + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.param(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.conv2d(x, w, b, 1, Padding::Same), Err(Error::Shape(_))));
        let w2 = g.param(Tensor::zeros(&[3, 2, 2, 2]));
        assert!(g.conv2d(x, w2, b, 1, Padding::Same).is_err());
        let b2 = g.param(Tensor::zeros(&[2]));
        assert!(g.conv2d(x, w2, b2, 1, Padding::Valid).is_err());
    }

    #[test]
    fn one_by_one_identity_conv() {
        let x: Vec<f64> = (0..12).map(|v| v as f64 - 5.5).collect();
        let mut g = Graph::new();
        let xv = g.input(t(&[1, 1, 3, 4], &x));
        let w = g.param(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.param(t(&[1], &[0.0]));
        let y = g.conv2d(xv, w, b, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), &x[..]);
    }

    #[test]
    fn maxpool_forward_backward() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

        // Ties route to the first index.
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
        let y = g.maxpool2(x).unwrap();
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(matches!(g.maxpool2(x), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let data: Vec<f64> = (0..24).map(|v| (v * 7 % 11) as f64).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3, 2, 2], &data));
        let u = g.upsample2(x).unwrap();
        assert_eq!(g.value(u).shape(), &[2, 3, 4, 4]);
        let p = g.maxpool2(u).unwrap();
        assert_eq!(g.value(p).data(), &data[..]);
    }

    #[test]
    fn relu_of_negation_times_relu_is_zero() {
        let data: Vec<f64> = (0..20).map(|v| v as f64 - 9.5).chain([0.0]).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[21], &data));
        let nx = g.scale(x, -1.0);
        let a = g.relu(x);
        let b = g.relu(nx);
        let p = g.mul(a, b).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fan_out_sums_branch_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_layout() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.param(t(&[2, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(
            g.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let w = g.input(Tensor::from_fn(&[2, 3, 1, 2], |i| i as f64));
        let m = g.mul(c, w).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[100], 2.0));
        assert_eq!(g.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, Mode::Train, &mut rng).is_err());
        let z = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1_000_000], 1.0));
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = g.value(y).data().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[64], 1.0));
        let y = g.dropout(x, 0.25, Mode::Train, &mut rng).unwrap();
        let out = g.value(y).clone();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), out.data());
    }

    #[test]
    fn loss_ops_values() {
        let mut g = Graph::new();
        let a = g.param(t(&[4], &[3.0, 4.0, 1.0, 1.0]));
        let b = g.input(t(&[4], &[0.0, 0.0, 1.0, 1.0]));
        let sq = g.sq_diff_sum(a, b, 0.25).unwrap();
        let ab = g.abs_diff_sum(a, b, 0.25).unwrap();
        let nrm = g.diff_norm(a, b).unwrap();
        assert_eq!(g.value(sq).item().unwrap(), 6.25);
        assert_eq!(g.value(ab).item().unwrap(), 1.75);
        assert_eq!(g.value(nrm).item().unwrap(), 5.0);
        let grads = g.backward(ab).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_sum_matches_manual_sum() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32 * 0.1).collect();
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2, 3, 2, 2], data.clone()).unwrap());
        let s = g.channel_sum(x).unwrap();
        for n in 0..2 {
            for p in 0..4 {
                let want = data[n * 12 + p] + data[n * 12 + 4 + p] + data[n * 12 + 8 + p];
                assert_eq!(g.value(s).data()[n * 4 + p], want);
            }
        }
        let total = g.sum(s);
        assert!(g.backward(total).unwrap().get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
