//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves either
//! borrow parameter storage (`param`, `constant_ref`) or own a copy
//! (`constant`). [`Graph::backward`] walks the record in reverse and returns
//! owned [`Gradients`], so the graph (and its borrows) can be dropped before
//! any parameter is mutated.

use std::borrow::Cow;

use ndarray::{ArrayView2, ArrayViewMut2};

use super::kernels::{self, Activation, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Act(Var, Activation),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    LinComb(Vec<(Var, f32)>),
    SumAll(Var),
    HalfSqNorm(Var),
    HalfSqDist(Var, Var),
    KlStdNormal { mu: Var, log_var: Var },
    Reparam { mu: Var, log_var: Var, eps: Vec<f32> },
    SliceCols { src: Var, start: usize },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry, cols: Vec<f32> },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    NllMean { logp: Var, labels: Vec<u8> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f32]>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f32]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf borrowing the tensor's storage.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    /// Non-trainable leaf borrowing the tensor's storage.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Non-trainable leaf owning a copy of `data`.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), Cow::Owned(data), Op::Leaf, false))
    }

    pub fn constant_matrix(&mut self, m: ArrayView2<f32>) -> Var {
        let data = m.iter().copied().collect();
        self.push(vec![m.nrows(), m.ncols()], Cow::Owned(data), Op::Leaf, false)
    }

    /// Constant leaf holding a copy of `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.value.to_vec());
        self.push(shape, Cow::Owned(data), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn view2(&self, v: Var) -> ArrayView2<'_, f32> {
        let n = &self.nodes[v.0];
        ArrayView2::from_shape(dims2(&n.shape), &n.value).expect("node matrix view")
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(x));
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::Dimension(format!(
                "linear input width {k} vs weight {ws:?}"
            )));
        }
        let n = ws[1];
        if self.shape(b) != [n] {
            return Err(Error::Dimension(format!(
                "bias {:?} for {n} outputs",
                self.shape(b)
            )));
        }
        let out = kernels::linear(self.view2(x), self.view2(w), self.value(b));
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let data = out.into_raw_vec_and_offset().0;
        Ok(self.push(vec![m, n], Cow::Owned(data), Op::Linear { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = ndarray::Array2::<f32>::zeros((m, n));
        kernels::matmul_acc(self.view2(a), self.view2(b), &mut out.view_mut());
        let ng = self.ng(a) || self.ng(b);
        let data = out.into_raw_vec_and_offset().0;
        Ok(self.push(vec![m, n], Cow::Owned(data), Op::MatMul(a, b), ng))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let shape = self.shape(x).to_vec();
        let cols = dims2(&shape).1;
        let mut data = self.value(x).to_vec();
        act.apply(&mut data, cols);
        let ng = self.ng(x);
        self.push(shape, Cow::Owned(data), Op::Act(x, act), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.activation(x, Activation::LogSoftmax)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).iter().map(|v| v.exp()).collect();
        let ng = self.ng(x);
        self.push(shape, Cow::Owned(data), Op::Exp(x), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.check_same(a, b, "elementwise")?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, Cow::Owned(data), op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).iter().map(|v| v * c).collect();
        let ng = self.ng(a);
        self.push(shape, Cow::Owned(data), Op::Scale(a, c), ng)
    }

    /// `Σ cᵢ·vᵢ` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Contract("empty linear combination".into()))?;
        for (v, _) in terms {
            self.check_same(first, *v, "linear combination")?;
        }
        let mut data = vec![0.0f32; self.value(first).len()];
        for (v, c) in terms {
            data.iter_mut()
                .zip(self.value(*v))
                .for_each(|(d, x)| *d += c * x);
        }
        let shape = self.shape(first).to_vec();
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        Ok(self.push(shape, Cow::Owned(data), Op::LinComb(terms.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![], Cow::Owned(vec![s]), Op::SumAll(a), ng)
    }

    /// `½ Σ aᵢ²`
    pub fn half_sq_norm(&mut self, a: Var) -> Var {
        let s: f32 = 0.5 * self.value(a).iter().map(|v| v * v).sum::<f32>();
        let ng = self.ng(a);
        self.push(vec![], Cow::Owned(vec![s]), Op::HalfSqNorm(a), ng)
    }

    /// `½ Σ (aᵢ − bᵢ)²`
    pub fn half_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "squared distance")?;
        let s: f32 = 0.5
            * self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f32>();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![], Cow::Owned(vec![s]), Op::HalfSqDist(a, b), ng))
    }

    /// `½ Σ (μ² + exp(log σ²) − log σ² − 1)`, the KL divergence of a diagonal
    /// Gaussian to the standard normal, summed over all entries.
    pub fn kl_std_normal(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        self.check_same(mu, log_var, "kl")?;
        let s: f32 = 0.5
            * self
                .value(mu)
                .iter()
                .zip(self.value(log_var))
                .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
                .sum::<f32>();
        let ng = self.ng(mu) || self.ng(log_var);
        Ok(self.push(vec![], Cow::Owned(vec![s]), Op::KlStdNormal { mu, log_var }, ng))
    }

    /// `z = μ + exp(½ log σ²) ⊙ ε` with the noise `ε` held constant.
    pub fn reparameterize(&mut self, mu: Var, log_var: Var, eps: &[f32]) -> Result<Var> {
        self.check_same(mu, log_var, "reparameterize")?;
        if eps.len() != self.value(mu).len() {
            return Err(Error::Dimension(format!(
                "noise of length {} for {:?}",
                eps.len(),
                self.shape(mu)
            )));
        }
        let data = self
            .value(mu)
            .iter()
            .zip(self.value(log_var))
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let shape = self.shape(mu).to_vec();
        let ng = self.ng(mu) || self.ng(log_var);
        Ok(self.push(
            shape,
            Cow::Owned(data),
            Op::Reparam {
                mu,
                log_var,
                eps: eps.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `start..end` of a matrix node.
    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(src));
        if start > end || end > n {
            return Err(Error::Dimension(format!("columns {start}..{end} of {n}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for row in self.value(src).chunks(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let ng = self.ng(src);
        Ok(self.push(vec![m, w], Cow::Owned(data), Op::SliceCols { src, start }, ng))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(src).len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(src)
            )));
        }
        let data = self.value(src).to_vec();
        let ng = self.ng(src);
        Ok(self.push(shape.to_vec(), Cow::Owned(data), Op::Reshape(src), ng))
    }

    /// Stride-1 valid convolution. `x: [N, H, W, C]`, `w: [k·k·C, O]`, `b: [O]`;
    /// output `[N, H−k+1, W−k+1, O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, h, wd, c] = xs[..] else {
            return Err(Error::Dimension(format!("conv input {xs:?} is not NHWC")));
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != kernel * kernel * c || self.shape(b) != [ws[1]] {
            return Err(Error::Dimension(format!(
                "conv weight {ws:?} / bias {:?} for {kernel}x{kernel}x{c} patches",
                self.shape(b)
            )));
        }
        if h < kernel || wd < kernel {
            return Err(Error::Dimension(format!("{h}x{wd} input smaller than kernel")));
        }
        let geom = ConvGeometry {
            batch: n,
            height: h,
            width: wd,
            in_channels: c,
            out_channels: ws[1],
            kernel,
        };
        let cols = kernels::im2col(self.value(x), &geom);
        let cview = ArrayView2::from_shape((geom.out_positions(), geom.patch_len()), &cols)
            .expect("patch matrix");
        let out = kernels::linear(cview, self.view2(w), self.value(b));
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let shape = vec![n, geom.out_height(), geom.out_width(), geom.out_channels];
        let data = out.into_raw_vec_and_offset().0;
        Ok(self.push(shape, Cow::Owned(data), Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, h, w, c] = xs[..] else {
            return Err(Error::Dimension(format!("pool input {xs:?} is not NHWC")));
        };
        let (out, argmax) = kernels::max_pool2(self.value(x), n, h, w, c);
        let ng = self.ng(x);
        Ok(self.push(vec![n, h / 2, w / 2, c], Cow::Owned(out), Op::MaxPool2 { x, argmax }, ng))
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll_mean(&mut self, logp: Var, labels: &[u8]) -> Result<Var> {
        let (m, k) = dims2(self.shape(logp));
        if labels.len() != m || labels.iter().any(|&l| l as usize >= k) {
            return Err(Error::Dimension(format!(
                "{} labels for {m}x{k} log-probabilities",
                labels.len()
            )));
        }
        let v = self.value(logp);
        let s: f32 = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| v[i * k + l as usize])
            .sum::<f32>()
            / m as f32;
        let ng = self.ng(logp);
        Ok(self.push(
            vec![],
            Cow::Owned(vec![s]),
            Op::NllMean {
                logp,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 || !root.shape.is_empty() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.value[0].is_finite() {
            return Err(Error::Numeric(format!("loss is {}", root.value[0])));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (m, n) = dims2(&node.shape);
                let dyv = ArrayView2::from_shape((m, n), dy).expect("dy view");
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    let mut dxv = ArrayViewMut2::from_shape((m, dx.len() / m), dx).expect("dx");
                    kernels::matmul_acc(dyv, self.view2(*w).t(), &mut dxv);
                }
                if let Some(dw) = slot(&self.nodes, grads, *w) {
                    let mut dwv = ArrayViewMut2::from_shape(dims2(self.shape(*w)), dw).expect("dw");
                    kernels::matmul_acc(self.view2(*x).t(), dyv, &mut dwv);
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    for row in dy.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, n) = dims2(&node.shape);
                let dyv = ArrayView2::from_shape((m, n), dy).expect("dy view");
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    let mut dav = ArrayViewMut2::from_shape(dims2(self.shape(*a)), da).expect("da");
                    kernels::matmul_acc(dyv, self.view2(*b).t(), &mut dav);
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    let mut dbv = ArrayViewMut2::from_shape(dims2(self.shape(*b)), db).expect("db");
                    kernels::matmul_acc(self.view2(*a).t(), dyv, &mut dbv);
                }
            }
            Op::Act(x, act) => {
                let cols = dims2(&node.shape).1;
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    act.backward(&node.value, dy, dx, cols);
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for ((d, g), y) in dx.iter_mut().zip(dy).zip(node.value.iter()) {
                        *d += g * y;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    da.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    db.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    da.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    db.iter_mut().zip(dy).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    for ((d, g), y) in da.iter_mut().zip(dy).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    for ((d, g), x) in db.iter_mut().zip(dy).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    da.iter_mut().zip(dy).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::LinComb(terms) => {
                for (v, c) in terms {
                    if let Some(dv) = slot(&self.nodes, grads, *v) {
                        dv.iter_mut().zip(dy).for_each(|(d, g)| *d += c * g);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    da.iter_mut().for_each(|d| *d += dy[0]);
                }
            }
            Op::HalfSqNorm(a) => {
                let va = self.value(*a);
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    da.iter_mut().zip(va).for_each(|(d, x)| *d += dy[0] * x);
                }
            }
            Op::HalfSqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    for ((d, x), y) in da.iter_mut().zip(va).zip(vb) {
                        *d += dy[0] * (x - y);
                    }
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    for ((d, x), y) in db.iter_mut().zip(va).zip(vb) {
                        *d -= dy[0] * (x - y);
                    }
                }
            }
            Op::KlStdNormal { mu, log_var } => {
                let (vm, vl) = (self.value(*mu), self.value(*log_var));
                if let Some(dm) = slot(&self.nodes, grads, *mu) {
                    dm.iter_mut().zip(vm).for_each(|(d, m)| *d += dy[0] * m);
                }
                if let Some(dl) = slot(&self.nodes, grads, *log_var) {
                    dl.iter_mut()
                        .zip(vl)
                        .for_each(|(d, lv)| *d += dy[0] * 0.5 * (lv.exp() - 1.0));
                }
            }
            Op::Reparam { mu, log_var, eps } => {
                let vl = self.value(*log_var);
                if let Some(dm) = slot(&self.nodes, grads, *mu) {
                    dm.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if let Some(dl) = slot(&self.nodes, grads, *log_var) {
                    for (((d, g), lv), e) in dl.iter_mut().zip(dy).zip(vl).zip(eps) {
                        *d += g * e * 0.5 * (0.5 * lv).exp();
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let w = dims2(&node.shape).1;
                let n = dims2(self.shape(*src)).1;
                if let Some(ds) = slot(&self.nodes, grads, *src) {
                    for (drow, grow) in ds.chunks_mut(n).zip(dy.chunks(w)) {
                        drow[*start..start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Reshape(src) => {
                if let Some(ds) = slot(&self.nodes, grads, *src) {
                    ds.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows, oc, plen) = (geom.out_positions(), geom.out_channels, geom.patch_len());
                let dyv = ArrayView2::from_shape((rows, oc), dy).expect("dy view");
                if let Some(dw) = slot(&self.nodes, grads, *w) {
                    let cview = ArrayView2::from_shape((rows, plen), cols).expect("cols");
                    let mut dwv = ArrayViewMut2::from_shape((plen, oc), dw).expect("dw");
                    kernels::matmul_acc(cview.t(), dyv, &mut dwv);
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    for row in dy.chunks(oc) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = ndarray::Array2::<f32>::zeros((rows, plen));
                    kernels::matmul_acc(dyv, self.view2(*w).t(), &mut dcols.view_mut());
                    if let Some(dx) = slot(&self.nodes, grads, *x) {
                        kernels::col2im_acc(dcols.as_slice().expect("contiguous"), geom, dx);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for (g, &i) in dy.iter().zip(argmax) {
                        dx[i as usize] += g;
                    }
                }
            }
            Op::NllMean { logp, labels } => {
                let k = dims2(self.shape(*logp)).1;
                let scale = dy[0] / labels.len() as f32;
                if let Some(dl) = slot(&self.nodes, grads, *logp) {
                    for (i, &l) in labels.iter().enumerate() {
                        dl[i * k + l as usize] -= scale;
                    }
                }
            }
        }
    }
}

fn slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// participate in the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let w = t(&[2, 3], &[0.3, -1.0, 2.0, 4.0, 0.0, 1.5]);
        let mut g = Graph::new();
        let v = g.param(&w);
        let s = g.sum(v);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_half_square_norm_is_identity() {
        let w = t(&[3], &[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let v = g.param(&w);
        let s = g.half_sq_norm(v);
        assert_eq!(g.scalar(s), 7.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = t(&[3], &[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let v = g.param(&w);
        let y = g.tanh(v);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = t(&[2], &[1.0, 2.0]);
        let c = t(&[2], &[3.0, 4.0]);
        let mut g = Graph::new();
        let vw = g.param(&w);
        let vc = g.constant_ref(&c);
        let p = g.mul(vw, vc).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(vw).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(vc).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let w = t(&[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.param(&w);
        let e = g.exp(v);
        let d = g.detach(e);
        let p = g.mul(v, d).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        // d/dw [w * stopgrad(exp w)] = exp w
        let expect: Vec<f32> = w.data().iter().map(|x| x.exp()).collect();
        assert_eq!(grads.get(v).unwrap(), expect.as_slice());
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let mut g = Graph::new();
        let (va, vb) = (g.param(&a), g.param(&b));
        assert!(matches!(g.add(va, vb), Err(Error::Dimension(_))));
        assert!(matches!(g.matmul(va, vb), Err(Error::Dimension(_))));
        assert!(g.slice_cols(va, 2, 4).is_err());
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let w = t(&[1], &[f32::INFINITY]);
        let mut g = Graph::new();
        let v = g.param(&w);
        let s = g.sum(v);
        assert!(matches!(g.backward(s), Err(Error::Numeric(_))));
    }
}
