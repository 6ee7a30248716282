use super::conv::{ConvGeometry, Padding};
use super::{Result, Scalar, Tensor, TensorError, BN_EPSILON, LOG_CLAMP};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch-norm uses batch statistics (and updates running stats) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Target of a cross-entropy loss.
#[derive(Clone, Debug, PartialEq)]
pub enum Target<T> {
    /// One class index per row.
    Classes(Vec<usize>),
    /// One distribution per row, `[N, C]`.
    Distribution(Tensor<T>),
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Weight of the newest batch in the exponential moving average.
    pub momentum: f64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
            momentum: 0.1,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    AvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        target: Target<T>,
    },
    KlDivergence {
        student: Var,
        teacher: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of recorded operations. Build one per forward pass, call
/// [`Graph::backward`] on a scalar node, then drop it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
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

/// `(N, C, plane)` for a `[N, C, ...]` tensor.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::Invalid {
            op: "batch_norm",
            msg: format!("expected at least rank 2, got {shape:?}"),
        });
    }
    let plane: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], plane))
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, dilation: (usize, usize), padding: Padding) -> Result<Var> {
        let geom = ConvGeometry::new(self.node(input)?.value.shape(), self.node(weight)?.value.shape(), dilation, padding)?;
        let out = geom.forward(self.value(input).data(), self.value(weight).data());
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(value, Op::Conv2d { input, weight, geom }, rg))
    }

    /// Per-channel batch normalization with affine `gamma`/`beta`. In
    /// [`Mode::Train`] it normalizes with batch statistics and folds them into
    /// `stats`; in [`Mode::Eval`] it uses `stats` unchanged.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, plane) = channel_layout(self.node(input)?.value.shape())?;
        for p in [gamma, beta] {
            if self.node(p)?.value.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    expected: vec![c],
                    found: self.value(p).shape().to_vec(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                expected: vec![c],
                found: vec![stats.mean.len()],
            });
        }
        let count = n * plane;
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: "zero-size batch".into(),
            });
        }
        let x = self.value(input).data();
        let eps = T::from_f64(BN_EPSILON);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let s = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        mean[ch] += lane_sum(s, T::ZERO, |v, _| v).to_f64();
                    }
                }
                for m in mean.iter_mut() {
                    *m /= count as f64;
                }
                for b in 0..n {
                    for ch in 0..c {
                        let s = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        let m = T::from_f64(mean[ch]);
                        var[ch] += lane_sum(s, m, |v, m| (v - m) * (v - m)).to_f64();
                    }
                }
                for v in var.iter_mut() {
                    *v /= count as f64;
                }
                let mom = stats.momentum;
                let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
                for ch in 0..c {
                    stats.mean[ch] = T::from_f64((1.0 - mom) * stats.mean[ch].to_f64() + mom * mean[ch]);
                    stats.var[ch] = T::from_f64((1.0 - mom) * stats.var[ch].to_f64() + mom * var[ch] * unbias);
                }
                (
                    mean.into_iter().map(T::from_f64).collect::<Vec<_>>(),
                    var.into_iter().map(T::from_f64).collect::<Vec<_>>(),
                )
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::ZERO; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                let scale = g[ch] * inv_std[ch];
                let shift = bt[ch] - mean[ch] * scale;
                for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
                    *o = v * scale + shift;
                }
            }
        }
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.needs(x);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                found: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().copied().sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// `[N, C, H, W] -> [N, C]` mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        if shape.len() != 4 || shape[2] == 0 || shape[3] == 0 {
            return Err(TensorError::Invalid {
                op: "global_avg_pool",
                msg: format!("expected [N, C, H>=1, W>=1], got {shape:?}"),
            });
        }
        let plane = shape[2] * shape[3];
        let inv = T::from_f64(1.0 / plane as f64);
        let data = self.value(x).data().chunks(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(vec![shape[0], shape[1]], data)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::AvgPool(x), rg))
    }

    /// `[N, in] · weight[out, in]ᵀ + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.node(input)?.value.shape().to_vec();
        let ws = self.node(weight)?.value.shape().to_vec();
        let bs = self.node(bias)?.value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                expected: vec![xs.get(1).copied().unwrap_or(0)],
                found: ws,
            });
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::ZERO; n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(bias).data());
        }
        T::gemm(n, fin, fout, self.value(input).data(), false, self.value(weight).data(), true, &mut out, true);
        let value = Tensor::new(vec![n, fout], out)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Row-wise softmax of `[N, C]` logits (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("expected [N, C], got {shape:?}"),
            });
        }
        let value = softmax_rows(self.value(x));
        let rg = self.needs(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    fn target_row_check(&self, probs: Var, target: &Target<T>) -> Result<(usize, usize)> {
        let shape = self.node(probs)?.value.shape();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("expected [N, C] predictions, got {shape:?}"),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        match target {
            Target::Classes(idx) => {
                if idx.len() != n {
                    return Err(TensorError::ShapeMismatch {
                        op: "cross_entropy",
                        expected: vec![n],
                        found: vec![idx.len()],
                    });
                }
                if let Some(bad) = idx.iter().find(|&&i| i >= c) {
                    return Err(TensorError::Invalid {
                        op: "cross_entropy",
                        msg: format!("class index {bad} out of range for {c} classes"),
                    });
                }
            }
            Target::Distribution(t) => {
                if t.shape() != shape {
                    return Err(TensorError::ShapeMismatch {
                        op: "cross_entropy",
                        expected: shape.to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok((n, c))
    }

    /// Mean over rows of `−Σ_c target_c · ln(max(p_c, 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, target: Target<T>) -> Result<Var> {
        let (n, c) = self.target_row_check(probs, &target)?;
        let p = self.value(probs).data();
        let clamp = T::from_f64(LOG_CLAMP);
        let mut total = 0.0f64;
        match &target {
            Target::Classes(idx) => {
                for (r, &k) in idx.iter().enumerate() {
                    total -= p[r * c + k].max(clamp).ln().to_f64();
                }
            }
            Target::Distribution(t) => {
                for (&tv, &pv) in t.data().iter().zip(p) {
                    if tv != T::ZERO {
                        total -= (tv * pv.max(clamp).ln()).to_f64();
                    }
                }
            }
        }
        let value = Tensor::scalar(T::from_f64(total / n.max(1) as f64));
        let rg = self.needs(probs);
        Ok(self.push(value, Op::CrossEntropy { probs, target }, rg))
    }

    /// Mean over rows of `Σ_c t_c · ln(t_c / p_c)`; terms with `t_c = 0`
    /// contribute nothing. The teacher receives no gradient.
    pub fn kl_divergence(&mut self, student: Var, teacher: Tensor<T>) -> Result<Var> {
        let target = Target::Distribution(teacher);
        let (n, _) = self.target_row_check(student, &target)?;
        let Target::Distribution(teacher) = target else { unreachable!() };
        let p = self.value(student).data();
        let clamp = T::from_f64(LOG_CLAMP);
        let mut total = 0.0f64;
        for (&tv, &pv) in teacher.data().iter().zip(p) {
            if tv > T::ZERO {
                total += (tv * (tv.ln() - pv.max(clamp).ln())).to_f64();
            }
        }
        let value = Tensor::scalar(T::from_f64(total / n.max(1) as f64));
        let rg = self.needs(student);
        Ok(self.push(value, Op::KlDivergence { student, teacher }, rg))
    }

    /// Reverse-mode sweep from a scalar node. Fails if any gradient is not
    /// finite.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", root.value.shape()),
            });
        }
        if !root.value.all_finite() {
            return Err(TensorError::NonFinite { op: "loss" });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
            if !dy.all_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let (gi, gw) = geom.backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy.data(),
                    self.needs(*input),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, Tensor::new(shape_of(*input), gi)?);
                }
                self.accumulate(grads, *weight, Tensor::new(shape_of(*weight), gw)?);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let x = self.value(*input);
                let (n, c, plane) = channel_layout(x.shape())?;
                let g = self.value(*gamma).data();
                let count = T::from_f64((n * plane) as f64);
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        let (sd, sdx) = dy_sums(&dy.data()[r.clone()], &x.data()[r], mean[ch]);
                        dbeta[ch] += sd;
                        dgamma[ch] += sdx * inv_std[ch];
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![T::ZERO; x.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            let xs = &x.data()[r.clone()];
                            let ds = &dy.data()[r.clone()];
                            let out = &mut dx[r];
                            if *train {
                                // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                                let k = g[ch] * inv_std[ch] / count;
                                for ((o, &d), &xv) in out.iter_mut().zip(ds).zip(xs) {
                                    let xhat = (xv - mean[ch]) * inv_std[ch];
                                    *o = k * (count * d - dbeta[ch] - xhat * dgamma[ch]);
                                }
                            } else {
                                let k = g[ch] * inv_std[ch];
                                for (o, &d) in out.iter_mut().zip(ds) {
                                    *o = k * d;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(shape_of(*gamma), dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(shape_of(*beta), dbeta)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&d, &v)| if v > T::ZERO { d } else { T::ZERO })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = dy.data().iter().zip(vb.data()).map(|(&d, &v)| d * v).collect();
                let gb = dy.data().iter().zip(va.data()).map(|(&d, &v)| d * v).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), dy.data()[0]));
            }
            Op::AvgPool(x) => {
                let shape = shape_of(*x);
                let plane = shape[2] * shape[3];
                let inv = T::from_f64(1.0 / plane as f64);
                let mut g = Vec::with_capacity(plane * dy.len());
                for &d in dy.data() {
                    g.extend(std::iter::repeat_n(d * inv, plane));
                }
                self.accumulate(grads, *x, Tensor::new(shape, g)?);
            }
            Op::Linear { input, weight, bias } => {
                let xs = shape_of(*input);
                let ws = shape_of(*weight);
                let (n, fin, fout) = (xs[0], xs[1], ws[0]);
                if self.needs(*input) {
                    let mut dx = vec![T::ZERO; n * fin];
                    T::gemm(n, fout, fin, dy.data(), false, self.value(*weight).data(), false, &mut dx, false);
                    self.accumulate(grads, *input, Tensor::new(xs, dx)?);
                }
                let mut dw = vec![T::ZERO; fout * fin];
                T::gemm(fout, n, fin, dy.data(), true, self.value(*input).data(), false, &mut dw, false);
                self.accumulate(grads, *weight, Tensor::new(ws, dw)?);
                let mut db = vec![T::ZERO; fout];
                for row in dy.data().chunks(fout) {
                    for (b, &d) in db.iter_mut().zip(row) {
                        *b += d;
                    }
                }
                self.accumulate(grads, *bias, Tensor::new(vec![fout], db)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.shape()[1];
                let mut g = vec![T::ZERO; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(c).zip(y.data().chunks(c)).zip(dy.data().chunks(c)) {
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::CrossEntropy { probs, target } => {
                let p = self.value(*probs);
                let (n, c) = (p.shape()[0], p.shape()[1]);
                let scale = dy.data()[0] / T::from_f64(n as f64);
                let clamp = T::from_f64(LOG_CLAMP);
                let mut g = vec![T::ZERO; p.len()];
                let mut set = |idx: usize, t: T| {
                    let pv = p.data()[idx];
                    if pv >= clamp {
                        g[idx] = -scale * t / pv;
                    }
                };
                match target {
                    Target::Classes(idx) => {
                        for (r, &k) in idx.iter().enumerate() {
                            set(r * c + k, T::ONE);
                        }
                    }
                    Target::Distribution(t) => {
                        for (i, &tv) in t.data().iter().enumerate() {
                            if tv != T::ZERO {
                                set(i, tv);
                            }
                        }
                    }
                }
                self.accumulate(grads, *probs, Tensor::new(p.shape().to_vec(), g)?);
            }
            Op::KlDivergence { student, teacher } => {
                let p = self.value(*student);
                let n = p.shape()[0];
                let scale = dy.data()[0] / T::from_f64(n as f64);
                let clamp = T::from_f64(LOG_CLAMP);
                let g = teacher
                    .data()
                    .iter()
                    .zip(p.data())
                    .map(|(&t, &pv)| if t > T::ZERO && pv >= clamp { -scale * t / pv } else { T::ZERO })
                    .collect();
                self.accumulate(grads, *student, Tensor::new(p.shape().to_vec(), g)?);
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a `[N, C]` tensor, computed with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(row[0], |a, b| a.max(b));
        let mut s = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

const LANES: usize = 8;

/// `Σ f(v, m)` over `xs` with independent partial sums per lane.
fn lane_sum<T: Scalar>(xs: &[T], m: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(v, m);
        }
    }
    let mut total = T::ZERO;
    for &v in tail {
        total += f(v, m);
    }
    acc.iter().fold(total, |t, &a| t + a)
}

/// `(Σ dy, Σ dy·(x − m))` over one channel row.
fn dy_sums<T: Scalar>(dy: &[T], x: &[T], m: T) -> (T, T) {
    let mut sd = [T::ZERO; LANES];
    let mut sdx = [T::ZERO; LANES];
    let n = dy.len() / LANES * LANES;
    for (dc, xc) in dy[..n].chunks_exact(LANES).zip(x[..n].chunks_exact(LANES)) {
        for l in 0..LANES {
            sd[l] += dc[l];
            sdx[l] += dc[l] * (xc[l] - m);
        }
    }
    let (mut a, mut b) = (T::ZERO, T::ZERO);
    for (&d, &xv) in dy[n..].iter().zip(&x[n..]) {
        a += d;
        b += d * (xv - m);
    }
    (sd.iter().fold(a, |t, &v| t + v), sdx.iter().fold(b, |t, &v| t + v))
}
