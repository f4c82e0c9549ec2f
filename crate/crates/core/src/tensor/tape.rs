use super::kernels::{self, BatchStats, BnGeom, BnMode, BnSaved, ConvGeom, PoolGeom};
use super::{config_err, shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Relu { x: Var },
    Linear { x: Var, w: Var, b: Var },
    GlobalAvgPool { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    KlDiv { student: Var, p_teacher: Vec<T>, p_student: Vec<T>, tau: T },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    finite: bool,
}

/// Records operations in evaluation order; `backward` replays them in reverse.
///
/// Node indices are a topological order by construction, since every op's
/// inputs are recorded before it. Leaf gradients persist across `backward`
/// calls until [`Tape::zero_grad`].
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Enables or disables the non-finite output check (on by default in debug builds).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records a leaf; gradients are tracked when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        let finite = tensor.all_finite();
        let shape = tensor.shape().to_vec();
        let value = Tensor::new(&shape, tensor.into_data()).expect("consistent tensor");
        self.push_node(value, Op::Leaf, requires_grad, finite)
    }

    /// Records a copy of `tensor` (without its gradient buffer).
    pub fn leaf_ref(&mut self, tensor: &Tensor<T>) -> Var {
        let value = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("consistent tensor");
        self.leaf(value.with_requires_grad(tensor.requires_grad))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone().with_requires_grad(false);
        self.leaf(t)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, finite: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, finite });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: &[usize],
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
        let value = Tensor::new(shape, data)?;
        let finite = inputs_finite && (!self.check_finite || value.all_finite());
        if self.check_finite && inputs_finite && !finite {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push_node(value, op, requires_grad, finite))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_c] {
                return Err(shape_err("conv2d", format!("bias shape {:?}, expected [{}]", self.shape(b), geom.out_c)));
            }
        }
        let out = kernels::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", &geom.out_shape(), out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Per-channel batch normalization over (B, H, W). In train mode the
    /// batch statistics are returned for the caller's running-stat update.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("batchnorm2d", format!("expected 4-d input, got {shape:?}")));
        }
        let c = shape[1];
        for (name, s) in [("gamma", self.shape(gamma)), ("beta", self.shape(beta))] {
            if s != [c] {
                return Err(shape_err("batchnorm2d", format!("{name} shape {s:?}, expected [{c}]")));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batchnorm2d", "running statistics do not match channel count"));
        }
        if eps.to_f64() <= 0.0 {
            return Err(config_err("batchnorm2d", "epsilon must be positive"));
        }
        let geom = BnGeom { batch: shape[0], channels: c, plane: shape[2] * shape[3] };
        let (saved, stats) = match mode {
            BnMode::Train => {
                let count = shape[0] * shape[2] * shape[3];
                if count < 2 {
                    return Err(TensorError::DegenerateBatch { count });
                }
                let (saved, stats) = kernels::batchnorm_train_stats(self.data(x), &geom, eps);
                (saved, Some(stats))
            }
            BnMode::Eval => (kernels::batchnorm_eval_stats(running_mean, running_var, eps), None),
        };
        let y = kernels::batchnorm_apply(self.data(x), &geom, &saved, self.data(gamma), self.data(beta));
        let v = self.push("batchnorm2d", &shape, y, Op::BatchNorm { x, gamma, beta, saved }, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = self.data(x).iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", &shape, y, Op::Relu { x }, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (batch, f_in, f_out) = (xs[0], xs[1], ws[0]);
        let y = kernels::linear_forward(self.data(x), self.data(w), self.data(b), batch, f_in, f_out);
        self.push("linear", &[batch, f_out], y, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(shape_err("global_avg_pool", format!("expected [B,C,H,W] with H,W >= 1, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let denom = T::from_usize(plane);
        let y = self.data(x).chunks(plane).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        self.push("global_avg_pool", &[s[0], s[1]], y, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let g = PoolGeom::new(self.shape(x), k, stride)?;
        let (y, argmax) = kernels::max_pool_forward(self.data(x), &g);
        self.push("max_pool2d", &[g.batch, g.channels, g.out_h, g.out_w], y, Op::MaxPool { x, argmax }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let y = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", &shape, y, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let y = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p * q).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", &shape, y, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let y = self.data(x).iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", &shape, y, Op::Scale { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = vec![self.data(x).iter().copied().sum::<T>()];
        self.push("sum", &[], y, Op::Sum { x }, &[x])
    }

    fn check_logits(&self, op: &'static str, logits: Var) -> Result<(usize, usize), TensorError> {
        match *self.shape(logits) {
            [b, k] if b >= 1 && k >= 1 => Ok((b, k)),
            ref s => Err(shape_err(op, format!("expected [B,K] logits, got {s:?}"))),
        }
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (batch, classes) = self.check_logits("cross_entropy", logits)?;
        if labels.len() != batch {
            return Err(shape_err("cross_entropy", format!("{} labels for batch of {batch}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Label { op: "cross_entropy", label, classes });
        }
        let logp = kernels::log_softmax_rows(self.data(logits), classes, T::ONE);
        let total: T = labels.iter().enumerate().map(|(i, &y)| -logp[i * classes + y]).sum();
        let probs = logp.iter().map(|v| v.exp()).collect();
        let loss = total / T::from_usize(batch);
        self.push(
            "cross_entropy",
            &[],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// `tau^2 * mean_b KL(softmax(teacher/tau) || softmax(student/tau))`.
    ///
    /// The teacher side is a constant target: no gradient flows into it.
    pub fn kl_div(&mut self, teacher: Var, student: Var, tau: T) -> Result<Var, TensorError> {
        let (batch, classes) = self.check_logits("kl_div", student)?;
        self.same_shape("kl_div", teacher, student)?;
        if tau.to_f64() <= 0.0 {
            return Err(config_err("kl_div", "temperature must be positive"));
        }
        let lp_t = kernels::log_softmax_rows(self.data(teacher), classes, tau);
        let lp_s = kernels::log_softmax_rows(self.data(student), classes, tau);
        let mut total = T::ZERO;
        for (rt, rs) in lp_t.chunks(classes).zip(lp_s.chunks(classes)) {
            let row: T = rt.iter().zip(rs).map(|(&a, &b)| a.exp() * (a - b)).sum();
            // KL >= 0; negative values are rounding residue.
            total += row.max(T::ZERO);
        }
        let loss = tau * tau * total / T::from_usize(batch);
        let p_teacher = lp_t.iter().map(|v| v.exp()).collect();
        let p_student = lp_s.iter().map(|v| v.exp()).collect();
        let inputs = [student];
        let v = self.push("kl_div", &[], vec![loss], Op::KlDiv { student, p_teacher, p_student, tau }, &inputs)?;
        Ok(v)
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if !shape.is_empty() && shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, delta: Vec<T>| match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
            slot @ None => *slot = Some(delta),
        };
        match &nodes[i].op {
            Op::Leaf => match &mut self.leaf_grads[i] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, d)| *a += *d),
                slot @ None => *slot = Some(g.to_vec()),
            },
            Op::Conv2d { x, w, b, geom } => {
                if needs(*x) {
                    send(*x, kernels::conv2d_backward_input(nodes[w.0].value.data(), g, geom));
                }
                if needs(*w) {
                    send(*w, kernels::conv2d_backward_weight(nodes[x.0].value.data(), g, geom));
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    send(b, kernels::conv2d_backward_bias(g, geom));
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let s = nodes[x.0].value.shape();
                let geom = BnGeom { batch: s[0], channels: s[1], plane: s[2] * s[3] };
                let (dx, dg, db) =
                    kernels::batchnorm_backward(nodes[x.0].value.data(), g, &geom, saved, nodes[gamma.0].value.data());
                if needs(*x) {
                    send(*x, dx);
                }
                if needs(*gamma) {
                    send(*gamma, dg);
                }
                if needs(*beta) {
                    send(*beta, db);
                }
            }
            Op::Relu { x } => {
                let dx = nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > T::ZERO { d } else { T::ZERO })
                    .collect();
                send(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (batch, f_in) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let f_out = nodes[w.0].value.shape()[0];
                if needs(*x) {
                    let mut dx = vec![T::ZERO; batch * f_in];
                    super::gemm(
                        batch,
                        f_out,
                        f_in,
                        T::ONE,
                        g,
                        super::Layout::N,
                        nodes[w.0].value.data(),
                        super::Layout::N,
                        T::ZERO,
                        &mut dx,
                    );
                    send(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![T::ZERO; f_out * f_in];
                    super::gemm(
                        f_out,
                        batch,
                        f_in,
                        T::ONE,
                        g,
                        super::Layout::T,
                        nodes[x.0].value.data(),
                        super::Layout::N,
                        T::ZERO,
                        &mut dw,
                    );
                    send(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![T::ZERO; f_out];
                    for row in g.chunks(f_out) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                    }
                    send(*b, db);
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                let denom = T::from_usize(plane);
                let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d / denom, plane)).collect();
                send(*x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::ZERO; nodes[x.0].value.numel()];
                for (&idx, &d) in argmax.iter().zip(g) {
                    dx[idx] += d;
                }
                send(*x, dx);
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    send(*a, g.to_vec());
                }
                if needs(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    send(*a, g.iter().zip(nodes[b.0].value.data()).map(|(&d, &v)| d * v).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(nodes[a.0].value.data()).map(|(&d, &v)| d * v).collect());
                }
            }
            Op::Scale { x, c } => send(*x, g.iter().map(|&d| *c * d).collect()),
            Op::Sum { x } => send(*x, vec![g[0]; nodes[x.0].value.numel()]),
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = nodes[logits.0].value.shape()[1];
                let k = g[0] / T::from_usize(labels.len());
                let mut dx: Vec<T> = probs.iter().map(|&p| k * p).collect();
                for (row, &y) in labels.iter().enumerate() {
                    dx[row * classes + y] -= k;
                }
                send(*logits, dx);
            }
            Op::KlDiv { student, p_teacher, p_student, tau } => {
                let batch = nodes[student.0].value.shape()[0];
                let k = g[0] * *tau / T::from_usize(batch);
                let dx = p_student.iter().zip(p_teacher).map(|(&s, &t)| k * (s - t)).collect();
                send(*student, dx);
            }
        }
    }
}
