use super::gemm::{gemm, narrow, widen, widen_into, Operand};
use super::ops::{self, check_labels, check_temperature, col2im, im2col, ConvGeom};
use super::Tensor;
use crate::error::{CrldError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layer behaviour switch for batch normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Flatten(Var),
    SoftmaxT { x: Var, t: f32 },
    CrossEntropy { logits: Var, dlogits: Vec<f64> },
    Kld { student: Var, dstudent: Vec<f64> },
    MaskedMse { x: Var, dx: Vec<f64> },
    Sum(Var),
    Scale(Var, f32),
    Add(Var, Var),
    Mul(Var, Var),
}

struct Node {
    value: Tensor,
    /// Unrounded result of scalar reductions.
    precise: Option<f64>,
    requires_grad: bool,
    op: Op,
}

/// Linear record of operations, replayed in reverse by [`Tape::backward`].
///
/// A tape is single-use: after `backward` it only serves values and grads.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that computes values only; nothing it records needs a gradient.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Value of a one-element node in `f64`. Loss reductions keep their
    /// unrounded accumulator here.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.precise.unwrap_or_else(|| node.value.item() as f64)
    }

    fn push_scalar(&mut self, name: &str, value: f64, inputs: &[Var], op: Op) -> Result<Var> {
        let var = self.push(name, Tensor::scalar(value as f32), inputs, op)?;
        self.nodes[var.0].precise = Some(value);
        Ok(var)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Honors `t.requires_grad` unless gradients are disabled.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad && self.grad_enabled;
        t.grad = None;
        self.push_raw(t, rg, Op::Leaf)
    }

    /// Records a trainable copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut v = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        v.requires_grad = true;
        self.leaf(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let precise = (value.numel() == 1).then(|| value.data()[0] as f64);
        self.nodes.push(Node {
            value,
            precise,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(CrldError::NonFinite(name.to_string()));
        }
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // values-only nodes drop their backward caches
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_raw(value, rg, op))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(CrldError::StaleTape)
        } else {
            Ok(())
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(CrldError::shape(
                "matmul",
                format!("inner extents {k} and {k2} differ"),
            ));
        }
        let aw = widen(self.value(a).data());
        let bw = widen(self.value(b).data());
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, Operand::plain(&aw), Operand::plain(&bw), 0.0, &mut c);
        let out = Tensor::new(vec![m, n], narrow(&c))?;
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    /// Adds a length-`N` bias to every row of an `M×N` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_open()?;
        let (_, n) = self.value(x).dims2("add_bias")?;
        if self.value(bias).numel() != n {
            return Err(CrldError::shape(
                "add_bias",
                format!("bias of {} for {n} columns", self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        out.grad = None;
        out.requires_grad = false;
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(o, &bb)| *o += bb);
        }
        self.push("add_bias", out, &[x, bias], Op::AddBias(x, bias))
    }

    /// 3×3 cross-correlation with zero padding 1.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.check_open()?;
        if stride != 1 && stride != 2 {
            return Err(CrldError::InvalidArgument(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let [n, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [k, c2, kh, kw] = self.value(w).dims4("conv2d")?;
        if c != c2 || kh != 3 || kw != 3 {
            return Err(CrldError::shape(
                "conv2d",
                format!("input has {c} channels, kernel is {k}×{c2}×{kh}×{kw}"),
            ));
        }
        let geom = ConvGeom::new(c, h, wd, stride);
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let ww = widen(self.value(w).data());
        let xs = self.value(x).data();
        let mut cols = vec![0.0f64; cr * cc];
        let mut acc = vec![0.0f64; k * cc];
        let mut out = Vec::with_capacity(n * k * cc);
        let mut xi = vec![0.0f64; c * h * wd];
        for i in 0..n {
            widen_into(&xs[i * c * h * wd..(i + 1) * c * h * wd], &mut xi);
            im2col(&xi, &geom, &mut cols);
            gemm(k, cr, cc, Operand::plain(&ww), Operand::plain(&cols), 0.0, &mut acc);
            out.extend(acc.iter().map(|&v| v as f32));
        }
        let out = Tensor::new(vec![n, k, geom.oh, geom.ow], out)?;
        self.push("conv2d", out, &[x, w], Op::Conv2d { x, w, geom })
    }

    // ---- normalisation and activations ---------------------------------

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.batchnorm_train(x, gamma, beta, state),
            Mode::Eval => self.batchnorm_eval(x, gamma, beta, state),
        }
    }

    /// `(N, C, S)` view of an `N×C×…` tensor.
    fn channel_layout(&self, x: Var, channels: usize) -> Result<(usize, usize)> {
        let shape = self.value(x).shape();
        if shape.len() < 2 || shape[1] != channels {
            return Err(CrldError::shape(
                "batchnorm",
                format!("input {shape:?} for {channels} channels"),
            ));
        }
        Ok((shape[0], shape[2..].iter().product()))
    }

    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
    ) -> Result<Var> {
        self.check_open()?;
        let ch = self.value(gamma).numel();
        let (n, s) = self.channel_layout(x, ch)?;
        let m = n * s;
        if m < 2 {
            return Err(CrldError::InvalidArgument(format!(
                "train-mode batchnorm needs at least 2 values per channel, got {m}"
            )));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0f64; ch];
        let mut var = vec![0.0f64; ch];
        for c in 0..ch {
            let mut sum = 0.0;
            for i in 0..n {
                sum += xs[(i * ch + c) * s..(i * ch + c + 1) * s]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mu = sum / m as f64;
            let mut sq = 0.0;
            for i in 0..n {
                sq += xs[(i * ch + c) * s..(i * ch + c + 1) * s]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[c] = mu;
            var[c] = sq / m as f64;
        }
        let eps = state.eps as f64;
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, s, ch)?;
        let mom = state.momentum as f64;
        let unbias = m as f64 / (m as f64 - 1.0);
        for c in 0..ch {
            let rm = state.running_mean[c] as f64;
            let rv = state.running_var[c] as f64;
            state.running_mean[c] = ((1.0 - mom) * rm + mom * mean[c]) as f32;
            state.running_var[c] = ((1.0 - mom) * rv + mom * var[c] * unbias) as f32;
        }
        self.push(
            "batchnorm",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
        )
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
    ) -> Result<Var> {
        self.check_open()?;
        let ch = self.value(gamma).numel();
        let (n, s) = self.channel_layout(x, ch)?;
        let mean: Vec<f64> = state.running_mean.iter().map(|&v| v as f64).collect();
        let eps = state.eps as f64;
        let inv_std: Vec<f64> = state
            .running_var
            .iter()
            .map(|&v| 1.0 / (v as f64 + eps).sqrt())
            .collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, s, ch)?;
        self.push(
            "batchnorm",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        s: usize,
        ch: usize,
    ) -> Result<(Tensor, Vec<f64>)> {
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let keep_xhat = self.grad_enabled;
        let mut xhat = if keep_xhat { vec![0.0; xs.len()] } else { Vec::new() };
        let mut out = vec![0.0f32; xs.len()];
        for i in 0..n {
            for c in 0..ch {
                let base = (i * ch + c) * s;
                for j in base..base + s {
                    let h = (xs[j] as f64 - mean[c]) * inv_std[c];
                    if keep_xhat {
                        xhat[j] = h;
                    }
                    out[j] = (g[c] as f64 * h + b[c] as f64) as f32;
                }
            }
        }
        Ok((Tensor::new(self.value(x).shape().to_vec(), out)?, xhat))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let mut out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().to_vec(),
        )?;
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push("relu", out, &[x], Op::Relu(x))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let xs = self.value(x).data();
        let out: Vec<f32> = xs
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", out, &[x], Op::GlobalAvgPool(x))
    }

    /// `N×… → N×(rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        let out = Tensor::new(vec![n, rest], self.value(x).data().to_vec())?;
        self.push("flatten", out, &[x], Op::Flatten(x))
    }

    pub fn softmax_t(&mut self, x: Var, t: f32) -> Result<Var> {
        self.check_open()?;
        let out = ops::softmax_t(self.value(x), t)?;
        self.push("softmax_t", out, &[x], Op::SoftmaxT { x, t })
    }

    // ---- losses --------------------------------------------------------

    /// Batch-mean cross-entropy at temperature 1.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_open()?;
        let (rows, cols) = self.value(logits).dims2("cross_entropy")?;
        check_labels(labels, rows, cols)?;
        let ls = ops::log_softmax_rows(self.value(logits), 1.0)?;
        let mut loss = 0.0f64;
        let mut d = vec![0.0f64; rows * cols];
        for (r, &y) in labels.iter().enumerate() {
            loss -= ls[r * cols + y];
            for c in 0..cols {
                let p = ls[r * cols + c].exp();
                d[r * cols + c] = (p - if c == y { 1.0 } else { 0.0 }) / rows as f64;
            }
        }
        self.push_scalar(
            "cross_entropy",
            loss / rows as f64,
            &[logits],
            Op::CrossEntropy { logits, dlogits: d },
        )
    }

    /// Masked temperature KL divergence, teacher treated as a constant:
    /// `Σ_b mask_b · T² · KL(softmax_T(teacher_b) ‖ softmax_T(student_b)) / B`.
    pub fn kld(&mut self, student: Var, teacher: &Tensor, t: f32, mask: &[f32]) -> Result<Var> {
        self.check_open()?;
        check_temperature(t)?;
        let s = self.value(student);
        if s.shape() != teacher.shape() {
            return Err(CrldError::shape(
                "kld",
                format!("student {:?} vs teacher {:?}", s.shape(), teacher.shape()),
            ));
        }
        let (rows, cols) = s.dims2("kld")?;
        if mask.len() != rows {
            return Err(CrldError::shape(
                "kld",
                format!("mask of {} for batch of {rows}", mask.len()),
            ));
        }
        let per = ops::kld_per_instance(s, teacher, t)?;
        let ps = ops::softmax_rows_f64(s, t)?;
        let pt = ops::softmax_rows_f64(teacher, t)?;
        let b = rows as f64;
        let tf = t as f64;
        let mut loss = 0.0f64;
        let mut d = vec![0.0f64; rows * cols];
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            let m = mask[r] as f64;
            loss += m * per[r];
            let scale = tf * m / b;
            for c in 0..cols {
                d[r * cols + c] = scale * (ps[r * cols + c] - pt[r * cols + c]);
            }
        }
        self.push_scalar("kld", loss / b, &[student], Op::Kld { student, dstudent: d })
    }

    /// `Σ_b mask_b · mean_d (x_bd − target_bd)² / B`, target constant.
    pub fn masked_mse(&mut self, x: Var, target: &Tensor, mask: &[f32]) -> Result<Var> {
        self.check_open()?;
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(CrldError::shape(
                "masked_mse",
                format!("input {:?} vs target {:?}", xv.shape(), target.shape()),
            ));
        }
        let (rows, dim) = xv.dims2("masked_mse")?;
        if mask.len() != rows {
            return Err(CrldError::shape(
                "masked_mse",
                format!("mask of {} for batch of {rows}", mask.len()),
            ));
        }
        let b = rows as f64;
        let mut loss = 0.0f64;
        let mut d = vec![0.0f64; rows * dim];
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            let m = mask[r] as f64;
            let mut sq = 0.0;
            for j in 0..dim {
                let diff = xv.data()[r * dim + j] as f64 - target.data()[r * dim + j] as f64;
                sq += diff * diff;
                d[r * dim + j] = m * 2.0 * diff / (dim as f64 * b);
            }
            loss += m * sq / dim as f64;
        }
        self.push_scalar("masked_mse", loss / b, &[x], Op::MaskedMse { x, dx: d })
    }

    // ---- elementwise glue ----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let s: f64 = if self.value(x).numel() == 1 {
            self.scalar(x)
        } else {
            self.value(x).data().iter().map(|&v| v as f64).sum()
        };
        self.push_scalar("sum", s, &[x], Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.check_open()?;
        let v = self.value(x);
        if v.numel() == 1 {
            let s = self.scalar(x) * c as f64;
            return self.push_scalar("scale", s, &[x], Op::Scale(x, c));
        }
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect())?;
        self.push("scale", out, &[x], Op::Scale(x, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(CrldError::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        if va.numel() == 1 {
            let s = self.scalar(a) + self.scalar(b);
            return self.push_scalar("add", s, &[a, b], Op::Add(a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(CrldError::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    // ---- reverse pass --------------------------------------------------

    /// Populates gradients of the scalar `loss` for every reachable node
    /// that requires one. Nodes are visited in exact reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(CrldError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..count).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .map(|g| g.map(|v| narrow(&v)))
            .collect();
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let (_, n) = val(*b).dims2("matmul")?;
                if self.needs(*a) {
                    let bw = widen(val(*b).data());
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, Operand::plain(g), Operand::t(&bw), 0.0, &mut da);
                    accumulate_owned(grads, *a, da);
                }
                if self.needs(*b) {
                    let aw = widen(val(*a).data());
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, Operand::t(&aw), Operand::plain(g), 0.0, &mut db);
                    accumulate_owned(grads, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
                if self.needs(*bias) {
                    let n = val(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate_owned(grads, *bias, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let [n, c, h, wd] = val(*x).dims4("conv2d")?;
                let k = val(*w).shape()[0];
                let (cr, cc) = (geom.col_rows(), geom.col_cols());
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let xs = val(*x).data();
                let ww = widen(val(*w).data());
                let mut cols = vec![0.0f64; cr * cc];
                let mut dcols = vec![0.0f64; cr * cc];
                let mut dw = vec![0.0f64; k * cr];
                let mut dx = if need_x { vec![0.0f64; xs.len()] } else { Vec::new() };
                let img = c * h * wd;
                let mut xi = vec![0.0f64; img];
                for i in 0..n {
                    let gi = &g[i * k * cc..(i + 1) * k * cc];
                    if need_w {
                        widen_into(&xs[i * img..(i + 1) * img], &mut xi);
                        im2col(&xi, geom, &mut cols);
                        gemm(k, cc, cr, Operand::plain(gi), Operand::t(&cols), 1.0, &mut dw);
                    }
                    if need_x {
                        gemm(cr, k, cc, Operand::t(&ww), Operand::plain(gi), 0.0, &mut dcols);
                        col2im(&dcols, geom, &mut dx[i * img..(i + 1) * img]);
                    }
                }
                if need_w {
                    accumulate_owned(grads, *w, dw);
                }
                if need_x {
                    accumulate_owned(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let ch = val(*gamma).numel();
                let shape = val(*x).shape();
                let (n, s) = (shape[0], shape[2..].iter().product::<usize>());
                let m = (n * s) as f64;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0f64; ch];
                let mut dbeta = vec![0.0f64; ch];
                for i in 0..n {
                    for c in 0..ch {
                        let base = (i * ch + c) * s;
                        for j in base..base + s {
                            dbeta[c] += g[j];
                            dgamma[c] += g[j] * xhat[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0f64; g.len()];
                    for i in 0..n {
                        for c in 0..ch {
                            let base = (i * ch + c) * s;
                            let scale = gam[c] as f64 * inv_std[c];
                            for j in base..base + s {
                                dx[j] = if *batch_stats {
                                    scale * (g[j] - dbeta[c] / m - xhat[j] * dgamma[c] / m)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    accumulate_owned(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate_owned(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    accumulate_owned(grads, *beta, dbeta);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate_owned(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).dims4("global_avg_pool")?;
                let hw = h * w;
                let mut dx = vec![0.0f64; val(*x).numel()];
                for (chunk, &gv) in dx.chunks_mut(hw).zip(g) {
                    chunk.fill(gv / hw as f64);
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::Flatten(x) => accumulate(grads, *x, g),
            Op::SoftmaxT { x, t } => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0f64; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv as f64 * (gv - dot) / *t as f64;
                    }
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::CrossEntropy { logits, dlogits } => {
                accumulate_scaled(grads, *logits, dlogits, g[0]);
            }
            Op::Kld { student, dstudent } => {
                accumulate_scaled(grads, *student, dstudent, g[0]);
            }
            Op::MaskedMse { x, dx } => accumulate_scaled(grads, *x, dx, g[0]),
            Op::Sum(x) => {
                let dx = vec![g[0]; val(*x).numel()];
                accumulate_owned(grads, *x, dx);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|&v| v * *c as f64).collect();
                accumulate_owned(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(val(*b).data())
                        .map(|(&gv, &bv)| gv * bv as f64)
                        .collect();
                    accumulate_owned(grads, *a, d);
                }
                if self.needs(*b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&gv, &av)| gv * av as f64)
                        .collect();
                    accumulate_owned(grads, *b, d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(d).for_each(|(b, &x)| *b += x),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Like [`accumulate`] but moves `d` into an empty slot.
fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&d).for_each(|(b, &x)| *b += x),
        slot @ None => *slot = Some(d),
    }
}

fn accumulate_scaled(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64], s: f64) {
    let scaled: Vec<f64> = d.iter().map(|&x| x * s).collect();
    accumulate_owned(grads, v, scaled);
}
