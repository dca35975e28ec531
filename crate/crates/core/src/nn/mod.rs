//! Desk-scale teacher and student networks.
//!
//! A `small_cnn` is a stack of stages, each a run of `conv3×3 → batchnorm →
//! relu` blocks, the first block of every stage after the first halving the
//! resolution. Global average pooling feeds a linear classifier. The `mlp`
//! variant flattens the image and applies `linear → relu` per stage.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{Schedule, Sgd};

use std::fmt;
use std::str::FromStr;

use crate::error::{CrldError, Result};
use crate::rng::{Lane, RngStream};
use crate::tensor::{BatchNormState, Mode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    SmallCnn,
    Mlp,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::SmallCnn => "small_cnn",
            Arch::Mlp => "mlp",
        })
    }
}

impl FromStr for Arch {
    type Err = CrldError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(Arch::SmallCnn),
            "mlp" => Ok(Arch::Mlp),
            other => Err(CrldError::Config(format!("unknown arch {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    /// `(H, W)`.
    pub input_size: (usize, usize),
}

impl ModelConfig {
    pub fn teacher(num_classes: usize, input_size: (usize, usize)) -> Self {
        ModelConfig {
            arch: Arch::SmallCnn,
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: 2,
            num_classes,
            input_size,
        }
    }

    pub fn student(num_classes: usize, input_size: (usize, usize)) -> Self {
        ModelConfig {
            arch: Arch::SmallCnn,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            num_classes,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrldError::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad(format!("stage channels {:?}", self.stage_channels));
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        let (h, w) = self.input_size;
        let min = 1usize << (self.stage_channels.len() - 1);
        if h < min || w < min {
            return bad(format!(
                "input {h}x{w} too small for {} downsampling stages",
                self.stage_channels.len() - 1
            ));
        }
        Ok(())
    }

    /// Width of the pooled feature feeding the classifier.
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    ConvBnRelu {
        conv: usize,
        gamma: usize,
        beta: usize,
        bn: usize,
        stride: usize,
    },
    Linear {
        weight: usize,
        bias: usize,
        relu: bool,
    },
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    /// Pooled features; exactly the classifier's input.
    pub pool_feat: Var,
    /// One handle per parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<Param>,
    bn: Vec<(String, BatchNormState)>,
    layers: Vec<Layer>,
}

fn normal_tensor(shape: &[usize], std: f64, seed: u64, index: u64) -> Tensor {
    let mut rng = RngStream::new(seed, Lane::Init, 0, index);
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = (rng.normal() * std) as f32);
    t
}

impl Model {
    /// Builds a freshly initialised model. Weights use fan-in scaled normal
    /// draws; batch-norm scales start at 1 and every shift and bias at 0.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut m = Model {
            cfg: cfg.clone(),
            params: Vec::new(),
            bn: Vec::new(),
            layers: Vec::new(),
        };
        let (h, w) = cfg.input_size;
        match cfg.arch {
            Arch::SmallCnn => {
                let mut c_in = 3;
                for (s, &c) in cfg.stage_channels.iter().enumerate() {
                    for b in 0..cfg.blocks_per_stage {
                        let prefix = format!("stage{s}.block{b}");
                        let fan_in = (c_in * 9) as f64;
                        let conv = m.push_param(
                            format!("{prefix}.conv.weight"),
                            normal_tensor(&[c, c_in, 3, 3], (2.0 / fan_in).sqrt(), seed, m.params.len() as u64),
                            true,
                        );
                        let gamma = m.push_param(format!("{prefix}.bn.weight"), Tensor::full(&[c], 1.0), false);
                        let beta = m.push_param(format!("{prefix}.bn.bias"), Tensor::zeros(&[c]), false);
                        m.bn.push((format!("{prefix}.bn"), BatchNormState::new(c)));
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        m.layers.push(Layer::ConvBnRelu {
                            conv,
                            gamma,
                            beta,
                            bn: m.bn.len() - 1,
                            stride,
                        });
                        c_in = c;
                    }
                }
            }
            Arch::Mlp => {
                let mut d_in = 3 * h * w;
                for (s, &d) in cfg.stage_channels.iter().enumerate() {
                    for b in 0..cfg.blocks_per_stage {
                        let prefix = format!("stage{s}.block{b}.linear");
                        m.push_linear(&prefix, d_in, d, (2.0 / d_in as f64).sqrt(), true, seed);
                        d_in = d;
                    }
                }
            }
        }
        let d = cfg.feature_dim();
        m.push_linear("fc", d, cfg.num_classes, (1.0 / d as f64).sqrt(), false, seed);
        Ok(m)
    }

    fn push_param(&mut self, name: String, value: Tensor, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    fn push_linear(&mut self, prefix: &str, d_in: usize, d_out: usize, std: f64, relu: bool, seed: u64) {
        let weight = self.push_param(
            format!("{prefix}.weight"),
            normal_tensor(&[d_in, d_out], std, seed, self.params.len() as u64),
            true,
        );
        let bias = self.push_param(format!("{prefix}.bias"), Tensor::zeros(&[d_out]), true);
        self.layers.push(Layer::Linear { weight, bias, relu });
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bn_states(&self) -> impl Iterator<Item = (&str, &BatchNormState)> {
        self.bn.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records a forward pass of the `N×3×H×W` batch `x` on `tape`. In train
    /// mode batch-norm layers use and update batch statistics.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<ModelOutput> {
        let (params, layers, cfg) = (&self.params, &self.layers, &self.cfg);
        run(cfg, params, layers, &mut self.bn, tape, x, mode)
    }

    /// Eval-mode logits and pooled features without recording gradients.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let mut bn = self.bn.clone();
        let out = run(&self.cfg, &self.params, &self.layers, &mut bn, &mut tape, xv, Mode::Eval)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.pool_feat).clone()))
    }

    /// Copies the gradients of a finished backward pass into the parameters.
    /// Parameters the loss never reached receive zeros.
    pub fn absorb_grads(&mut self, tape: &Tape, out: &ModelOutput) {
        absorb_params(&mut self.params, tape, &out.params);
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Every parameter and running statistic as named tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.grad = None;
                t.requires_grad = false;
                (p.name.clone(), t)
            })
            .collect();
        for (name, st) in &self.bn {
            let c = st.running_mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![c], st.running_mean.clone()).expect("channel vector"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(vec![c], st.running_var.clone()).expect("channel vector"),
            ));
        }
        out
    }

    /// Overwrites parameters and running statistics from `ck`. Either every
    /// tensor is found with the right shape or `self` is left untouched.
    pub fn load_tensors(&mut self, ck: &Checkpoint) -> Result<()> {
        let expected = self.named_tensors();
        let mut found = Vec::with_capacity(expected.len());
        for (name, t) in &expected {
            let src = ck
                .get(name)
                .ok_or_else(|| CrldError::Format(format!("checkpoint lacks tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(CrldError::TensorMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            found.push(src.data().to_vec());
        }
        let mut it = found.into_iter();
        for p in &mut self.params {
            p.value.data_mut().copy_from_slice(&it.next().expect("counted"));
        }
        for (_, st) in &mut self.bn {
            st.running_mean = it.next().expect("counted");
            st.running_var = it.next().expect("counted");
        }
        Ok(())
    }
}

/// Adds each handle's tape gradient (zeros if none flowed) into the matching
/// parameter's gradient buffer.
pub fn absorb_params<'a>(params: impl IntoIterator<Item = &'a mut Param>, tape: &Tape, vars: &[Var]) {
    for (p, &v) in params.into_iter().zip(vars) {
        match tape.grad(v) {
            Some(g) => p.value.accumulate_grad(g),
            None => p.value.accumulate_grad(&vec![0.0; p.value.numel()]),
        }
    }
}

fn run(
    cfg: &ModelConfig,
    params: &[Param],
    layers: &[Layer],
    bn: &mut [(String, BatchNormState)],
    tape: &mut Tape,
    x: Var,
    mode: Mode,
) -> Result<ModelOutput> {
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = cfg.input_size;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
        return Err(CrldError::shape(
            "model input",
            format!("expected N×3×{h}×{w}, got {shape:?}"),
        ));
    }
    let pv: Vec<Var> = params.iter().map(|p| tape.param(&p.value)).collect();
    let mut y = x;
    let mut feat = None;
    if cfg.arch == Arch::Mlp {
        y = tape.flatten(y)?;
    }
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            Layer::ConvBnRelu {
                conv,
                gamma,
                beta,
                bn: b,
                stride,
            } => {
                y = tape.conv2d(y, pv[conv], stride)?;
                y = tape.batchnorm(y, pv[gamma], pv[beta], &mut bn[b].1, mode)?;
                y = tape.relu(y)?;
            }
            Layer::Linear { weight, bias, relu } => {
                if i == last {
                    if cfg.arch == Arch::SmallCnn {
                        y = tape.global_avg_pool(y)?;
                    }
                    feat = Some(y);
                }
                y = tape.matmul(y, pv[weight])?;
                y = tape.add_bias(y, pv[bias])?;
                if relu {
                    y = tape.relu(y)?;
                }
            }
        }
    }
    Ok(ModelOutput {
        logits: y,
        pool_feat: feat.expect("classifier is the last layer"),
        params: pv,
    })
}

/// Trainable linear map from student to teacher feature width, used by the
/// feature-space consistency variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    pub weight: Param,
    pub bias: Param,
}

impl Regressor {
    pub fn new(name: &str, d_in: usize, d_out: usize, seed: u64, index: u64) -> Self {
        Regressor {
            weight: Param {
                name: format!("{name}.weight"),
                value: normal_tensor(&[d_in, d_out], (1.0 / d_in as f64).sqrt(), seed, 1000 + index),
                decay: true,
            },
            bias: Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[d_out]),
                decay: true,
            },
        }
    }

    /// Identity map; requires `d_in == d_out`.
    pub fn identity(name: &str, d: usize) -> Self {
        let mut r = Regressor::new(name, d, d, 0, 0);
        let w = r.weight.value.data_mut();
        w.fill(0.0);
        (0..d).for_each(|i| w[i * d + i] = 1.0);
        r
    }

    /// Binds the parameters on `tape` and applies the map to `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, [Var; 2])> {
        let w = tape.param(&self.weight.value);
        let b = tape.param(&self.bias.value);
        let y = tape.matmul(x, w)?;
        Ok((tape.add_bias(y, b)?, [w, b]))
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            arch: Arch::SmallCnn,
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            num_classes: 10,
            input_size: (8, 8),
        }
    }

    fn batch(n: usize, h: usize, seed: u64) -> Tensor {
        normal_tensor(&[n, 3, h, h], 1.0, seed, 0)
    }

    #[test]
    fn logits_and_feature_shapes() {
        let cfg = ModelConfig::student(10, (32, 32));
        let mut m = Model::new(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch(4, 32, 9));
        let out = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[4, 10]);
        assert_eq!(tape.value(out.pool_feat).shape(), &[4, 64]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(&tiny(), 5).unwrap();
        let b = Model::new(&tiny(), 5).unwrap();
        let c = Model::new(&tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params()[0].value, c.params()[0].value);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.num_classes = 1;
        assert!(Model::new(&cfg, 0).is_err());
        let mut cfg = tiny();
        cfg.stage_channels = vec![2, 2, 2, 2, 2];
        cfg.input_size = (8, 8);
        assert!(Model::new(&cfg, 0).is_err());
        cfg.input_size = (16, 16);
        assert!(Model::new(&cfg, 0).is_ok());
        let mut cfg = tiny();
        cfg.stage_channels.clear();
        assert!(Model::new(&cfg, 0).is_err());
    }

    #[test]
    fn eval_forward_is_pure_and_per_sample() {
        let m = Model::new(&tiny(), 3).unwrap();
        let x = batch(2, 8, 4);
        let (a, _) = m.infer(&x).unwrap();
        let (b, _) = m.infer(&x).unwrap();
        assert_eq!(a, b);
        let mut dup = x.data().to_vec();
        dup.extend_from_slice(&x.data()[..3 * 64]);
        let (c, _) = m.infer(&Tensor::new(vec![3, 3, 8, 8], dup).unwrap()).unwrap();
        assert_eq!(c.row(2), a.row(0));
    }

    #[test]
    fn train_forward_populates_every_grad() {
        let mut m = Model::new(&tiny(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch(3, 8, 4));
        let out = m.forward(&mut tape, x, Mode::Train).unwrap();
        let loss = tape.cross_entropy(out.logits, &[1, 2, 3]).unwrap();
        tape.backward(loss).unwrap();
        for v in &out.params {
            assert!(tape.grad(*v).is_some());
        }
        m.absorb_grads(&tape, &out);
        assert!(m.params().iter().all(|p| p.value.grad.is_some()));
        assert_ne!(m.bn_states().next().unwrap().1, &BatchNormState::new(4));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = Model::new(&tiny(), 3).unwrap();
        assert!(matches!(m.infer(&batch(2, 16, 0)), Err(CrldError::Shape { .. })));
    }

    #[test]
    fn mlp_runs() {
        let cfg = ModelConfig {
            arch: Arch::Mlp,
            stage_channels: vec![16],
            blocks_per_stage: 2,
            num_classes: 3,
            input_size: (4, 4),
        };
        let m = Model::new(&cfg, 0).unwrap();
        let (l, f) = m.infer(&batch(2, 4, 1)).unwrap();
        assert_eq!(l.shape(), &[2, 3]);
        assert_eq!(f.shape(), &[2, 16]);
    }

    #[test]
    fn identity_regressor() {
        let r = Regressor::identity("reg", 3);
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]));
        let (y, _) = r.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);
    }
}
