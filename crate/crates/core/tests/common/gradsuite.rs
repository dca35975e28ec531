//! Central-difference checks for every differentiable tape operation and
//! for the full student network, shared by the gradient tests and the
//! acceptance run.

use super::reference as rf;
use super::{gradcheck, random_tensor, rng, widen, GradSample, FD_STEP};
use crld::nn::{Model, ModelConfig};
use crld::tensor::{BatchNormState, Mode, Tape, Tensor, Var};
use rand::Rng;

pub const COORDS: usize = 24;

/// Samples for one operation.
pub struct Check {
    pub name: String,
    pub samples: Vec<GradSample>,
}

impl Check {
    pub fn new(name: impl Into<String>, samples: Vec<GradSample>) -> Self {
        Check {
            name: name.into(),
            samples,
        }
    }

    pub fn worst(&self) -> f64 {
        super::worst(&self.samples)
    }
}

/// Fixed random weights that contract an arbitrary output to a scalar.
fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, &mut rng(seed), 1.0)
}

fn probe(tape: &mut Tape, y: Var, seed: u64) -> crld::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let rv = tape.constant(probe_weights(&shape, seed));
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

fn ref_probe(y: &[f64], shape: &[usize], seed: u64) -> f64 {
    rf::dot(y, &widen(&probe_weights(shape, seed)))
}

pub fn matmul_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let a = random_tensor(&[3, 4], &mut r, 1.0);
    let b = random_tensor(&[4, 2], &mut r, 1.0);
    let s = gradcheck(
        &[a, b],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 11)
        },
        |x| ref_probe(&rf::matmul(&x[0], &x[1], 3, 4, 2), &[3, 2], 11),
        COORDS,
        1,
    );
    out.push(Check::new("matmul", s));
    out
}

pub fn add_bias_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(2);
    let x = random_tensor(&[5, 3], &mut r, 1.0);
    let b = random_tensor(&[3], &mut r, 1.0);
    let s = gradcheck(
        &[x, b],
        |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            probe(t, y, 12)
        },
        |x| ref_probe(&rf::add_bias(&x[0], &x[1]), &[5, 3], 12),
        COORDS,
        2,
    );
    out.push(Check::new("add_bias", s));
    out
}

pub fn conv2d_gradients_both_strides() -> Vec<Check> {
    let mut out = Vec::new();
    for stride in [1, 2] {
        let mut r = rng(3 + stride as u64);
        let x = random_tensor(&[2, 3, 8, 8], &mut r, 1.0);
        let w = random_tensor(&[4, 3, 3, 3], &mut r, 0.5);
        let o = 8 / stride;
        let s = gradcheck(
            &[x, w],
            |t, v| {
                let y = t.conv2d(v[0], v[1], stride)?;
                assert_eq!(t.value(y).shape(), &[2, 4, o, o]);
                probe(t, y, 13)
            },
            |x| {
                let (y, _, _) = rf::conv2d(&x[0], &x[1], 2, 3, 8, 8, 4, stride);
                ref_probe(&y, &[2, 4, o, o], 13)
            },
            COORDS,
            3,
        );
        out.push(Check::new(format!("conv2d stride {stride}"), s));
    }
    out
}

pub fn batchnorm_gradients_train_and_eval() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(4);
    let x = random_tensor(&[3, 2, 3, 3], &mut r, 2.0);
    let g = random_tensor(&[2], &mut r, 1.0);
    let b = random_tensor(&[2], &mut r, 1.0);
    let s = gradcheck(
        &[x.clone(), g.clone(), b.clone()],
        |t, v| {
            let mut st = BatchNormState::new(2);
            let y = t.batchnorm_train(v[0], v[1], v[2], &mut st)?;
            probe(t, y, 14)
        },
        |x| ref_probe(&rf::batchnorm_train(&x[0], &x[1], &x[2], 3, 2, 9), &[3, 2, 3, 3], 14),
        COORDS,
        4,
    );
    out.push(Check::new("batchnorm train", s));
    let mut st = BatchNormState::new(2);
    st.running_mean = vec![0.3, -0.2];
    st.running_var = vec![1.7, 0.4];
    let (rm, rv) = (
        st.running_mean.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        st.running_var.iter().map(|&v| v as f64).collect::<Vec<_>>(),
    );
    let s = gradcheck(
        &[x, g, b],
        |t, v| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &st)?;
            probe(t, y, 15)
        },
        |x| ref_probe(&rf::batchnorm_eval(&x[0], &x[1], &x[2], &rm, &rv, 3, 2, 9), &[3, 2, 3, 3], 15),
        COORDS,
        5,
    );
    out.push(Check::new("batchnorm eval", s));
    out
}

pub fn relu_pool_flatten_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    // keep inputs away from the kink so the difference quotient is smooth
    let mut r = rng(5);
    let mut x = random_tensor(&[2, 3, 4, 4], &mut r, 1.0);
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1f32.copysign(*v);
        }
    });
    let s = gradcheck(
        &[x.clone()],
        |t, v| {
            let y = t.relu(v[0])?;
            probe(t, y, 16)
        },
        |x| ref_probe(&rf::relu(&x[0]), &[2, 3, 4, 4], 16),
        COORDS,
        6,
    );
    out.push(Check::new("relu", s));
    let s = gradcheck(
        &[x.clone()],
        |t, v| {
            let y = t.global_avg_pool(v[0])?;
            probe(t, y, 17)
        },
        |x| ref_probe(&rf::avg_pool(&x[0], 16), &[2, 3], 17),
        COORDS,
        7,
    );
    out.push(Check::new("global_avg_pool", s));
    let s = gradcheck(
        &[x],
        |t, v| {
            let y = t.flatten(v[0])?;
            probe(t, y, 18)
        },
        |x| ref_probe(&x[0], &[2, 48], 18),
        COORDS,
        8,
    );
    out.push(Check::new("flatten", s));
    out
}

pub fn softmax_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(6);
    let x = random_tensor(&[4, 5], &mut r, 3.0);
    for temp in [1.0f32, 4.0] {
        let s = gradcheck(
            &[x.clone()],
            |t, v| {
                let y = t.softmax_t(v[0], temp)?;
                probe(t, y, 19)
            },
            |x| ref_probe(&rf::softmax_rows(&x[0], 5, temp as f64), &[4, 5], 19),
            COORDS,
            9,
        );
        out.push(Check::new(format!("softmax_t T={temp}"), s));
    }
    out
}

pub fn cross_entropy_gradient_is_softmax_minus_onehot() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(7);
    let x = random_tensor(&[4, 6], &mut r, 2.0);
    let labels = [0usize, 5, 2, 2];
    let s = gradcheck(
        &[x.clone()],
        |t, v| t.cross_entropy(v[0], &labels),
        |x| rf::cross_entropy(&x[0], 6, &labels),
        COORDS,
        10,
    );
    out.push(Check::new("cross_entropy", s));

    let mut tape = Tape::new();
    let v = tape.param(&x);
    let l = tape.cross_entropy(v, &labels).unwrap();
    tape.backward(l).unwrap();
    let p = rf::softmax_rows(&widen(&x), 6, 1.0);
    let g = tape.grad(v).unwrap();
    for b in 0..4 {
        for c in 0..6 {
            let onehot = if labels[b] == c { 1.0 } else { 0.0 };
            let expected = (p[b * 6 + c] - onehot) / 4.0;
            assert!((g[b * 6 + c] as f64 - expected).abs() < 1e-6);
        }
    }
    out
}

pub fn kld_gradients_masked_and_unmasked() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(8);
    let s_logits = random_tensor(&[5, 4], &mut r, 3.0);
    let teacher = random_tensor(&[5, 4], &mut r, 3.0);
    let tw = widen(&teacher);
    for (temp, mask) in [(1.0f32, vec![1.0f32; 5]), (4.0, vec![1.0, 0.0, 1.0, 1.0, 0.0])] {
        let mw: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
        let s = gradcheck(
            &[s_logits.clone()],
            |t, v| t.kld(v[0], &teacher, temp, &mask),
            |x| rf::kld(&x[0], &tw, 4, temp as f64, &mw),
            COORDS,
            11,
        );
        out.push(Check::new(format!("kld T={temp}"), s));
    }
    out
}

pub fn masked_mse_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(9);
    let x = random_tensor(&[4, 3], &mut r, 1.0);
    let target = random_tensor(&[4, 3], &mut r, 1.0);
    let tw = widen(&target);
    let mask = [1.0f32, 1.0, 0.0, 1.0];
    let s = gradcheck(
        &[x],
        |t, v| t.masked_mse(v[0], &target, &mask),
        |x| rf::masked_mse(&x[0], &tw, 3, &[1.0, 1.0, 0.0, 1.0]),
        COORDS,
        12,
    );
    out.push(Check::new("masked_mse", s));
    out
}

pub fn glue_op_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(10);
    let a = random_tensor(&[3, 3], &mut r, 1.0);
    let b = random_tensor(&[3, 3], &mut r, 1.0);
    let s = gradcheck(
        &[a, b],
        |t, v| {
            let m = t.mul(v[0], v[1])?;
            let s = t.add(m, v[0])?;
            let s = t.scale(s, -1.5)?;
            probe(t, s, 20)
        },
        |x| {
            let y: Vec<f64> = x[0].iter().zip(&x[1]).map(|(a, b)| -1.5 * (a * b + a)).collect();
            ref_probe(&y, &[3, 3], 20)
        },
        COORDS,
        13,
    );
    out.push(Check::new("mul/add/scale", s));
    out
}

/// Every op check in a fixed order.
pub fn all_op_checks() -> Vec<Check> {
    [matmul_gradients, add_bias_gradients, conv2d_gradients_both_strides, batchnorm_gradients_train_and_eval, relu_pool_flatten_gradients, softmax_gradients, cross_entropy_gradient_is_softmax_minus_onehot, kld_gradients_masked_and_unmasked, masked_mse_gradients, glue_op_gradients]
        .into_iter()
        .flat_map(|f| f())
        .collect()
}

/// Samples of the full-network check plus how many coordinates were
/// replaced because a perturbation crossed a relu kink.
pub struct NetworkCheck {
    pub samples: Vec<GradSample>,
    pub kinks: usize,
}

/// Independent re-derivation of the small CNN forward plus mean CE. Also
/// returns the sign pattern of every relu input so callers can tell when a
/// perturbation crossed a kink.
fn reference_loss(cfg: &ModelConfig, params: &[Vec<f64>], x: &[f64], n: usize, labels: &[usize]) -> (f64, Vec<bool>) {
    let mut signs = Vec::new();
    let (mut h, mut w) = cfg.input_size;
    let mut c = 3;
    let mut y = x.to_vec();
    let mut p = params.iter();
    for (s, &k) in cfg.stage_channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let (conv, oh, ow) = rf::conv2d(&y, p.next().unwrap(), n, c, h, w, k, stride);
            let (gamma, beta) = (p.next().unwrap(), p.next().unwrap());
            let pre = rf::batchnorm_train(&conv, gamma, beta, n, k, oh * ow);
            signs.extend(pre.iter().map(|&v| v > 0.0));
            y = rf::relu(&pre);
            (h, w, c) = (oh, ow, k);
        }
    }
    let feat = rf::avg_pool(&y, h * w);
    let (fw, fb) = (p.next().unwrap(), p.next().unwrap());
    let logits = rf::add_bias(&rf::matmul(&feat, fw, n, c, cfg.num_classes), fb);
    (rf::cross_entropy(&logits, cfg.num_classes, labels), signs)
}

/// Samples at least 64 coordinates across every student parameter tensor,
/// four from each tensor first.
pub fn student_network_check() -> NetworkCheck {
    let cfg = ModelConfig::student(10, (8, 8));
    let mut model = Model::new(&cfg, 21).unwrap();
    let n = 2;
    let x = random_tensor(&[n, 3, 8, 8], &mut rng(5), 1.0);
    let labels = [3usize, 7];

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, Mode::Train).unwrap();
    let loss = tape.cross_entropy(out.logits, &labels).unwrap();
    let tape_loss = tape.scalar(loss);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = out.params.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let base: Vec<Vec<f64>> = model.params().iter().map(|p| widen(&p.value)).collect();
    let xw = widen(&x);
    let (ref_loss, base_signs) = reference_loss(&cfg, &base, &xw, n, &labels);
    assert!((ref_loss - tape_loss).abs() < 1e-5, "{ref_loss} vs {tape_loss}");

    // Central differences are meaningless across a relu kink, so a
    // coordinate whose ±h evaluations flip any relu input is replaced.
    let probe = |i: usize, j: usize| -> Option<GradSample> {
        let mut work = base.clone();
        work[i][j] = base[i][j] + FD_STEP;
        let (lp, sp) = reference_loss(&cfg, &work, &xw, n, &labels);
        work[i][j] = base[i][j] - FD_STEP;
        let (lm, sm) = reference_loss(&cfg, &work, &xw, n, &labels);
        (sp == base_signs && sm == base_signs).then(|| GradSample {
            input: i,
            index: j,
            analytic: analytic[i][j] as f64,
            numeric: (lp - lm) / (2.0 * FD_STEP),
        })
    };
    let mut r = rng(77);
    let mut samples = Vec::new();
    let mut kinks = 0;
    let total: usize = base.iter().map(Vec::len).sum();
    // four coordinates from every tensor, then uniform draws
    for (i, p) in base.iter().enumerate() {
        let mut taken = 0;
        while taken < 4 {
            match probe(i, r.random_range(0..p.len())) {
                Some(s) => {
                    samples.push(s);
                    taken += 1;
                }
                None => kinks += 1,
            }
        }
    }
    while samples.len() < 64 {
        let mut flat = r.random_range(0..total);
        let mut i = 0;
        while flat >= base[i].len() {
            flat -= base[i].len();
            i += 1;
        }
        match probe(i, flat) {
            Some(s) => samples.push(s),
            None => kinks += 1,
        }
    }
    NetworkCheck { samples, kinks }
}
