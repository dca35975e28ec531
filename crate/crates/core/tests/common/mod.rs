//! Shared test oracles.
//!
//! Numeric derivatives come from [`reference`], a naive `f64` re-derivation
//! of every forward op written without touching the library's kernels. The
//! tape supplies the analytic side.
#![allow(dead_code)]

pub mod gradsuite;
pub mod kd_oracle;
pub mod reference;

use crld::tensor::{Tape, Tensor, Var};
use crld::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradSample {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a − n| / max(|a|, |n|)`; exact agreement at zero counts as zero error.
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs());
        if denom == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / denom
        }
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Compares tape gradients of `build` against central differences of the
/// independent `reference` forward at `coords` uniformly sampled coordinates.
/// Also checks that both forwards agree on the loss value.
pub fn gradcheck<F, R>(inputs: &[Tensor], build: F, reference: R, coords: usize, seed: u64) -> Vec<GradSample>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Fn(&[Vec<f64>]) -> f64,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    let tape_loss = tape.scalar(loss);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.numel()]))
        .collect();

    let base: Vec<Vec<f64>> = inputs.iter().map(widen).collect();
    let ref_loss = reference(&base);
    assert!(
        (ref_loss - tape_loss).abs() <= 1e-4 * ref_loss.abs().max(1.0),
        "reference forward {ref_loss} disagrees with tape forward {tape_loss}"
    );

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(coords);
    for _ in 0..coords {
        let mut flat = r.random_range(0..total);
        let mut input = 0;
        while flat >= inputs[input].numel() {
            flat -= inputs[input].numel();
            input += 1;
        }
        let mut work = base.clone();
        let x0 = base[input][flat];
        work[input][flat] = x0 + FD_STEP;
        let lp = reference(&work);
        work[input][flat] = x0 - FD_STEP;
        let lm = reference(&work);
        out.push(GradSample {
            input,
            index: flat,
            analytic: analytic[input][flat] as f64,
            numeric: (lp - lm) / (2.0 * FD_STEP),
        });
    }
    out
}

pub fn worst(samples: &[GradSample]) -> f64 {
    samples.iter().map(GradSample::rel_err).fold(0.0, f64::max)
}

pub fn report(name: &str, samples: &[GradSample]) -> f64 {
    let w = worst(samples);
    println!("{name}: worst rel err {w:.2e} over {} coords", samples.len());
    for s in samples.iter().filter(|s| s.rel_err() > GRAD_REL_TOL) {
        println!("  {s:?} rel {:.2e}", s.rel_err());
    }
    w
}
