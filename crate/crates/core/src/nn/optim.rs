//! SGD with momentum and the step learning-rate schedule.

use super::Param;
use crate::error::{CrldError, Result};

/// Heavy-ball SGD with coupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Momentum buffers, one per parameter in step order. Created on the
    /// first step.
    pub buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// `buf ← μ·buf + (g + wd·p)`, `p ← p − lr·buf`, then clears the grads.
    /// Fails without touching anything if any parameter lacks a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        let mut params: Vec<&mut Param> = params.into_iter().collect();
        if let Some(p) = params.iter().find(|p| p.value.grad.is_none()) {
            return Err(CrldError::MissingGrad(p.name.clone()));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        if self.buffers.len() != params.len()
            || self.buffers.iter().zip(&params).any(|(b, p)| b.len() != p.value.numel())
        {
            return Err(CrldError::InvalidArgument(
                "momentum buffers do not match the parameter list".into(),
            ));
        }
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let g = p.value.grad.take().expect("checked");
            let data = p.value.data_mut();
            for ((w, b), g) in data.iter_mut().zip(buf.iter_mut()).zip(g) {
                *b = self.momentum * *b + (g + wd * *w);
                *w -= self.lr * *b;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate, divided by 10 at every milestone
/// reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f32,
    pub milestones: Vec<usize>,
}

impl Schedule {
    pub const FRACTIONS: [f64; 3] = [0.625, 0.75, 0.875];

    /// Milestones at the standard fractions of `total_epochs`, rounded.
    pub fn scaled(base_lr: f32, total_epochs: usize) -> Self {
        Schedule {
            base_lr,
            milestones: Self::FRACTIONS
                .iter()
                .map(|f| (f * total_epochs as f64).round() as usize)
                .collect(),
        }
    }

    /// The 240-epoch recipe with base rate 0.05.
    pub fn reference() -> Self {
        Schedule::scaled(0.05, 240)
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        (self.base_lr as f64 / 10f64.powi(decays as i32)) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scalar_param(v: f32, decay: bool) -> Param {
        Param {
            name: "p".into(),
            value: Tensor::new(vec![1], vec![v]).unwrap(),
            decay,
        }
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = scalar_param(0.7, true);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        p.value.grad = Some(vec![0.0]);
        opt.step([&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.7]);
    }

    #[test]
    fn plain_sgd() {
        let mut p = scalar_param(1.0, true);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        p.value.grad = Some(vec![1.0]);
        opt.step([&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert!(p.value.grad.is_none());
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = scalar_param(0.0, true);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for _ in 0..2 {
            p.value.grad = Some(vec![1.0]);
            opt.step([&mut p]).unwrap();
        }
        assert!((p.value.data()[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn decay_respects_flag() {
        let mut a = scalar_param(1.0, true);
        let mut b = scalar_param(1.0, false);
        a.value.grad = Some(vec![0.0]);
        b.value.grad = Some(vec![0.0]);
        Sgd::new(1.0, 0.0, 0.5).step([&mut a, &mut b]).unwrap();
        assert_eq!(a.value.data(), &[0.5]);
        assert_eq!(b.value.data(), &[1.0]);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut p = scalar_param(1.0, true);
        assert!(matches!(
            Sgd::new(0.1, 0.9, 0.0).step([&mut p]),
            Err(CrldError::MissingGrad(_))
        ));
    }

    #[test]
    fn reference_schedule() {
        let s = Schedule::reference();
        assert_eq!(s.milestones, vec![150, 180, 210]);
        assert_eq!(s.lr_at(0), 0.05);
        assert_eq!(s.lr_at(149), 0.05);
        assert!((s.lr_at(160) - 0.005).abs() < 1e-9);
        assert!((s.lr_at(185) - 0.0005).abs() < 1e-10);
        assert!((s.lr_at(210) - 0.05 / 1000.0).abs() < 1e-10);
        assert!((s.lr_at(239) - 0.00005).abs() < 1e-10);
    }

    #[test]
    fn scaled_schedule_rounds() {
        assert_eq!(Schedule::scaled(0.1, 30).milestones, vec![19, 23, 26]);
        assert_eq!(Schedule::scaled(0.1, 0).milestones, vec![0, 0, 0]);
    }
}
