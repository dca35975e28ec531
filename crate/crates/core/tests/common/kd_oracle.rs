//! Minimal single-view Hinton distillation written against the public model
//! API only. The loss and its logit gradient are derived here by hand; the
//! network supplies only the forward pass and backpropagation from a given
//! logit gradient.

use super::reference as rf;
use super::widen;
use crld::augment::weak_view;
use crld::data::{normalize_batch, Dataset};
use crld::nn::Model;
use crld::rng::{Lane, RngStream};
use crld::tensor::{Mode, Tape, Tensor};

/// `CE(z, y) + T²·mean_b KL(softmax(t/T) ‖ softmax(z/T))` and its gradient
/// with respect to `z`.
pub fn hinton_loss(z: &[f64], teacher: &[f64], labels: &[usize], cols: usize, temp: f64) -> (f64, Vec<f64>) {
    let b = labels.len() as f64;
    let p = rf::softmax_rows(z, cols, 1.0);
    let ps = rf::softmax_rows(z, cols, temp);
    let pt = rf::softmax_rows(teacher, cols, temp);
    let mut loss = 0.0;
    let mut grad = vec![0.0; z.len()];
    for (r, &y) in labels.iter().enumerate() {
        loss -= p[r * cols + y].ln() / b;
        for c in 0..cols {
            let i = r * cols + c;
            let onehot = if c == y { 1.0 } else { 0.0 };
            loss += temp * temp * pt[i] * (pt[i].ln() - ps[i].ln()) / b;
            grad[i] = (p[i] - onehot) / b + temp * (ps[i] - pt[i]) / b;
        }
    }
    (loss, grad)
}

/// Student plus heavy-ball momentum buffers.
pub struct OracleLearner {
    pub model: Model,
    buffers: Vec<Vec<f32>>,
    momentum: f32,
    weight_decay: f32,
}

impl OracleLearner {
    pub fn new(model: Model, momentum: f32, weight_decay: f32) -> Self {
        let buffers = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        OracleLearner {
            model,
            buffers,
            momentum,
            weight_decay,
        }
    }

    /// Weak views of `indices` drawn from the weak lane of `(seed, epoch)`.
    pub fn weak_batch(ds: &Dataset, indices: &[usize], seed: u64, epoch: u64) -> Tensor {
        let views: Vec<_> = indices
            .iter()
            .map(|&i| weak_view(&ds.images[i], &mut RngStream::new(seed, Lane::WeakView, epoch, i as u64)))
            .collect();
        normalize_batch(&views, &ds.stats).unwrap()
    }

    /// One update; returns the loss before it.
    pub fn step(&mut self, teacher: &Model, x: Tensor, labels: &[usize], temp: f32, lr: f32) -> f64 {
        let (t_logits, _) = teacher.infer(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.model.forward(&mut tape, xv, Mode::Train).unwrap();
        let z = tape.value(out.logits).clone();
        let cols = z.shape()[1];
        let (loss, g) = hinton_loss(&widen(&z), &widen(&t_logits), labels, cols, temp as f64);
        let gv = tape.constant(Tensor::new(z.shape().to_vec(), g.iter().map(|&v| v as f32).collect()).unwrap());
        let prod = tape.mul(out.logits, gv).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        self.model.absorb_grads(&tape, &out);
        for (p, buf) in self.model.params_mut().iter_mut().zip(&mut self.buffers) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let grad = p.value.grad.take().unwrap();
            for ((w, b), g) in p.value.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
                *b = self.momentum * *b + (g + wd * *w);
                *w -= lr * *b;
            }
        }
        loss
    }
}
