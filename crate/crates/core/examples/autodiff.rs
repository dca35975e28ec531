//! Builds a two-layer classifier directly on the tape, backpropagates a
//! cross-entropy plus distillation loss and checks one weight gradient
//! against a central finite difference.
//!
//!     cargo run --example autodiff

use crld::tensor::{Tape, Tensor};
use crld::Result;

fn loss_of(x: &Tensor, w1: &Tensor, w2: &Tensor, teacher: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f32>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let a = tape.param(w1);
    let b = tape.param(w2);
    let h = tape.matmul(xv, a)?;
    let h = tape.relu(h)?;
    let z = tape.matmul(h, b)?;
    let ce = tape.cross_entropy(z, labels)?;
    let kd = tape.kld(z, teacher, 4.0, &[1.0, 1.0, 0.0])?;
    let total = tape.add(ce, kd)?;
    tape.backward(total)?;
    Ok((tape.scalar(total), tape.grad(a).expect("param").to_vec()))
}

fn main() -> Result<()> {
    let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.5, 0.3, -0.7], &[-0.2, 0.8, 0.1]]);
    let w1 = Tensor::from_rows(&[&[0.2, -0.4, 0.1, 0.3], &[0.7, 0.1, -0.2, 0.5], &[-0.3, 0.6, 0.4, -0.1]]);
    let w2 = Tensor::from_rows(&[&[0.3, -0.2], &[0.1, 0.4], &[-0.5, 0.2], &[0.2, 0.1]]);
    let teacher = Tensor::from_rows(&[&[2.0, -1.0], &[-0.5, 1.5], &[0.0, 0.0]]);
    let labels = [0, 1, 1];

    let (loss, grad) = loss_of(&x, &w1, &w2, &teacher, &labels)?;
    println!("loss {loss:.6}");

    let h = 1e-3f32;
    for idx in [0, 5, 10] {
        let mut plus = w1.clone();
        plus.data_mut()[idx] += h;
        let mut minus = w1.clone();
        minus.data_mut()[idx] -= h;
        let fd = (loss_of(&x, &plus, &w2, &teacher, &labels)?.0 - loss_of(&x, &minus, &w2, &teacher, &labels)?.0)
            / (2.0 * h as f64);
        println!("w1[{idx:>2}]  tape {:+.6}  finite difference {fd:+.6}", grad[idx]);
    }
    Ok(())
}
