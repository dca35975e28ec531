//! Full-network central-difference check: student forward in train mode
//! followed by cross-entropy, every parameter tensor sampled.

mod common;

use common::gradsuite::student_network_check;
use common::{report, GRAD_REL_TOL};

#[test]
fn student_network_gradients_match_central_differences() {
    let start = std::time::Instant::now();
    let check = student_network_check();
    println!("replaced {} coordinates whose perturbation crossed a relu kink", check.kinks);
    assert!(check.samples.len() >= 50);
    let worst = report("student network", &check.samples);
    assert!(worst <= GRAD_REL_TOL, "worst rel err {worst}");
    assert!(start.elapsed().as_secs() < 60);
}
