//! Runs the experiment harness end to end on a very small problem: teacher
//! pretraining, one distillation run and the ten-row pairing ablation.
//!
//!     cargo run --example harness_ablation -- [OUT_DIR]

use std::path::PathBuf;

use crld::harness::{cmd_ablate, cmd_distill, cmd_pretrain, RunConfig, Runner};

fn main() -> crld::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/harness_ablation".into()));
    let cfg = RunConfig::parse(&format!(
        "dataset.kind = synthetic
dataset.num_classes = 4
dataset.per_class = 40
dataset.test_per_class = 10
dataset.size = 32
output.dir = {}
teacher.channels = 8,16
teacher.blocks = 1
student.channels = 4,8
pretrain.epochs = 15
pretrain.batch_size = 16
distill.epochs = 10
distill.batch_size = 16
",
        out.display()
    ))?;
    let t = cmd_pretrain(&cfg)?;
    println!("teacher top1 {:.3}", t.top1);
    let d = cmd_distill(&cfg, false)?;
    println!("distilled student top1 {:.3}", d.top1);
    println!("{}", cmd_ablate(&cfg, &Runner::Sequential)?);
    println!("outputs under {}", out.display());
    Ok(())
}
