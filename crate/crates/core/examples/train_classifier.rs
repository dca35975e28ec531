//! Trains a small residual CNN with plain cross-entropy on synthetic shapes,
//! then saves and reloads the checkpoint.
//!
//!     cargo run --example train_classifier

use crld::data::{synthetic_pair, SyntheticSpec};
use crld::distill::{evaluate, train, DistillConfig, OptimConfig, TrainOptions};
use crld::nn::{load_checkpoint, save_checkpoint, ModelConfig};

fn main() -> crld::Result<()> {
    let spec = SyntheticSpec {
        seed: 1,
        num_classes: 4,
        per_class: 60,
        size: 16,
    };
    let (train_ds, test_ds) = synthetic_pair(&spec, 20)?;
    let mut mcfg = ModelConfig::student(4, (16, 16));
    mcfg.stage_channels = vec![8, 16];
    let cfg = DistillConfig {
        epochs: 12,
        batch_size: 16,
        seed: 3,
        ..DistillConfig::supervised()
    };
    let out = train(None, &mcfg, &train_ds, &test_ds, &cfg, &OptimConfig::default(), &TrainOptions::default())?;
    for m in out.metrics.iter().filter(|m| m.split == "test") {
        println!("epoch {:>2}  lr {:.4}  test top1 {:.3}", m.epoch, m.lr, m.top1);
    }

    let dir = tempfile_dir();
    let path = dir.join("classifier.ckpt");
    save_checkpoint(&out.learner.student, &path)?;
    let back = load_checkpoint(&path, &mcfg)?;
    println!(
        "{} parameters; reloaded checkpoint scores {:.3}",
        back.num_parameters(),
        evaluate(&back, &test_ds)?.top1
    );
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join("crld_train_classifier");
    std::fs::create_dir_all(&d).expect("temp dir");
    d
}
