//! One consistency-regularised step at a time: prints the loss terms and
//! the fraction of instances the teacher's confidence threshold keeps on
//! each branch, for several pairing sets.
//!
//!     cargo run --example distill_step

use crld::data::{synthetic_pair, BatchPlan, SyntheticSpec};
use crld::distill::{crld_step, DistillConfig, Learner, OptimConfig, Pairings};
use crld::nn::{Model, ModelConfig, Sgd};

fn main() -> crld::Result<()> {
    let spec = SyntheticSpec {
        seed: 5,
        num_classes: 4,
        per_class: 16,
        size: 16,
    };
    let (train_ds, _) = synthetic_pair(&spec, 1)?;
    let mut tcfg = ModelConfig::teacher(4, (16, 16));
    tcfg.stage_channels = vec![8, 12];
    tcfg.blocks_per_stage = 1;
    let teacher = Model::new(&tcfg, 11)?;
    let mut scfg = ModelConfig::student(4, (16, 16));
    scfg.stage_channels = vec![4, 8];
    let o = OptimConfig::default();

    for letter in ['A', 'C', 'G', 'J'] {
        let cfg = DistillConfig {
            pairings: Pairings::expt(letter).expect("known letter"),
            tau_w: 0.3,
            tau_s: 0.3,
            batch_size: 16,
            seed: 2,
            ..DistillConfig::default()
        };
        let mut learner = Learner {
            student: Model::new(&scfg, cfg.seed)?,
            heads: None,
            opt: Sgd::new(o.lr, o.momentum, o.weight_decay),
        };
        let plan = BatchPlan::new(cfg.seed, 0, train_ds.len(), cfg.batch_size)?;
        println!("expt {letter} {:?}", cfg.pairings);
        for (i, batch) in plan.batches().into_iter().enumerate() {
            let s = crld_step(&mut learner, Some(&teacher), &train_ds, batch, 0, o.lr, &cfg)?;
            println!(
                "  step {i}: ce {:.4} wv {:.4} cv {:.4} total {:.4}  kept weak {:.2} strong {:.2}",
                s.loss_ce, s.loss_wv, s.loss_cv, s.loss_total, s.mask_rate_w, s.mask_rate_s
            );
        }
    }
    Ok(())
}
