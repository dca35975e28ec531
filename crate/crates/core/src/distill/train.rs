//! Epoch loop, evaluation and resumable training state.

use std::path::{Path, PathBuf};

use super::step::{crld_step, topk_hits, FeatureHeads, Learner, StepOutput};
use super::{DistillConfig, FeatureTap};
use crate::data::{BatchPlan, Dataset, Split};
use crate::error::{CrldError, Result};
use crate::metrics::{ensure_dir, MetricsRecord, MetricsWriter};
use crate::nn::{Checkpoint, Model, ModelConfig, Schedule, Sgd};
use crate::tensor::Tensor;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Explicit decay epochs; `None` scales the standard fractions to the
    /// run length.
    pub milestones: Option<Vec<usize>>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: None,
        }
    }
}

impl OptimConfig {
    pub fn schedule(&self, epochs: usize) -> Schedule {
        match &self.milestones {
            Some(m) => Schedule {
                base_lr: self.lr,
                milestones: m.clone(),
            },
            None => Schedule::scaled(self.lr, epochs),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Eval-mode accuracy on unaugmented, normalised images. Ties rank the
/// lower class index first.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Accuracy> {
    if ds.is_empty() {
        return Err(CrldError::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut h1, mut h5) = (0, 0);
    for chunk in idx.chunks(256) {
        let (logits, _) = model.infer(&ds.batch_tensor(chunk)?)?;
        let (a, b) = topk_hits(&logits, &ds.batch_labels(chunk));
        h1 += a;
        h5 += b;
    }
    let n = ds.len() as f64;
    Ok(Accuracy {
        top1: h1 as f64 / n,
        top5: h5 as f64 / n,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/resume.ckpt` if it exists.
    pub resume: bool,
    /// Stop after this many epochs have completed in total, simulating an
    /// interruption.
    pub halt_after: Option<usize>,
}

pub struct TrainOutcome {
    pub learner: Learner,
    pub metrics: Vec<MetricsRecord>,
    /// Every step's output in order, for this invocation only.
    pub steps: Vec<StepOutput>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESUME_FILE: &str = "resume.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";

fn fresh_learner(student_cfg: &ModelConfig, teacher: Option<&Model>, cfg: &DistillConfig, optim: &OptimConfig) -> Result<Learner> {
    let student = Model::new(student_cfg, cfg.seed)?;
    let heads = match (cfg.feature_tap, teacher) {
        (FeatureTap::PoolFeat, Some(t)) => Some(FeatureHeads::new(
            student_cfg.feature_dim(),
            t.config().feature_dim(),
            cfg.seed,
        )),
        (FeatureTap::PoolFeat, None) => {
            return Err(CrldError::Config("feature tap needs a teacher".into()))
        }
        (FeatureTap::None, _) => None,
    };
    Ok(Learner {
        student,
        heads,
        opt: Sgd::new(optim.lr, optim.momentum, optim.weight_decay),
    })
}

fn head_tensors(heads: &FeatureHeads) -> Vec<(String, Tensor)> {
    [&heads.weak, &heads.strong]
        .into_iter()
        .flat_map(|h| [&h.weight, &h.bias])
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

fn save_resume(path: &Path, learner: &Learner, next_epoch: usize) -> Result<()> {
    let mut ck = Checkpoint::new(learner.student.named_tensors());
    if let Some(h) = &learner.heads {
        ck.tensors.extend(head_tensors(h));
    }
    for (i, b) in learner.opt.buffers.iter().enumerate() {
        ck.push(format!("optim.momentum.{i}"), Tensor::new(vec![b.len()], b.clone())?);
    }
    ck.push("meta.next_epoch", Tensor::scalar(next_epoch as f32));
    ck.write(path)
}

fn load_resume(path: &Path, learner: &mut Learner) -> Result<usize> {
    let ck = Checkpoint::read(path)?;
    let mut restored = learner.clone();
    restored.student.load_tensors(&ck)?;
    if let Some(h) = &mut restored.heads {
        for p in [&mut h.weak.weight, &mut h.weak.bias, &mut h.strong.weight, &mut h.strong.bias] {
            let t = ck
                .get(&p.name)
                .ok_or_else(|| CrldError::Format(format!("resume state lacks {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(CrldError::TensorMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
    }
    restored.opt.buffers = (0..)
        .map_while(|i| ck.get(&format!("optim.momentum.{i}")))
        .map(|t| t.data().to_vec())
        .collect();
    let next = ck
        .get("meta.next_epoch")
        .ok_or_else(|| CrldError::Format("resume state lacks meta.next_epoch".into()))?
        .item() as usize;
    *learner = restored;
    Ok(next)
}

/// Runs `cfg.epochs` epochs of [`crld_step`] under the step schedule and
/// evaluates on `test` after each. With an output directory it writes
/// `metrics.jsonl` (train and test records per epoch), `resume.ckpt` after
/// every epoch and `student.ckpt` at the end.
pub fn train(
    teacher: Option<&Model>,
    student_cfg: &ModelConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &DistillConfig,
    optim: &OptimConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.num_classes != student_cfg.num_classes {
        return Err(CrldError::Config(format!(
            "dataset has {} classes, student {}",
            train_ds.num_classes, student_cfg.num_classes
        )));
    }
    if let Some(t) = teacher {
        if t.config().num_classes != student_cfg.num_classes {
            return Err(CrldError::Config("teacher and student class counts differ".into()));
        }
    }
    let schedule = optim.schedule(cfg.epochs);
    let mut learner = fresh_learner(student_cfg, teacher, cfg, optim)?;
    let mut start = 0;
    let mut writer = None;
    if let Some(dir) = &opts.out_dir {
        ensure_dir(dir)?;
        let resume_path = dir.join(RESUME_FILE);
        if opts.resume && resume_path.exists() {
            start = load_resume(&resume_path, &mut learner)?;
            log::info!("resuming at epoch {start}");
        }
        writer = Some(MetricsWriter::resume(&dir.join(METRICS_FILE), start)?);
    }

    let mut metrics = Vec::new();
    let mut steps = Vec::new();
    let end = opts.halt_after.map_or(cfg.epochs, |h| h.min(cfg.epochs));
    for epoch in start..end {
        let lr = schedule.lr_at(epoch);
        let plan = BatchPlan::new(cfg.seed, epoch as u64, train_ds.len(), cfg.batch_size.min(train_ds.len()))?;
        let mut sums = StepOutput::default();
        let mut seen = 0.0;
        for (b, batch) in plan.batches().into_iter().enumerate() {
            let out = crld_step(&mut learner, teacher, train_ds, batch, epoch, lr, cfg).inspect_err(|e| {
                log::error!("epoch {epoch} batch {b} ({} samples): {e}", batch.len());
            })?;
            let w = batch.len() as f64;
            sums.loss_ce += w * out.loss_ce;
            sums.loss_wv += w * out.loss_wv;
            sums.loss_cv += w * out.loss_cv;
            sums.loss_total += w * out.loss_total;
            sums.mask_rate_w += w * out.mask_rate_w;
            sums.mask_rate_s += w * out.mask_rate_s;
            sums.batch_top1 += w * out.batch_top1;
            sums.batch_top5 += w * out.batch_top5;
            seen += w;
            steps.push(out);
        }
        let acc = evaluate(&learner.student, test_ds)?;
        let train_rec = MetricsRecord {
            epoch,
            split: Split::Train.to_string(),
            top1: sums.batch_top1 / seen,
            top5: sums.batch_top5 / seen,
            loss_ce: Some(sums.loss_ce / seen),
            loss_wv: Some(sums.loss_wv / seen),
            loss_cv: Some(sums.loss_cv / seen),
            loss_total: Some(sums.loss_total / seen),
            mask_rate_w: Some(sums.mask_rate_w / seen),
            mask_rate_s: Some(sums.mask_rate_s / seen),
            lr: lr as f64,
        };
        let test_rec = MetricsRecord::eval(epoch, Split::Test, acc.top1, acc.top5, lr as f64);
        log::info!(
            "epoch {epoch}: loss {:.4} train top1 {:.3} test top1 {:.3}",
            sums.loss_total / seen,
            train_rec.top1,
            acc.top1
        );
        if let (Some(w), Some(dir)) = (writer.as_mut(), &opts.out_dir) {
            w.write(&train_rec)?;
            w.write(&test_rec)?;
            save_resume(&dir.join(RESUME_FILE), &learner, epoch + 1)?;
        }
        metrics.push(train_rec);
        metrics.push(test_rec);
    }
    if let Some(dir) = &opts.out_dir {
        if end == cfg.epochs {
            Checkpoint::new(learner.student.named_tensors()).write(&dir.join(STUDENT_FILE))?;
        }
    }
    Ok(TrainOutcome {
        learner,
        metrics,
        steps,
    })
}
