//! One optimisation step of the distillation objective.

use super::{sls_mask, DistillConfig, FeatureTap, MaskVec, ViewMode};
use crate::augment::{strong_view, weak_view, ImageU8};
use crate::data::{normalize_batch, Dataset};
use crate::error::{CrldError, Result};
use crate::nn::{absorb_params, Model, ModelOutput, Regressor, Sgd};
use crate::rng::{Lane, RngStream};
use crate::tensor::{softmax_t, Mode, Tape, Tensor, Var};

/// Observable result of one step. Loss values are the batch objectives
/// before the parameter update. Mask rates are those of the teacher
/// branches the enabled pairings read; a branch nothing reads reports 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutput {
    pub loss_ce: f64,
    pub loss_wv: f64,
    pub loss_cv: f64,
    pub loss_total: f64,
    pub mask_rate_w: f64,
    pub mask_rate_s: f64,
    /// Top-1 of the student's first-branch predictions on this batch.
    pub batch_top1: f64,
    pub batch_top5: f64,
}

/// Regressors for the feature-space variant, one per student branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHeads {
    pub weak: Regressor,
    pub strong: Regressor,
}

impl FeatureHeads {
    pub fn new(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        FeatureHeads {
            weak: Regressor::new("head.weak", student_dim, teacher_dim, seed, 0),
            strong: Regressor::new("head.strong", student_dim, teacher_dim, seed, 1),
        }
    }
}

/// Everything a step updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub student: Model,
    pub heads: Option<FeatureHeads>,
    pub opt: Sgd,
}

impl Learner {
    /// Applies the accumulated gradients to the student and the heads.
    pub fn apply_update(&mut self, lr: f32) -> Result<()> {
        let Learner { student, heads, opt } = self;
        let head_params = heads
            .as_mut()
            .map(|h| {
                let [a, b] = h.weak.params_mut();
                let [c, d] = h.strong.params_mut();
                vec![a, b, c, d]
            })
            .unwrap_or_default();
        opt.lr = lr;
        opt.step(student.params_mut().iter_mut().chain(head_params))
    }
}

/// Builds the two branch views of sample `index` for `epoch`. Each branch
/// draws from its own stream, so the result depends on nothing but
/// `(seed, epoch, index)` and the configuration.
pub fn make_views(img: &ImageU8, index: usize, epoch: usize, cfg: &DistillConfig) -> (ImageU8, Option<ImageU8>) {
    let stream = |lane| RngStream::new(cfg.seed, lane, epoch as u64, index as u64);
    let weak = |lane| weak_view(img, &mut stream(lane));
    let strong = |lane| strong_view(img, &cfg.strong, &mut stream(lane));
    match cfg.view_mode {
        ViewMode::StrongWeak => (weak(Lane::WeakView), Some(strong(Lane::StrongView))),
        ViewMode::WeakWeak => (weak(Lane::WeakView), Some(weak(Lane::SecondView))),
        ViewMode::StrongStrong => (strong(Lane::StrongView), Some(strong(Lane::SecondView))),
        ViewMode::WeakSingle => (weak(Lane::WeakView), None),
    }
}

/// Top-1 and top-5 hit counts; ties rank the lower class index first.
pub(crate) fn topk_hits(logits: &Tensor, labels: &[usize]) -> (usize, usize) {
    let mut top1 = 0;
    let mut top5 = 0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let target = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > target || (v == target && c < y))
            .count();
        top1 += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
    }
    (top1, top5)
}

struct TeacherBranch {
    logits: Tensor,
    feat: Tensor,
    mask: MaskVec,
}

fn teacher_branch(teacher: &Model, x: &Tensor, tau: f64) -> Result<TeacherBranch> {
    let (logits, feat) = teacher.infer(x)?;
    let mask = sls_mask(&softmax_t(&logits, 1.0)?, tau)?;
    Ok(TeacherBranch { logits, feat, mask })
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, v)?,
        None => v,
    }))
}

/// One step of the objective on the samples `indices` of `ds`:
///
/// `L = [CE(S_w, y) + CE(S_s, y)] + λ_kd·(λ_wv·L_wv + λ_cv·L_cv)`,
///
/// the bracket dropped under `lfkd` and each consistency term present only
/// when its pairing is enabled. Runs backward and one SGD update at `lr`.
/// `teacher` may be `None` only when no pairing is enabled.
#[allow(clippy::too_many_arguments)]
pub fn crld_step(
    learner: &mut Learner,
    teacher: Option<&Model>,
    ds: &Dataset,
    indices: &[usize],
    epoch: usize,
    lr: f32,
    cfg: &DistillConfig,
) -> Result<StepOutput> {
    let (mut first, mut second) = (Vec::with_capacity(indices.len()), Vec::new());
    for &i in indices {
        let (a, b) = make_views(&ds.images[i], i, epoch, cfg);
        first.push(a);
        second.extend(b);
    }
    let labels = ds.batch_labels(indices);
    let x_w = normalize_batch(&first, &ds.stats)?;
    let x_s = if second.is_empty() {
        None
    } else {
        Some(normalize_batch(&second, &ds.stats)?)
    };

    let teacher = match (cfg.pairings.any(), teacher) {
        (false, _) => None,
        (true, Some(t)) => Some(t),
        (true, None) => {
            return Err(CrldError::InvalidArgument(
                "consistency pairings need a teacher".into(),
            ))
        }
    };
    // teacher branches are only evaluated when some pairing reads them
    let p = cfg.pairings;
    let t_w = match teacher {
        Some(t) if p.ww || p.sw => Some(teacher_branch(t, &x_w, cfg.tau_w)?),
        _ => None,
    };
    let t_s = match (teacher, &x_s) {
        (Some(t), Some(x)) if p.ss || p.ws => Some(teacher_branch(t, x, cfg.tau_s)?),
        _ => None,
    };

    let mut tape = Tape::new();
    let xw = tape.constant(x_w);
    let out_w = learner.student.forward(&mut tape, xw, Mode::Train)?;
    let out_s: Option<ModelOutput> = match x_s {
        Some(x) => {
            let xs = tape.constant(x);
            Some(learner.student.forward(&mut tape, xs, Mode::Train)?)
        }
        None => None,
    };

    let mut ce = None;
    let mut ce_value = 0.0;
    if !cfg.lfkd {
        let a = tape.cross_entropy(out_w.logits, &labels)?;
        ce_value += tape.scalar(a);
        ce = Some(a);
        if let Some(o) = &out_s {
            let b = tape.cross_entropy(o.logits, &labels)?;
            ce_value += tape.scalar(b);
            ce = add_opt(&mut tape, ce, b)?;
        }
    }

    // Regressed student features, bound lazily per branch.
    let mut head_vars: Vec<(bool, [Var; 2])> = Vec::new();
    let mut regressed: [Option<Var>; 2] = [None, None];
    let mut term = |tape: &mut Tape, strong_student: bool, tb: &TeacherBranch| -> Result<Var> {
        let out = if strong_student {
            out_s.as_ref().expect("validated: second branch exists")
        } else {
            &out_w
        };
        let mask = tb.mask.as_f32();
        match cfg.feature_tap {
            FeatureTap::None => tape.kld(out.logits, &tb.logits, cfg.temperature, &mask),
            FeatureTap::PoolFeat => {
                let slot = strong_student as usize;
                let r = match regressed[slot] {
                    Some(r) => r,
                    None => {
                        let heads = learner
                            .heads
                            .as_ref()
                            .ok_or_else(|| CrldError::Config("feature tap needs regressors".into()))?;
                        let head = if strong_student { &heads.strong } else { &heads.weak };
                        let (r, vars) = head.forward(tape, out.pool_feat)?;
                        head_vars.push((strong_student, vars));
                        regressed[slot] = Some(r);
                        r
                    }
                };
                tape.masked_mse(r, &tb.feat, &mask)
            }
        }
    };

    let mut wv = None;
    let mut cv = None;
    if let Some(tw) = &t_w {
        if p.ww {
            let v = term(&mut tape, false, tw)?;
            wv = add_opt(&mut tape, wv, v)?;
        }
        if p.sw {
            let v = term(&mut tape, true, tw)?;
            cv = add_opt(&mut tape, cv, v)?;
        }
    }
    if let Some(ts) = &t_s {
        if p.ss {
            let v = term(&mut tape, true, ts)?;
            wv = add_opt(&mut tape, wv, v)?;
        }
        if p.ws {
            let v = term(&mut tape, false, ts)?;
            cv = add_opt(&mut tape, cv, v)?;
        }
    }
    let wv_value = wv.map_or(0.0, |v| tape.scalar(v));
    let cv_value = cv.map_or(0.0, |v| tape.scalar(v));

    let mut kd = None;
    if let Some(v) = wv {
        let s = tape.scale(v, cfg.lambda_wv as f32)?;
        kd = add_opt(&mut tape, kd, s)?;
    }
    if let Some(v) = cv {
        let s = tape.scale(v, cfg.lambda_cv as f32)?;
        kd = add_opt(&mut tape, kd, s)?;
    }
    let mut total = ce;
    if let Some(k) = kd {
        let s = tape.scale(k, cfg.lambda_kd as f32)?;
        total = add_opt(&mut tape, total, s)?;
    }
    let total = total.ok_or_else(|| CrldError::Config("objective has no terms".into()))?;
    let total_value = tape.scalar(total);
    for (name, v) in [
        ("loss_ce", ce_value),
        ("loss_wv", wv_value),
        ("loss_cv", cv_value),
        ("loss_total", total_value),
    ] {
        if !v.is_finite() {
            return Err(CrldError::NonFinite(format!("{name} = {v}")));
        }
    }

    let (hits1, hits5) = topk_hits(tape.value(out_w.logits), &labels);
    tape.backward(total)?;
    learner.student.absorb_grads(&tape, &out_w);
    if let Some(o) = &out_s {
        learner.student.absorb_grads(&tape, o);
    }
    if let Some(heads) = learner.heads.as_mut() {
        for (strong, vars) in &head_vars {
            let head = if *strong { &mut heads.strong } else { &mut heads.weak };
            absorb_params(head.params_mut(), &tape, vars);
        }
        // a head no term used still needs a (zero) gradient for the update
        for head in [&mut heads.weak, &mut heads.strong] {
            for p in head.params_mut() {
                if p.value.grad.is_none() {
                    p.value.grad = Some(vec![0.0; p.value.numel()]);
                }
            }
        }
    }
    learner.apply_update(lr)?;

    let n = labels.len() as f64;
    Ok(StepOutput {
        loss_ce: ce_value,
        loss_wv: wv_value,
        loss_cv: cv_value,
        loss_total: total_value,
        mask_rate_w: t_w.as_ref().map_or(0.0, |t| t.mask.rate()),
        mask_rate_s: t_s.as_ref().map_or(0.0, |t| t.mask.rate()),
        batch_top1: hits1 as f64 / n,
        batch_top5: hits5 as f64 / n,
    })
}
