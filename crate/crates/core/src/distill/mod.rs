//! The distillation objective: soft-label selection, within-view and
//! cross-view consistency terms, the training step and loop.

mod step;
mod train;

pub use step::{crld_step, make_views, FeatureHeads, Learner, StepOutput};
pub use train::{
    evaluate, train, Accuracy, OptimConfig, TrainOptions, TrainOutcome, METRICS_FILE, RESUME_FILE, STUDENT_FILE,
};

use std::fmt;
use std::str::FromStr;

use crate::augment::StrongPolicy;
use crate::error::{CrldError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which teacher/student view pairings contribute a consistency term.
/// `ws` pairs the student's weak view with the teacher's strong view and
/// `sw` the student's strong view with the teacher's weak view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Pairings {
    pub ww: bool,
    pub ss: bool,
    pub ws: bool,
    pub sw: bool,
}

impl Pairings {
    pub const NONE: Pairings = Pairings {
        ww: false,
        ss: false,
        ws: false,
        sw: false,
    };
    pub const ALL: Pairings = Pairings {
        ww: true,
        ss: true,
        ws: true,
        sw: true,
    };

    pub const EXPT_LETTERS: [char; 10] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];

    /// The ablation grid: A–D enable one pairing each, E–J combine them.
    pub fn expt(letter: char) -> Option<Self> {
        let p = |ww, ss, ws, sw| Pairings { ww, ss, ws, sw };
        Some(match letter.to_ascii_uppercase() {
            'A' => p(true, false, false, false),
            'B' => p(false, true, false, false),
            'C' => p(false, false, true, false),
            'D' => p(false, false, false, true),
            'E' => p(true, false, true, false),
            'F' => p(true, false, false, true),
            'G' => p(true, true, false, false),
            'H' => p(true, true, true, false),
            'I' => p(true, true, false, true),
            'J' => p(true, true, true, true),
            _ => return None,
        })
    }

    /// Grid letter of this pairing set, if it is one of A–J.
    pub fn letter(&self) -> Option<char> {
        Self::EXPT_LETTERS
            .into_iter()
            .find(|&l| Self::expt(l) == Some(*self))
    }

    pub fn any(&self) -> bool {
        self.ww || self.ss || self.ws || self.sw
    }

    pub fn count(&self) -> usize {
        [self.ww, self.ss, self.ws, self.sw].iter().filter(|&&b| b).count()
    }

    /// Whether any enabled pairing touches a strong-branch prediction.
    pub fn uses_second_view(&self) -> bool {
        self.ss || self.ws || self.sw
    }
}

/// How the two branches are transformed. `WeakSingle` runs the weak branch
/// alone, which turns the step into classic single-view distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewMode {
    StrongWeak,
    WeakWeak,
    StrongStrong,
    WeakSingle,
}

impl ViewMode {
    pub fn name(self) -> &'static str {
        match self {
            ViewMode::StrongWeak => "strong_weak",
            ViewMode::WeakWeak => "weak_weak",
            ViewMode::StrongStrong => "strong_strong",
            ViewMode::WeakSingle => "weak_single",
        }
    }

    pub fn two_views(self) -> bool {
        self != ViewMode::WeakSingle
    }

    /// Transform names applied to the `(first, second)` branch.
    pub fn branch_transforms(self) -> (&'static str, &'static str) {
        match self {
            ViewMode::StrongWeak => ("weak", "strong"),
            ViewMode::WeakWeak => ("weak", "weak"),
            ViewMode::StrongStrong => ("strong", "strong"),
            ViewMode::WeakSingle => ("weak", "none"),
        }
    }
}

impl fmt::Display for ViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewMode {
    type Err = CrldError;
    fn from_str(s: &str) -> Result<Self> {
        [
            ViewMode::StrongWeak,
            ViewMode::WeakWeak,
            ViewMode::StrongStrong,
            ViewMode::WeakSingle,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| CrldError::Config(format!("unknown view mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureTap {
    None,
    PoolFeat,
}

impl fmt::Display for FeatureTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureTap::None => "none",
            FeatureTap::PoolFeat => "pool_feat",
        })
    }
}

impl FromStr for FeatureTap {
    type Err = CrldError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FeatureTap::None),
            "pool_feat" => Ok(FeatureTap::PoolFeat),
            other => Err(CrldError::Config(format!("unknown feature tap {other:?}"))),
        }
    }
}

/// Every knob of the distillation objective and its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub tau_w: f64,
    pub tau_s: f64,
    pub temperature: f32,
    pub lambda_wv: f64,
    pub lambda_cv: f64,
    pub lambda_kd: f64,
    pub pairings: Pairings,
    pub view_mode: ViewMode,
    pub lfkd: bool,
    pub feature_tap: FeatureTap,
    pub strong: StrongPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_w: 0.75,
            tau_s: 0.35,
            temperature: 4.0,
            lambda_wv: 1.0,
            lambda_cv: 1.0,
            lambda_kd: 1.0,
            pairings: Pairings::ALL,
            view_mode: ViewMode::StrongWeak,
            lfkd: false,
            feature_tap: FeatureTap::None,
            strong: StrongPolicy::default(),
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Plain cross-entropy training on weak views, as used to pretrain a
    /// teacher.
    pub fn supervised() -> Self {
        DistillConfig {
            pairings: Pairings::NONE,
            view_mode: ViewMode::WeakSingle,
            ..DistillConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrldError::Config(m));
        for (name, tau) in [("tau_w", self.tau_w), ("tau_s", self.tau_s)] {
            if !(0.0..=1.0).contains(&tau) {
                return bad(format!("{name} = {tau} outside [0, 1]"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        for (name, l) in [
            ("lambda_wv", self.lambda_wv),
            ("lambda_cv", self.lambda_cv),
            ("lambda_kd", self.lambda_kd),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} = {l} must be non-negative"));
            }
        }
        if !self.pairings.any() && self.lfkd {
            return bad("label-free training needs at least one pairing".into());
        }
        if !self.view_mode.two_views() && self.pairings.uses_second_view() {
            return bad(format!(
                "view mode {} has no second branch for the enabled pairings",
                self.view_mode
            ));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        self.strong.validate()
    }

    /// Canonical run label: `lfkd`, `expt_A`..`expt_J`, `supervised`, or
    /// `custom`.
    pub fn mode_name(&self) -> String {
        if self.lfkd {
            return "lfkd".into();
        }
        if !self.pairings.any() {
            return "supervised".into();
        }
        match self.pairings.letter() {
            Some(l) => format!("expt_{l}"),
            None => "custom".into(),
        }
    }
}

/// Per-instance selection of teacher predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVec {
    bits: Vec<bool>,
    selected: usize,
}

impl MaskVec {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let selected = bits.iter().filter(|&&b| b).count();
        MaskVec { bits, selected }
    }

    pub fn ones(n: usize) -> Self {
        MaskVec::from_bits(vec![true; n])
    }

    pub fn zeros(n: usize) -> Self {
        MaskVec::from_bits(vec![false; n])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.selected
    }

    /// Fraction of selected instances; 0 for an empty mask.
    pub fn rate(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.selected as f64 / self.bits.len() as f64
        }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Selects row `b` iff its largest probability strictly exceeds `tau`. The
/// rows themselves are left untouched.
pub fn sls_mask(teacher_probs: &Tensor, tau: f64) -> Result<MaskVec> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CrldError::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let shape = teacher_probs.shape();
    if shape.len() != 2 {
        return Err(CrldError::shape("sls_mask", format!("{shape:?}")));
    }
    let bits = (0..shape[0])
        .map(|r| {
            let row = teacher_probs.row(r);
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(CrldError::InvalidArgument(format!(
                    "row {r} sums to {sum}, not a probability vector"
                )));
            }
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            Ok(max as f64 > tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskVec::from_bits(bits))
}

/// Teacher logits of both views with their masks.
pub struct TeacherViews<'a> {
    pub weak: &'a Tensor,
    pub strong: &'a Tensor,
    pub mask_w: &'a MaskVec,
    pub mask_s: &'a MaskVec,
}

/// `kld(S_w, T_w, M_w) + kld(S_s, T_s, M_s)`.
pub fn within_view_loss(tape: &mut Tape, s_w: Var, s_s: Var, t: &TeacherViews, temperature: f32) -> Result<Var> {
    let a = tape.kld(s_w, t.weak, temperature, &t.mask_w.as_f32())?;
    let b = tape.kld(s_s, t.strong, temperature, &t.mask_s.as_f32())?;
    tape.add(a, b)
}

/// `kld(S_s, T_w, M_w) + kld(S_w, T_s, M_s)`; each mask follows the view of
/// the teacher prediction it gates.
pub fn cross_view_loss(tape: &mut Tape, s_w: Var, s_s: Var, t: &TeacherViews, temperature: f32) -> Result<Var> {
    let a = tape.kld(s_s, t.weak, temperature, &t.mask_w.as_f32())?;
    let b = tape.kld(s_w, t.strong, temperature, &t.mask_s.as_f32())?;
    tape.add(a, b)
}

/// Feature-space analogue of the within-view and cross-view terms: each
/// KLD becomes a masked MSE between regressed student features and teacher
/// features. `r_w`/`r_s` are the regressed student weak/strong features.
/// Returns `(within, cross)`.
pub fn feature_consistency_loss(
    tape: &mut Tape,
    r_w: Var,
    r_s: Var,
    f_t_w: &Tensor,
    f_t_s: &Tensor,
    mask_w: &MaskVec,
    mask_s: &MaskVec,
) -> Result<(Var, Var)> {
    let (mw, ms) = (mask_w.as_f32(), mask_s.as_f32());
    let a = tape.masked_mse(r_w, f_t_w, &mw)?;
    let b = tape.masked_mse(r_s, f_t_s, &ms)?;
    let within = tape.add(a, b)?;
    let c = tape.masked_mse(r_s, f_t_w, &mw)?;
    let d = tape.masked_mse(r_w, f_t_s, &ms)?;
    let cross = tape.add(c, d)?;
    Ok((within, cross))
}
