//! Experiment commands: pretraining, distillation, evaluation, the ablation
//! and sensitivity grids, and augmentation previews.
//!
//! Every command writes into the configured output directory:
//!
//! | command          | outputs under `output.dir`                                   |
//! |------------------|--------------------------------------------------------------|
//! | `pretrain`       | `teacher/` metrics, manifest; the teacher checkpoint         |
//! | `distill`        | `distill/` metrics, manifest, `summary.json`, checkpoints    |
//! | `eval`           | `eval.csv`                                                   |
//! | `ablate`         | `ablate/expt_X/distill/...`, `ablate/ablate.csv`             |
//! | `sweep-tau`      | `sweep_tau/<point>/distill/...`, matrix and point CSVs       |
//! | `sweep-strength` | `sweep_strength/<point>/distill/...`, `sweep_strength.csv`   |
//! | `view-mode`      | `view_mode/<mode>/distill/...`, `view_mode.csv`              |
//! | `augment-preview`| `preview/{i}_weak.ppm`, `preview/{i}_strong.ppm`, manifest   |

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{parse_pairings, DatasetSpec, KvDoc, PretrainConfig, RunConfig, SweepConfig};

use crate::augment::{strong_view_traced, weak_view, AppliedOp, ImageU8, StrongPolicy};
use crate::data::{load_cifar_binary, synthetic_pair, Dataset, Split};
use crate::distill::{
    evaluate, train, DistillConfig, OptimConfig, Pairings, TrainOptions, ViewMode, METRICS_FILE, STUDENT_FILE,
};
use crate::error::{CrldError, Result};
use crate::metrics::{ensure_dir, read_metrics};
use crate::nn::{load_checkpoint, Model, CHECKPOINT_VERSION};
use crate::rng::{Lane, RngStream};

pub const MANIFEST_FILE: &str = "manifest.conf";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.conf";
pub const METRICS_VERSION: u32 = 1;

/// The subcommands of the `crld` binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Distill,
    Eval,
    Ablate,
    SweepTau,
    SweepStrength,
    ViewMode,
    AugmentPreview,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Pretrain,
        Command::Distill,
        Command::Eval,
        Command::Ablate,
        Command::SweepTau,
        Command::SweepStrength,
        Command::ViewMode,
        Command::AugmentPreview,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::SweepTau => "sweep-tau",
            Command::SweepStrength => "sweep-strength",
            Command::ViewMode => "view-mode",
            Command::AugmentPreview => "augment-preview",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = CrldError;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CrldError::Config(format!("unknown command {s:?}")))
    }
}

/// How grid commands execute their points.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Runner {
    #[default]
    Sequential,
    /// Each point runs as `exe distill --config <point>/config.conf`, at
    /// most `jobs` at a time.
    Processes { exe: PathBuf, jobs: usize },
}

/// Final numbers of one distillation run, stored as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub epochs: usize,
    pub top1: f64,
    pub top5: f64,
    /// Mean over training epochs; `None` when no epoch ran.
    pub mask_rate_w: Option<f64>,
    pub mask_rate_s: Option<f64>,
}

/// A CSV table that also prints column-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|i| {
                self.rows
                    .iter()
                    .map(|r| r[i].len())
                    .chain([self.header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(f, "{}", cells.join("  ").trim_end())?;
        }
        Ok(())
    }
}

fn acc(x: f64) -> String {
    format!("{x:.4}")
}

fn opt_rate(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CrldError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CrldError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(cfg.to_string().as_bytes())
}

/// Loads the train and test splits; the test split is normalised with the
/// training statistics.
pub fn load_data(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Synthetic {
            spec,
            test_per_class,
        } => synthetic_pair(spec, *test_per_class),
        DatasetSpec::Cifar {
            variant,
            train,
            test,
        } => {
            let tr = load_cifar_binary(train, *variant, Split::Train)?;
            let te = load_cifar_binary(test, *variant, Split::Test)?.with_stats(tr.stats);
            Ok((tr, te))
        }
    }
}

/// The configuration plus everything needed to reproduce the run.
pub fn manifest(cfg: &RunConfig, command: Command, mode: &str, seed: u64) -> KvDoc {
    let mut doc = cfg.to_doc();
    doc.set("manifest.command", command);
    doc.set("manifest.mode", mode);
    doc.set("manifest.seed", seed);
    doc.set("manifest.config_sha256", config_hash(cfg));
    doc.set("manifest.crate_version", env!("CARGO_PKG_VERSION"));
    doc.set("manifest.checkpoint_version", CHECKPOINT_VERSION);
    doc.set("manifest.metrics_version", METRICS_VERSION);
    doc
}

/// Trains the teacher with cross-entropy on weak views and writes its
/// checkpoint to [`RunConfig::teacher_path`].
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<RunSummary> {
    let (train_ds, test_ds) = load_data(&cfg.dataset)?;
    let dir = cfg.out_dir.join("teacher");
    let dcfg = DistillConfig {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        seed: cfg.pretrain.seed,
        ..DistillConfig::supervised()
    };
    let optim = OptimConfig {
        lr: cfg.pretrain.lr,
        milestones: None,
        ..cfg.optim.clone()
    };
    ensure_dir(&dir)?;
    let mut m = manifest(cfg, Command::Pretrain, &dcfg.mode_name(), dcfg.seed);
    let (first, second) = dcfg.view_mode.branch_transforms();
    m.set("manifest.branch_first", first);
    m.set("manifest.branch_second", second);
    write_atomic(&dir.join(MANIFEST_FILE), m.to_string().as_bytes())?;
    let opts = TrainOptions {
        out_dir: Some(dir.clone()),
        ..TrainOptions::default()
    };
    let out = train(None, &cfg.teacher, &train_ds, &test_ds, &dcfg, &optim, &opts)?;
    let student_ckpt = dir.join(STUDENT_FILE);
    let target = cfg.teacher_path();
    if let Some(parent) = target.parent() {
        ensure_dir(parent)?;
    }
    fs::rename(&student_ckpt, &target).map_err(|e| CrldError::io(&target, e))?;
    let summary = summarise(&dcfg, &dir, &out.learner.student, &test_ds)?;
    write_summary(&dir, &summary)?;
    Ok(summary)
}

pub fn load_teacher(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.teacher_path();
    if !path.exists() {
        return Err(CrldError::MissingTeacher(path));
    }
    load_checkpoint(&path, &cfg.teacher)
}

fn summarise(dcfg: &DistillConfig, dir: &Path, model: &Model, test_ds: &Dataset) -> Result<RunSummary> {
    let records = read_metrics(&dir.join(METRICS_FILE))?;
    let train_recs: Vec<_> = records.iter().filter(|r| r.is_split(Split::Train)).collect();
    let mean = |f: fn(&crate::metrics::MetricsRecord) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = train_recs.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (top1, top5) = match records.iter().rev().find(|r| r.is_split(Split::Test)) {
        Some(r) => (r.top1, r.top5),
        None => {
            let a = evaluate(model, test_ds)?;
            (a.top1, a.top5)
        }
    };
    Ok(RunSummary {
        mode: dcfg.mode_name(),
        epochs: dcfg.epochs,
        top1,
        top5,
        mask_rate_w: mean(|r| r.mask_rate_w),
        mask_rate_s: mean(|r| r.mask_rate_s),
    })
}

fn write_summary(dir: &Path, s: &RunSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(s).map_err(|e| CrldError::Format(e.to_string()))?;
    write_atomic(&dir.join(SUMMARY_FILE), json.as_bytes())
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CrldError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CrldError::Format(format!("{}: {e}", path.display())))
}

/// One distillation into `cfg.out_dir/distill` with an already loaded
/// teacher and data.
pub fn run_distill(cfg: &RunConfig, teacher: &Model, data: &(Dataset, Dataset), resume: bool) -> Result<RunSummary> {
    let dir = cfg.out_dir.join("distill");
    ensure_dir(&dir)?;
    let d = &cfg.distill;
    let mut m = manifest(cfg, Command::Distill, &d.mode_name(), d.seed);
    let (first, second) = d.view_mode.branch_transforms();
    m.set("manifest.branch_first", first);
    m.set("manifest.branch_second", second);
    let teacher_bytes = fs::read(cfg.teacher_path()).map_err(|e| CrldError::io(cfg.teacher_path(), e))?;
    m.set("manifest.teacher_sha256", sha256_hex(&teacher_bytes));
    write_atomic(&dir.join(MANIFEST_FILE), m.to_string().as_bytes())?;
    let opts = TrainOptions {
        out_dir: Some(dir.clone()),
        resume,
        halt_after: None,
    };
    let out = train(Some(teacher), &cfg.student, &data.0, &data.1, d, &cfg.optim, &opts)?;
    let summary = summarise(d, &dir, &out.learner.student, &data.1)?;
    write_summary(&dir, &summary)?;
    Ok(summary)
}

pub fn cmd_distill(cfg: &RunConfig, resume: bool) -> Result<RunSummary> {
    let teacher = load_teacher(cfg)?;
    let data = load_data(&cfg.dataset)?;
    run_distill(cfg, &teacher, &data, resume)
}

/// Test accuracy of whichever of the teacher and distilled student exist.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Table> {
    let (_, test_ds) = load_data(&cfg.dataset)?;
    let mut t = Table::new(&["model", "checkpoint", "top1", "top5"]);
    let student_path = cfg.out_dir.join("distill").join(STUDENT_FILE);
    for (name, path, mcfg) in [
        ("teacher", cfg.teacher_path(), &cfg.teacher),
        ("student", student_path, &cfg.student),
    ] {
        if !path.exists() {
            continue;
        }
        let a = evaluate(&load_checkpoint(&path, mcfg)?, &test_ds)?;
        t.push(vec![name.into(), path.display().to_string(), acc(a.top1), acc(a.top5)]);
    }
    if t.rows.is_empty() {
        return Err(CrldError::MissingTeacher(cfg.teacher_path()));
    }
    write_atomic(&cfg.out_dir.join("eval.csv"), t.to_csv().as_bytes())?;
    Ok(t)
}

/// A named variant of the base configuration inside a grid.
struct GridPoint {
    label: String,
    cfg: RunConfig,
}

fn grid_point(base: &RunConfig, group: &str, label: String, distill: DistillConfig) -> GridPoint {
    let mut cfg = base.clone();
    cfg.teacher_checkpoint = Some(base.teacher_path());
    cfg.out_dir = base.out_dir.join(group).join(&label);
    cfg.distill = distill;
    GridPoint { label, cfg }
}

fn run_grid(base: &RunConfig, points: &[GridPoint], runner: &Runner) -> Result<Vec<RunSummary>> {
    let teacher = load_teacher(base)?;
    for p in points {
        write_atomic(&p.cfg.out_dir.join(CONFIG_FILE), p.cfg.to_string().as_bytes())?;
    }
    match runner {
        Runner::Sequential => {
            let data = load_data(&base.dataset)?;
            points
                .iter()
                .map(|p| {
                    log::info!("grid point {}", p.label);
                    run_distill(&p.cfg, &teacher, &data, false)
                })
                .collect()
        }
        Runner::Processes { exe, jobs } => {
            let jobs = (*jobs).max(1);
            let mut running: Vec<(String, Child)> = Vec::new();
            let mut queue = points.iter();
            loop {
                while running.len() < jobs {
                    let Some(p) = queue.next() else { break };
                    let conf = p.cfg.out_dir.join(CONFIG_FILE);
                    log::info!("spawning grid point {}", p.label);
                    let child = Process::new(exe)
                        .args(["distill", "--config"])
                        .arg(&conf)
                        .spawn()
                        .map_err(|e| CrldError::io(exe, e))?;
                    running.push((p.label.clone(), child));
                }
                if running.is_empty() {
                    break;
                }
                let (label, mut child) = running.remove(0);
                let status = child.wait().map_err(|e| CrldError::io(exe, e))?;
                if !status.success() {
                    return Err(CrldError::Config(format!("grid point {label} failed: {status}")));
                }
            }
            points.iter().map(|p| read_summary(&p.cfg.out_dir.join("distill"))).collect()
        }
    }
}

fn write_table(path: &Path, t: &Table) -> Result<()> {
    write_atomic(path, t.to_csv().as_bytes())
}

/// Runs the ten pairing designs `expt_A`..`expt_J` with shared seeds.
pub fn cmd_ablate(cfg: &RunConfig, runner: &Runner) -> Result<Table> {
    let points: Vec<GridPoint> = Pairings::EXPT_LETTERS
        .iter()
        .map(|&l| {
            let d = DistillConfig {
                pairings: Pairings::expt(l).expect("letters are valid"),
                ..cfg.distill.clone()
            };
            grid_point(cfg, "ablate", format!("expt_{l}"), d)
        })
        .collect();
    let res = run_grid(cfg, &points, runner)?;
    let mut t = Table::new(&["expt", "ww", "ss", "ws", "sw", "top1", "top5"]);
    for (l, r) in Pairings::EXPT_LETTERS.iter().zip(&res) {
        let p = Pairings::expt(*l).expect("letters are valid");
        let mark = |b: bool| if b { "x" } else { "" }.to_string();
        t.push(vec![
            l.to_string(),
            mark(p.ww),
            mark(p.ss),
            mark(p.ws),
            mark(p.sw),
            acc(r.top1),
            acc(r.top5),
        ]);
    }
    write_table(&cfg.out_dir.join("ablate").join("ablate.csv"), &t)?;
    Ok(t)
}

/// One run per `(tau_w, tau_s)` pair. Returns the accuracy matrix; the
/// per-point CSV with mask rates is written next to it.
pub fn cmd_sweep_tau(cfg: &RunConfig, runner: &Runner) -> Result<Table> {
    let grid = &cfg.sweep;
    let mut points = Vec::new();
    for &tw in &grid.tau_w {
        for &ts in &grid.tau_s {
            let d = DistillConfig {
                tau_w: tw,
                tau_s: ts,
                ..cfg.distill.clone()
            };
            points.push(grid_point(cfg, "sweep_tau", format!("tw{tw}_ts{ts}"), d));
        }
    }
    let res = run_grid(cfg, &points, runner)?;
    let mut cols = vec!["tau_w\\tau_s".to_string()];
    cols.extend(grid.tau_s.iter().map(|t| t.to_string()));
    let mut matrix = Table {
        header: cols,
        rows: Vec::new(),
    };
    let mut flat = Table::new(&["tau_w", "tau_s", "top1", "top5", "mask_rate_w", "mask_rate_s"]);
    for (i, &tw) in grid.tau_w.iter().enumerate() {
        let mut row = vec![tw.to_string()];
        for (j, &ts) in grid.tau_s.iter().enumerate() {
            let r = &res[i * grid.tau_s.len() + j];
            row.push(acc(r.top1));
            flat.push(vec![
                tw.to_string(),
                ts.to_string(),
                acc(r.top1),
                acc(r.top5),
                opt_rate(r.mask_rate_w),
                opt_rate(r.mask_rate_s),
            ]);
        }
        matrix.push(row);
    }
    let dir = cfg.out_dir.join("sweep_tau");
    write_table(&dir.join("sweep_tau.csv"), &matrix)?;
    write_table(&dir.join("sweep_tau_points.csv"), &flat)?;
    Ok(matrix)
}

/// One run per `(n, p_s)` strong-view setting.
pub fn cmd_sweep_strength(cfg: &RunConfig, runner: &Runner) -> Result<Table> {
    let mut points = Vec::new();
    for &n in &cfg.sweep.n {
        for &p_s in &cfg.sweep.p_s {
            let d = DistillConfig {
                strong: StrongPolicy {
                    n,
                    p_s,
                    ..cfg.distill.strong.clone()
                },
                ..cfg.distill.clone()
            };
            points.push(grid_point(cfg, "sweep_strength", format!("n{n}_ps{p_s}"), d));
        }
    }
    let res = run_grid(cfg, &points, runner)?;
    let mut t = Table::new(&["n", "p_s", "top1", "top5", "mask_rate_w", "mask_rate_s"]);
    for (p, r) in points.iter().zip(&res) {
        let s = &p.cfg.distill.strong;
        t.push(vec![
            s.n.to_string(),
            s.p_s.to_string(),
            acc(r.top1),
            acc(r.top5),
            opt_rate(r.mask_rate_w),
            opt_rate(r.mask_rate_s),
        ]);
    }
    write_table(&cfg.out_dir.join("sweep_strength").join("sweep_strength.csv"), &t)?;
    Ok(t)
}

/// The four view designs. `no_cvl` keeps strong/weak views but only the
/// within-view pairings, which is exactly `expt_G`.
pub fn view_mode_rows(base: &DistillConfig) -> Vec<(&'static str, DistillConfig)> {
    let with = |view_mode, pairings| DistillConfig {
        view_mode,
        pairings,
        ..base.clone()
    };
    vec![
        ("weak_weak", with(ViewMode::WeakWeak, Pairings::ALL)),
        ("strong_strong", with(ViewMode::StrongStrong, Pairings::ALL)),
        ("strong_weak", with(ViewMode::StrongWeak, Pairings::ALL)),
        (
            "no_cvl",
            with(ViewMode::StrongWeak, Pairings::expt('G').expect("G is valid")),
        ),
    ]
}

pub fn cmd_view_mode(cfg: &RunConfig, runner: &Runner) -> Result<Table> {
    let rows = view_mode_rows(&cfg.distill);
    let points: Vec<GridPoint> = rows
        .iter()
        .map(|(name, d)| grid_point(cfg, "view_mode", name.to_string(), d.clone()))
        .collect();
    let res = run_grid(cfg, &points, runner)?;
    let mut t = Table::new(&["mode", "first", "second", "pairings", "top1", "top5"]);
    for ((name, d), r) in rows.iter().zip(&res) {
        let (a, b) = d.view_mode.branch_transforms();
        t.push(vec![
            name.to_string(),
            a.into(),
            b.into(),
            d.mode_name(),
            acc(r.top1),
            acc(r.top5),
        ]);
    }
    write_table(&cfg.out_dir.join("view_mode").join("view_mode.csv"), &t)?;
    Ok(t)
}

/// One weak/strong preview pair and the strong operations behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct PreviewPair {
    pub index: usize,
    pub weak: ImageU8,
    pub strong: ImageU8,
    pub ops: Vec<AppliedOp>,
}

/// Views of the first `count` images, split across `workers` threads. Each
/// image draws from its own stream, so the result does not depend on the
/// worker count.
pub fn preview_pairs(
    images: &[ImageU8],
    count: usize,
    seed: u64,
    policy: &StrongPolicy,
    workers: usize,
) -> Vec<PreviewPair> {
    let count = count.min(images.len());
    let make = |i: usize| {
        let weak = weak_view(&images[i], &mut RngStream::new(seed, Lane::Preview, 0, i as u64));
        let (strong, ops) = strong_view_traced(&images[i], policy, &mut RngStream::new(seed, Lane::Preview, 1, i as u64));
        PreviewPair {
            index: i,
            weak,
            strong,
            ops,
        }
    };
    let workers = workers.clamp(1, count.max(1));
    let chunk = count.div_ceil(workers).max(1);
    let idx: Vec<usize> = (0..count).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = idx
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|&i| make(i)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("preview worker panicked"))
            .collect()
    })
}

/// Writes `preview/{i}_weak.ppm` and `preview/{i}_strong.ppm` for the first
/// `preview.count` training images plus a manifest listing each image's
/// operations and strengths.
pub fn cmd_augment_preview(cfg: &RunConfig) -> Result<Table> {
    let (train_ds, _) = load_data(&cfg.dataset)?;
    let dir = cfg.out_dir.join("preview");
    ensure_dir(&dir)?;
    let seed = cfg.distill.seed;
    let pairs = preview_pairs(&train_ds.images, cfg.preview_count, seed, &cfg.distill.strong, 1);
    let mut m = manifest(cfg, Command::AugmentPreview, "preview", seed);
    let mut t = Table::new(&["index", "step", "op", "strength"]);
    for p in &pairs {
        write_atomic(&dir.join(format!("{}_weak.ppm", p.index)), &p.weak.to_ppm())?;
        write_atomic(&dir.join(format!("{}_strong.ppm", p.index)), &p.strong.to_ppm())?;
        let ops: Vec<String> = p.ops.iter().map(|o| format!("{}:{}", o.kind, o.v)).collect();
        m.set(&format!("preview.{}.ops", p.index), ops.join(","));
        for (k, o) in p.ops.iter().enumerate() {
            t.push(vec![p.index.to_string(), k.to_string(), o.kind.to_string(), o.v.to_string()]);
        }
    }
    write_atomic(&dir.join(MANIFEST_FILE), m.to_string().as_bytes())?;
    Ok(t)
}

/// Dispatches a command and renders its result for the terminal.
pub fn run_command(command: Command, cfg: &RunConfig, runner: &Runner, resume: bool) -> Result<String> {
    let summary = |s: RunSummary| {
        format!(
            "{} ({} epochs): top1 {:.4} top5 {:.4}\n",
            s.mode, s.epochs, s.top1, s.top5
        )
    };
    Ok(match command {
        Command::Pretrain => summary(cmd_pretrain(cfg)?),
        Command::Distill => summary(cmd_distill(cfg, resume)?),
        Command::Eval => cmd_eval(cfg)?.to_string(),
        Command::Ablate => cmd_ablate(cfg, runner)?.to_string(),
        Command::SweepTau => cmd_sweep_tau(cfg, runner)?.to_string(),
        Command::SweepStrength => cmd_sweep_strength(cfg, runner)?.to_string(),
        Command::ViewMode => cmd_view_mode(cfg, runner)?.to_string(),
        Command::AugmentPreview => cmd_augment_preview(cfg)?.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("train".parse::<Command>().is_err());
    }

    #[test]
    fn table_formats() {
        let mut t = Table::new(&["a", "bb"]);
        t.push(vec!["1".into(), "2".into()]);
        assert_eq!(t.to_csv(), "a,bb\n1,2\n");
        assert_eq!(t.to_string(), "a  bb\n1  2\n");
        assert_eq!(t.column("bb").unwrap(), vec!["2"]);
    }

    #[test]
    fn no_cvl_is_expt_g() {
        let rows = view_mode_rows(&DistillConfig::default());
        assert_eq!(rows.len(), 4);
        let no_cvl = &rows[3].1;
        assert_eq!(no_cvl.mode_name(), "expt_G");
        assert_eq!(no_cvl.view_mode, ViewMode::StrongWeak);
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = sha256_hex(b"abc");
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
