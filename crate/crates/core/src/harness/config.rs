//! Flat `key = value` documents and the run configuration they encode.
//!
//! Lines are `namespace.key = value`; `#` starts a comment and blank lines
//! are ignored. Lists are comma separated. Serialisation writes every key in
//! a fixed order, so a parsed and re-serialised file is stable.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::StrongPolicy;
use crate::data::{CifarVariant, SyntheticSpec};
use crate::distill::{DistillConfig, FeatureTap, OptimConfig, Pairings, ViewMode};
use crate::error::{CrldError, Result};
use crate::nn::ModelConfig;

/// Ordered key/value pairs with unique keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        KvDoc::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CrldError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(CrldError::Config(format!("line {}: bad key {k:?}", n + 1)));
            }
            if doc.get(k).is_some() {
                return Err(CrldError::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            doc.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CrldError::io(path, e))?;
        KvDoc::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

impl fmt::Display for KvDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Typed lookups that remember which keys were consumed.
struct Reader<'a> {
    doc: &'a KvDoc,
    used: Vec<&'a str>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.push(key);
        self.doc.get(key)
    }

    fn or<T: FromStr>(&mut self, key: &'a str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CrldError::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    fn required(&mut self, key: &'a str) -> Result<&'a str> {
        self.raw(key)
            .ok_or_else(|| CrldError::Config(format!("missing required key {key}")))
    }

    fn list<T: FromStr>(&mut self, key: &'a str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse_list(v).map_err(|e| CrldError::Config(format!("{key}: {e}"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.doc.keys().find(|k| !self.used.contains(k)) {
            Some(k) => Err(CrldError::Config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn pairings_to_string(p: Pairings) -> String {
    let names: Vec<&str> = [(p.ww, "ww"), (p.ss, "ss"), (p.ws, "ws"), (p.sw, "sw")]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
    if names.is_empty() {
        "none".into()
    } else {
        names.join(",")
    }
}

/// Accepts `none`, a pairing list such as `ww,ws`, or `expt_A`..`expt_J`.
pub fn parse_pairings(v: &str) -> Result<Pairings> {
    if let Some(letter) = v.strip_prefix("expt_") {
        let mut chars = letter.chars();
        return match (chars.next(), chars.next()) {
            (Some(c), None) => Pairings::expt(c),
            _ => None,
        }
        .ok_or_else(|| CrldError::Config(format!("unknown experiment {v:?}")));
    }
    let mut p = Pairings::NONE;
    if v == "none" {
        return Ok(p);
    }
    for name in v.split(',').map(str::trim) {
        let slot = match name {
            "ww" => &mut p.ww,
            "ss" => &mut p.ss,
            "ws" => &mut p.ws,
            "sw" => &mut p.sw,
            other => return Err(CrldError::Config(format!("unknown pairing {other:?}"))),
        };
        *slot = true;
    }
    Ok(p)
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        spec: SyntheticSpec,
        test_per_class: usize,
    },
    Cifar {
        variant: CifarVariant,
        train: PathBuf,
        test: PathBuf,
    },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { spec, .. } => spec.num_classes,
            DatasetSpec::Cifar { variant, .. } => variant.num_classes(),
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        match self {
            DatasetSpec::Synthetic { spec, .. } => (spec.size, spec.size),
            DatasetSpec::Cifar { .. } => (32, 32),
        }
    }
}

/// Teacher pretraining settings. Momentum and weight decay come from the
/// shared optimizer section.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Grids walked by the sweep commands.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub tau_w: Vec<f64>,
    pub tau_s: Vec<f64>,
    pub n: Vec<usize>,
    pub p_s: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            tau_w: vec![0.5, 0.75, 0.9],
            tau_s: vec![0.2, 0.35, 0.5],
            n: vec![1, 2, 3],
            p_s: vec![0.5, 1.0],
        }
    }
}

/// Everything a command needs. Only the dataset and the output directory
/// lack defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    /// Explicit teacher checkpoint; defaults to the one `pretrain` writes.
    pub teacher_checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub sweep: SweepConfig,
    pub preview_count: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(dataset: DatasetSpec, out_dir: impl Into<PathBuf>) -> Self {
        let (nc, size) = (dataset.num_classes(), dataset.image_size());
        RunConfig {
            teacher: ModelConfig::teacher(nc, size),
            student: ModelConfig::student(nc, size),
            dataset,
            teacher_checkpoint: None,
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
            optim: OptimConfig::default(),
            sweep: SweepConfig::default(),
            preview_count: 8,
            out_dir: out_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_doc(&KvDoc::read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        RunConfig::from_doc(&KvDoc::parse(text)?)
    }

    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        let mut r = Reader {
            doc,
            used: Vec::new(),
        };
        let kind = r.required("dataset.kind")?;
        let dataset = match kind {
            "synthetic" => DatasetSpec::Synthetic {
                spec: SyntheticSpec {
                    seed: r.or("dataset.seed", 1)?,
                    num_classes: r.or("dataset.num_classes", 8)?,
                    per_class: r.or("dataset.per_class", 100)?,
                    size: r.or("dataset.size", 32)?,
                },
                test_per_class: r.or("dataset.test_per_class", 100)?,
            },
            other => DatasetSpec::Cifar {
                variant: other.parse()?,
                train: PathBuf::from(r.required("dataset.train_path")?),
                test: PathBuf::from(r.required("dataset.test_path")?),
            },
        };
        let out_dir = PathBuf::from(r.required("output.dir")?);
        let mut cfg = RunConfig::new(dataset, out_dir);

        for (prefix, m) in [("teacher", &mut cfg.teacher), ("student", &mut cfg.student)] {
            let (arch, channels, blocks) = match prefix {
                "teacher" => ("teacher.arch", "teacher.channels", "teacher.blocks"),
                _ => ("student.arch", "student.channels", "student.blocks"),
            };
            m.arch = r.or(arch, m.arch)?;
            m.stage_channels = r.list(channels, m.stage_channels.clone())?;
            m.blocks_per_stage = r.or(blocks, m.blocks_per_stage)?;
        }
        cfg.teacher_checkpoint = r.raw("teacher.checkpoint").map(PathBuf::from);

        let p = &mut cfg.pretrain;
        p.epochs = r.or("pretrain.epochs", p.epochs)?;
        p.batch_size = r.or("pretrain.batch_size", p.batch_size)?;
        p.lr = r.or("pretrain.lr", p.lr)?;
        p.seed = r.or("pretrain.seed", p.seed)?;

        let d = &mut cfg.distill;
        d.tau_w = r.or("distill.tau_w", d.tau_w)?;
        d.tau_s = r.or("distill.tau_s", d.tau_s)?;
        d.temperature = r.or("distill.temperature", d.temperature)?;
        d.lambda_wv = r.or("distill.lambda_wv", d.lambda_wv)?;
        d.lambda_cv = r.or("distill.lambda_cv", d.lambda_cv)?;
        d.lambda_kd = r.or("distill.lambda_kd", d.lambda_kd)?;
        if let Some(v) = r.raw("distill.pairings") {
            d.pairings = parse_pairings(v)?;
        }
        d.view_mode = r.or::<ViewMode>("distill.view_mode", d.view_mode)?;
        d.lfkd = r.or("distill.lfkd", d.lfkd)?;
        d.feature_tap = r.or::<FeatureTap>("distill.feature_tap", d.feature_tap)?;
        d.epochs = r.or("distill.epochs", d.epochs)?;
        d.batch_size = r.or("distill.batch_size", d.batch_size)?;
        d.seed = r.or("distill.seed", d.seed)?;
        d.strong = StrongPolicy {
            n: r.or("augment.n", d.strong.n)?,
            p_s: r.or("augment.p_s", d.strong.p_s)?,
            ..StrongPolicy::default()
        };

        let o = &mut cfg.optim;
        o.lr = r.or("optim.lr", o.lr)?;
        o.momentum = r.or("optim.momentum", o.momentum)?;
        o.weight_decay = r.or("optim.weight_decay", o.weight_decay)?;
        if let Some(v) = r.raw("optim.milestones") {
            o.milestones = match v {
                "auto" => None,
                v => Some(parse_list(v).map_err(|e| CrldError::Config(format!("optim.milestones: {e}")))?),
            };
        }

        let s = &mut cfg.sweep;
        s.tau_w = r.list("sweep.tau_w", s.tau_w.clone())?;
        s.tau_s = r.list("sweep.tau_s", s.tau_s.clone())?;
        s.n = r.list("sweep.n", s.n.clone())?;
        s.p_s = r.list("sweep.p_s", s.p_s.clone())?;
        cfg.preview_count = r.or("preview.count", cfg.preview_count)?;
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut d = KvDoc::new();
        match &self.dataset {
            DatasetSpec::Synthetic {
                spec,
                test_per_class,
            } => {
                d.set("dataset.kind", "synthetic");
                d.set("dataset.seed", spec.seed);
                d.set("dataset.num_classes", spec.num_classes);
                d.set("dataset.per_class", spec.per_class);
                d.set("dataset.test_per_class", test_per_class);
                d.set("dataset.size", spec.size);
            }
            DatasetSpec::Cifar {
                variant,
                train,
                test,
            } => {
                d.set("dataset.kind", variant);
                d.set("dataset.train_path", train.display());
                d.set("dataset.test_path", test.display());
            }
        }
        d.set("output.dir", self.out_dir.display());
        for (prefix, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            d.set(&format!("{prefix}.arch"), m.arch);
            d.set(&format!("{prefix}.channels"), join(&m.stage_channels));
            d.set(&format!("{prefix}.blocks"), m.blocks_per_stage);
        }
        if let Some(p) = &self.teacher_checkpoint {
            d.set("teacher.checkpoint", p.display());
        }
        let p = &self.pretrain;
        d.set("pretrain.epochs", p.epochs);
        d.set("pretrain.batch_size", p.batch_size);
        d.set("pretrain.lr", p.lr);
        d.set("pretrain.seed", p.seed);
        let c = &self.distill;
        d.set("distill.tau_w", c.tau_w);
        d.set("distill.tau_s", c.tau_s);
        d.set("distill.temperature", c.temperature);
        d.set("distill.lambda_wv", c.lambda_wv);
        d.set("distill.lambda_cv", c.lambda_cv);
        d.set("distill.lambda_kd", c.lambda_kd);
        d.set("distill.pairings", pairings_to_string(c.pairings));
        d.set("distill.view_mode", c.view_mode);
        d.set("distill.lfkd", c.lfkd);
        d.set("distill.feature_tap", c.feature_tap);
        d.set("distill.epochs", c.epochs);
        d.set("distill.batch_size", c.batch_size);
        d.set("distill.seed", c.seed);
        d.set("augment.n", c.strong.n);
        d.set("augment.p_s", c.strong.p_s);
        let o = &self.optim;
        d.set("optim.lr", o.lr);
        d.set("optim.momentum", o.momentum);
        d.set("optim.weight_decay", o.weight_decay);
        d.set(
            "optim.milestones",
            o.milestones.as_deref().map_or("auto".to_string(), join),
        );
        let s = &self.sweep;
        d.set("sweep.tau_w", join(&s.tau_w));
        d.set("sweep.tau_s", join(&s.tau_s));
        d.set("sweep.n", join(&s.n));
        d.set("sweep.p_s", join(&s.p_s));
        d.set("preview.count", self.preview_count);
        d
    }

    pub fn validate(&self) -> Result<()> {
        let nc = self.dataset.num_classes();
        let size = self.dataset.image_size();
        for m in [&self.teacher, &self.student] {
            if m.num_classes != nc || m.input_size != size {
                return Err(CrldError::Config(format!(
                    "model expects {} classes at {:?}, dataset has {nc} at {size:?}",
                    m.num_classes, m.input_size
                )));
            }
            m.validate()?;
        }
        self.distill.validate()?;
        if self.pretrain.batch_size < 2 {
            return Err(CrldError::Config("pretrain.batch_size must be at least 2".into()));
        }
        if self.sweep.tau_w.iter().chain(&self.sweep.tau_s).any(|t| !(0.0..=1.0).contains(t)) {
            return Err(CrldError::Config("sweep thresholds must lie in [0, 1]".into()));
        }
        if self.sweep.n.contains(&0) {
            return Err(CrldError::Config("sweep.n values must be at least 1".into()));
        }
        if self.sweep.p_s.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(CrldError::Config("sweep.p_s values must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Teacher checkpoint location: explicit, or under the output directory.
    pub fn teacher_path(&self) -> PathBuf {
        self.teacher_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("teacher").join("teacher.ckpt"))
    }

    /// Applies a command-line seed to both pretraining and distillation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.distill.seed = seed;
        self
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.to_doc().fmt(f)
    }
}
