//! Run configuration: a flat `section.key = value` text format with `#`
//! comments, layered as defaults ← file ← command-line overrides.
//!
//! Two presets exist. [`RunConfig::full_size`] is the full-size setting (seven
//! branches, 120 epochs) and is what an empty file yields.
//! [`RunConfig::desk`] is a small setting that trains in seconds on one
//! core.
//!
//! The `toggles` section switches whole components off. Each has a fallback:
//! without DyMAIN the blocks are plain; without DCML its weight is zero;
//! without PMoC every branch follows the main schedule.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{DcmlMetric, LossConfig, LossWeights};
use crate::model::{BlockKind, FuseMode, ModelConfig, TrainSchedules};
use crate::normalization::{StyleScale, DEFAULT_EPS};
use crate::params::Sgd;
use crate::schedules::{BranchScheduleSpec, MainScheduleSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub trunk_blocks: usize,
    pub clone_depth: usize,
    /// Branch count `k`.
    pub k: usize,
    /// Embedding width.
    pub d: usize,
    pub hidden_mult: usize,
    pub block_kind: BlockKind,
    pub dymain_blocks: usize,
    pub fuse: FuseMode,
    /// Use classical AdaIN scaling (`· σ_donor`) instead of `/ σ_donor`.
    pub adain_multiply: bool,
    pub eps: f64,
    /// Seed of the weight initialization.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    /// Total epochs `T`.
    pub epochs: usize,
    pub eta_min: f64,
    pub gamma_pow: f64,
    pub lambda_decay: f64,
    /// One PMoC period per branch.
    pub periods: Vec<usize>,
    pub main_eta: f64,
    pub warmup_epochs: usize,
    pub warmup_start_frac: f64,
    pub floor_frac: f64,
    pub momentum: f64,
    /// Optimizer steps per epoch; 0 means one pass over the training split.
    pub steps_per_epoch: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSection {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub margin: f64,
    pub dcml_metric: DcmlMetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub spec: SyntheticSpec,
    pub heldout_domain: usize,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoSection {
    pub out_dir: PathBuf,
    /// File names are resolved against `out_dir` unless absolute.
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub schedule_csv: PathBuf,
    /// Empty means no dump.
    pub dataset_dump: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Toggles {
    pub enable_dymain: bool,
    pub enable_dcml: bool,
    pub enable_pmoc: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub schedules: ScheduleSection,
    pub losses: LossSection,
    pub data: DataSection,
    pub io: IoSection,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl RunConfig {
    /// Full-size training setting: seven branches cloned from the last four
    /// of twelve blocks, DyMAIN on every branch block, 120 epochs, batches of
    /// 16 identities × 4 instances. Token and channel sizes stay at the
    /// synthetic generator's scale.
    pub fn full_size() -> Self {
        Self {
            model: ModelSection {
                trunk_blocks: 12,
                clone_depth: 4,
                k: 7,
                d: 16,
                hidden_mult: 2,
                block_kind: BlockKind::TokenMixLite,
                dymain_blocks: 4,
                fuse: FuseMode::Mean,
                adain_multiply: false,
                eps: DEFAULT_EPS,
                seed: 0,
            },
            schedules: ScheduleSection {
                epochs: 120,
                eta_min: 0.004,
                gamma_pow: 1.806,
                lambda_decay: 0.5,
                periods: vec![120, 60, 30, 24, 20, 15, 12],
                main_eta: 0.004,
                warmup_epochs: 10,
                warmup_start_frac: 0.01,
                floor_frac: 0.002,
                momentum: 0.9,
                steps_per_epoch: 0,
                grad_clip: 0.0,
            },
            losses: LossSection {
                w1: 1.0,
                w2: 1.0,
                w3: 0.01,
                margin: 0.3,
                dcml_metric: DcmlMetric::Chebyshev,
            },
            data: DataSection {
                spec: SyntheticSpec::default(),
                heldout_domain: 2,
                p: 16,
                k: 4,
            },
            io: IoSection {
                out_dir: PathBuf::from("runs"),
                checkpoint: PathBuf::from("model.ckpt"),
                metrics_csv: PathBuf::from("metrics.csv"),
                schedule_csv: PathBuf::from("schedule.csv"),
                dataset_dump: PathBuf::new(),
            },
            toggles: Toggles {
                enable_dymain: true,
                enable_dcml: true,
                enable_pmoc: true,
            },
        }
    }

    /// Desk-scale setting: three branches, 12 epochs of 20 steps, 20
    /// identities. The main rate is raised so the small model makes progress
    /// in few steps, and gradients are clipped: dividing by a donor's small σ
    /// occasionally produces a gradient spike that would otherwise diverge.
    pub fn desk() -> Self {
        let mut c = Self::full_size();
        c.model.trunk_blocks = 3;
        c.model.clone_depth = 2;
        c.model.k = 3;
        c.model.dymain_blocks = 2;
        c.schedules.epochs = 12;
        c.schedules.periods = vec![12, 6, 3];
        c.schedules.eta_min = 0.004;
        c.schedules.main_eta = 0.02;
        c.schedules.warmup_epochs = 1;
        c.schedules.steps_per_epoch = 20;
        c.schedules.grad_clip = 5.0;
        c.data.p = 8;
        c.data.k = 4;
        c
    }

    /// Every key in canonical order with its serialized value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.schedules;
        let l = &self.losses;
        let d = &self.data;
        let io = &self.io;
        let t = &self.toggles;
        let path = |p: &Path| p.to_string_lossy().into_owned();
        vec![
            ("model.trunk_blocks", m.trunk_blocks.to_string()),
            ("model.clone_depth", m.clone_depth.to_string()),
            ("model.k", m.k.to_string()),
            ("model.d", m.d.to_string()),
            ("model.hidden_mult", m.hidden_mult.to_string()),
            ("model.block_kind", m.block_kind.name().to_string()),
            ("model.dymain_blocks", m.dymain_blocks.to_string()),
            ("model.fuse", m.fuse.name().to_string()),
            ("model.adain_multiply", m.adain_multiply.to_string()),
            ("model.eps", float(m.eps)),
            ("model.seed", m.seed.to_string()),
            ("schedules.epochs", s.epochs.to_string()),
            ("schedules.eta_min", float(s.eta_min)),
            ("schedules.gamma_pow", float(s.gamma_pow)),
            ("schedules.lambda_decay", float(s.lambda_decay)),
            (
                "schedules.periods",
                s.periods
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(", "),
            ),
            ("schedules.main_eta", float(s.main_eta)),
            ("schedules.warmup_epochs", s.warmup_epochs.to_string()),
            ("schedules.warmup_start_frac", float(s.warmup_start_frac)),
            ("schedules.floor_frac", float(s.floor_frac)),
            ("schedules.momentum", float(s.momentum)),
            ("schedules.steps_per_epoch", s.steps_per_epoch.to_string()),
            ("schedules.grad_clip", float(s.grad_clip)),
            ("losses.w1", float(l.w1)),
            ("losses.w2", float(l.w2)),
            ("losses.w3", float(l.w3)),
            ("losses.margin", float(l.margin)),
            ("losses.dcml_metric", l.dcml_metric.name().to_string()),
            ("data.num_ids", d.spec.num_ids.to_string()),
            ("data.num_domains", d.spec.num_domains.to_string()),
            (
                "data.samples_per_id_per_domain",
                d.spec.samples_per_id_per_domain.to_string(),
            ),
            ("data.latent_dim", d.spec.latent_dim.to_string()),
            ("data.tokens", d.spec.tokens.to_string()),
            ("data.channels", d.spec.channels.to_string()),
            ("data.noise_sigma", float(d.spec.noise_sigma)),
            ("data.style_strength", float(d.spec.style_strength)),
            ("data.seed", d.spec.seed.to_string()),
            ("data.heldout_domain", d.heldout_domain.to_string()),
            ("data.p", d.p.to_string()),
            ("data.k", d.k.to_string()),
            ("io.out_dir", path(&io.out_dir)),
            ("io.checkpoint", path(&io.checkpoint)),
            ("io.metrics_csv", path(&io.metrics_csv)),
            ("io.schedule_csv", path(&io.schedule_csv)),
            ("io.dataset_dump", path(&io.dataset_dump)),
            ("toggles.enable_dymain", t.enable_dymain.to_string()),
            ("toggles.enable_dcml", t.enable_dcml.to_string()),
            ("toggles.enable_pmoc", t.enable_pmoc.to_string()),
        ]
    }

    /// Sets one `section.key`. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.trunk_blocks" => self.model.trunk_blocks = parse(key, v)?,
            "model.clone_depth" => self.model.clone_depth = parse(key, v)?,
            "model.k" => self.model.k = parse(key, v)?,
            "model.d" => self.model.d = parse(key, v)?,
            "model.hidden_mult" => self.model.hidden_mult = parse(key, v)?,
            "model.block_kind" => self.model.block_kind = parse(key, v)?,
            "model.dymain_blocks" => self.model.dymain_blocks = parse(key, v)?,
            "model.fuse" => self.model.fuse = parse(key, v)?,
            "model.adain_multiply" => self.model.adain_multiply = parse(key, v)?,
            "model.eps" => self.model.eps = parse(key, v)?,
            "model.seed" => self.model.seed = parse(key, v)?,
            "schedules.epochs" => self.schedules.epochs = parse(key, v)?,
            "schedules.eta_min" => self.schedules.eta_min = parse(key, v)?,
            "schedules.gamma_pow" => self.schedules.gamma_pow = parse(key, v)?,
            "schedules.lambda_decay" => self.schedules.lambda_decay = parse(key, v)?,
            "schedules.periods" => self.schedules.periods = parse_list(key, v)?,
            "schedules.main_eta" => self.schedules.main_eta = parse(key, v)?,
            "schedules.warmup_epochs" => self.schedules.warmup_epochs = parse(key, v)?,
            "schedules.warmup_start_frac" => self.schedules.warmup_start_frac = parse(key, v)?,
            "schedules.floor_frac" => self.schedules.floor_frac = parse(key, v)?,
            "schedules.momentum" => self.schedules.momentum = parse(key, v)?,
            "schedules.steps_per_epoch" => self.schedules.steps_per_epoch = parse(key, v)?,
            "schedules.grad_clip" => self.schedules.grad_clip = parse(key, v)?,
            "losses.w1" => self.losses.w1 = parse(key, v)?,
            "losses.w2" => self.losses.w2 = parse(key, v)?,
            "losses.w3" => self.losses.w3 = parse(key, v)?,
            "losses.margin" => self.losses.margin = parse(key, v)?,
            "losses.dcml_metric" => self.losses.dcml_metric = parse(key, v)?,
            "data.num_ids" => self.data.spec.num_ids = parse(key, v)?,
            "data.num_domains" => self.data.spec.num_domains = parse(key, v)?,
            "data.samples_per_id_per_domain" => {
                self.data.spec.samples_per_id_per_domain = parse(key, v)?
            }
            "data.latent_dim" => self.data.spec.latent_dim = parse(key, v)?,
            "data.tokens" => self.data.spec.tokens = parse(key, v)?,
            "data.channels" => self.data.spec.channels = parse(key, v)?,
            "data.noise_sigma" => self.data.spec.noise_sigma = parse(key, v)?,
            "data.style_strength" => self.data.spec.style_strength = parse(key, v)?,
            "data.seed" => self.data.spec.seed = parse(key, v)?,
            "data.heldout_domain" => self.data.heldout_domain = parse(key, v)?,
            "data.p" => self.data.p = parse(key, v)?,
            "data.k" => self.data.k = parse(key, v)?,
            "io.out_dir" => self.io.out_dir = PathBuf::from(v),
            "io.checkpoint" => self.io.checkpoint = PathBuf::from(v),
            "io.metrics_csv" => self.io.metrics_csv = PathBuf::from(v),
            "io.schedule_csv" => self.io.schedule_csv = PathBuf::from(v),
            "io.dataset_dump" => self.io.dataset_dump = PathBuf::from(v),
            "toggles.enable_dymain" => self.toggles.enable_dymain = parse(key, v)?,
            "toggles.enable_dcml" => self.toggles.enable_dcml = parse(key, v)?,
            "toggles.enable_pmoc" => self.toggles.enable_pmoc = parse(key, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `section.key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", i + 1),
                    format!("expected `section.key = value`, got `{line}`"),
                )
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like `section.key=value`"))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// The whole configuration in the file format; reloading it gives an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let this = key.split('.').next().unwrap_or("");
            if this != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {this}");
                section = this;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let s = &self.schedules;
        let d = &self.data;
        if s.periods.len() != m.k {
            return Err(Error::config(
                "schedules.periods",
                format!("has {} entries but model.k = {}", s.periods.len(), m.k),
            ));
        }
        if let Some(&p) = s.periods.iter().find(|&&p| p == 0 || p > s.epochs) {
            return Err(Error::config(
                "schedules.periods",
                format!("period {p} is outside 1..={}", s.epochs),
            ));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::config("schedules.momentum", "must be in [0, 1)"));
        }
        if !(s.grad_clip >= 0.0) {
            return Err(Error::config("schedules.grad_clip", "must be >= 0"));
        }
        if m.d == 0 {
            return Err(Error::config("model.d", "must be positive"));
        }
        if !(m.eps > 0.0) {
            return Err(Error::config("model.eps", "must be positive"));
        }
        self.model_config()
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        self.main_schedule()
            .validate()
            .map_err(|e| Error::config("schedules", e.to_string()))?;
        for spec in self.branch_specs() {
            spec.validate()
                .map_err(|e| Error::config("schedules", e.to_string()))?;
        }
        self.loss_config()
            .weights
            .validate()
            .map_err(|e| Error::config("losses", e.to_string()))?;
        if !(self.losses.margin >= 0.0) {
            return Err(Error::config("losses.margin", "must be >= 0"));
        }
        d.spec
            .validate()
            .map_err(|e| Error::config("data", e.to_string()))?;
        if d.heldout_domain >= d.spec.num_domains {
            return Err(Error::config(
                "data.heldout_domain",
                format!("must be below data.num_domains = {}", d.spec.num_domains),
            ));
        }
        if d.p < 2 || d.p > d.spec.num_ids {
            return Err(Error::config(
                "data.p",
                format!("must be in 2..={} (data.num_ids)", d.spec.num_ids),
            ));
        }
        let per_id = self.train_samples_per_id();
        if d.k < 2 || d.k > per_id {
            return Err(Error::config(
                "data.k",
                format!("must be in 2..={per_id} (training samples per identity)"),
            ));
        }
        Ok(())
    }

    /// Training samples available per identity: the first half (rounded up)
    /// of its samples in every source domain.
    pub fn train_samples_per_id(&self) -> usize {
        let spec = &self.data.spec;
        spec.samples_per_id_per_domain.div_ceil(2) * (spec.num_domains - 1).max(1)
    }

    /// Model architecture after toggles. Raw token sizes come from the data
    /// section and there is one class per identity.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            input_dim: self.data.spec.channels,
            tokens: self.data.spec.tokens,
            width: m.d,
            hidden_mult: m.hidden_mult,
            trunk_blocks: m.trunk_blocks,
            clone_depth: m.clone_depth,
            branches: m.k,
            classes: self.data.spec.num_ids,
            block_kind: m.block_kind,
            dymain_blocks: m.dymain_blocks,
            enable_dymain: self.toggles.enable_dymain,
            style_scale: if m.adain_multiply {
                StyleScale::Multiply
            } else {
                StyleScale::Divide
            },
            eps: m.eps,
        }
    }

    /// The optimizer, with clipping when `schedules.grad_clip` is positive.
    pub fn optimizer(&self) -> Sgd {
        let clip = self.schedules.grad_clip;
        Sgd::new(self.schedules.momentum).with_clip_norm((clip > 0.0).then_some(clip))
    }

    pub fn main_schedule(&self) -> MainScheduleSpec {
        let s = &self.schedules;
        MainScheduleSpec {
            eta: s.main_eta,
            warmup_epochs: s.warmup_epochs,
            warmup_start_frac: s.warmup_start_frac,
            floor_frac: s.floor_frac,
            total_epochs: s.epochs,
        }
    }

    /// One PMoC spec per configured period, regardless of the toggle.
    pub fn branch_specs(&self) -> Vec<BranchScheduleSpec> {
        let s = &self.schedules;
        s.periods
            .iter()
            .map(|&period| BranchScheduleSpec {
                total_epochs: s.epochs,
                period,
                eta_min: s.eta_min,
                gamma_pow: s.gamma_pow,
                lambda_decay: s.lambda_decay,
            })
            .collect()
    }

    /// Schedules after toggles: without PMoC the branches follow the main
    /// schedule.
    pub fn train_schedules(&self) -> TrainSchedules {
        TrainSchedules {
            main: self.main_schedule(),
            branches: self.toggles.enable_pmoc.then(|| self.branch_specs()),
            num_branches: self.model.k,
        }
    }

    /// Loss settings after toggles: without DCML its weight is zero.
    pub fn loss_config(&self) -> LossConfig {
        let l = &self.losses;
        LossConfig {
            weights: LossWeights {
                ce: l.w1,
                triplet: l.w2,
                dcml: if self.toggles.enable_dcml { l.w3 } else { 0.0 },
            },
            margin: l.margin,
            metric: l.dcml_metric,
        }
    }

    /// `name` resolved against `io.out_dir`, unless absolute.
    pub fn output_path(&self, name: &Path) -> PathBuf {
        self.io.out_dir.join(name)
    }
}

/// Shortest representation that parses back to the same `f64`.
fn float(x: f64) -> String {
    format!("{x:?}")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Defaults ← `path` ← `overrides`, validated, starting from `base`.
pub fn load_config_from<S: AsRef<str>>(
    base: RunConfig,
    path: Option<&Path>,
    overrides: &[S],
) -> Result<RunConfig> {
    let mut config = base;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text)?;
    }
    config.apply_overrides(overrides)?;
    config.validate()?;
    Ok(config)
}

/// [`load_config_from`] starting from the full-size preset.
pub fn load_config<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<RunConfig> {
    load_config_from(RunConfig::full_size(), Some(path), overrides)
}
