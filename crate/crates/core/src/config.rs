//! Line-oriented experiment configuration.
//!
//! Each non-blank line is `section.key = value`; `#` starts a comment.
//! Unknown keys, duplicate keys, malformed values and cross-field
//! violations are rejected with the offending line number (0 when the
//! problem involves only defaults).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::analysis::CurveAggregation;
use crate::data::{AugmentationPolicy, CIFAR100_NORM, CIFAR10_NORM};
use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, ProbeMode};
use crate::loss::Direction;
use crate::schedule::{CoarseTauConfig, ScheduleConfig, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Tcld,
    Cifar10,
    Cifar100,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Synth => "synth",
            DataSource::Tcld => "tcld",
            DataSource::Cifar10 => "cifar10",
            DataSource::Cifar100 => "cifar100",
        }
    }

    fn is_image(self) -> bool {
        matches!(self, DataSource::Cifar10 | DataSource::Cifar100)
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "synth" => DataSource::Synth,
            "tcld" => DataSource::Tcld,
            "cifar10" => DataSource::Cifar10,
            "cifar100" => DataSource::Cifar100,
            other => return Err(format!("unknown data source `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Noise,
    Pixel,
}

impl FromStr for AugmentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "noise" | "embedding_noise" => Ok(AugmentKind::Noise),
            "pixel" => Ok(AugmentKind::Pixel),
            other => Err(format!("unknown augmentation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeKind {
    InBatch,
    MomentumQueue,
}

impl FromStr for NegativeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "in_batch" => Ok(NegativeKind::InBatch),
            "momentum_queue" => Ok(NegativeKind::MomentumQueue),
            other => Err(format!("unknown negative source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub dim: usize,
    pub n_max: usize,
    pub imbalance: f64,
    pub class_separation: f64,
    pub within_sigma: f64,
    pub test_per_class: usize,
    /// Defaults to `run.seed`.
    pub seed: Option<u64>,
    /// TCLD file, or comma-separated CIFAR batch files.
    pub train_path: String,
    pub test_path: String,
    pub augment: AugmentKind,
    pub noise_sigma: f64,
    pub dropout_prob: f64,
    pub flip_prob: f64,
    pub crop_padding: usize,
    pub pixel_noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub negatives: NegativeKind,
    pub batch_size: usize,
    pub queue_size: usize,
    pub key_momentum: f64,
    pub lr: f64,
    pub warmup_epochs: u64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub symmetrize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub tau_minus: f64,
    pub tau_plus: f64,
    pub period_t: u32,
    pub step_length: u32,
    pub tau: f64,
    /// Defaults to `run.seed`.
    pub seed: Option<u64>,
    pub coarse: bool,
    /// Number of largest classes that get `tau_head` in coarse mode.
    pub coarse_head: usize,
    pub tau_head: f64,
    pub tau_tail: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub knn_k: Vec<usize>,
    pub probes: Vec<ProbeMode>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub enabled: bool,
    pub bins: usize,
    pub curves: CurveAggregation,
    pub curve_samples: usize,
    pub pca_components: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: u64,
    pub eval_every: u64,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub schedule: ScheduleSection,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                source: DataSource::Synth,
                num_classes: 10,
                dim: 32,
                n_max: 500,
                imbalance: 100.0,
                class_separation: 3.0,
                within_sigma: 0.7,
                test_per_class: 100,
                seed: None,
                train_path: String::new(),
                test_path: String::new(),
                augment: AugmentKind::Noise,
                noise_sigma: 0.3,
                dropout_prob: 0.1,
                flip_prob: 0.5,
                crop_padding: 4,
                pixel_noise_sigma: 0.02,
            },
            encoder: EncoderConfig {
                hidden: vec![256, 128],
                head_hidden: vec![128],
                embed_dim: 32,
                negatives: NegativeKind::InBatch,
                batch_size: 256,
                queue_size: 1024,
                key_momentum: 0.99,
                lr: 0.5,
                warmup_epochs: 10,
                weight_decay: 1e-4,
                sgd_momentum: 0.9,
                symmetrize: false,
            },
            schedule: ScheduleSection {
                kind: ScheduleKind::Cosine,
                tau_minus: 0.1,
                tau_plus: 1.0,
                period_t: 400,
                step_length: 200,
                tau: 0.2,
                seed: None,
                coarse: false,
                coarse_head: 5,
                tau_head: 1.0,
                tau_tail: 0.1,
            },
            eval: EvalConfig {
                knn_k: vec![1, 10],
                probes: vec![ProbeMode::FewShot, ProbeMode::LongTail],
                probe_epochs: 500,
                probe_lr: 0.5,
            },
            analysis: AnalysisConfig {
                enabled: true,
                bins: 500,
                curves: CurveAggregation::Pooled,
                curve_samples: 256,
                pca_components: 3,
            },
            run: RunConfig {
                seed: 0,
                epochs: 400,
                eval_every: 50,
                output_dir: PathBuf::from("runs/default"),
            },
        }
    }
}

fn line_err(line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigLine { line, msg: msg.into() }
}

fn parse_num<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| line_err(line, format!("{key}: cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(line_err(line, format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str, line: usize) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s, line))
        .collect()
}

fn parse_enum<T: FromStr<Err = String>>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse::<T>().map_err(|e| line_err(line, format!("{key}: {e}")))
}

fn parse_probe(v: &str) -> std::result::Result<ProbeMode, String> {
    match v {
        "fs_lp" => Ok(ProbeMode::FewShot),
        "lt_lp" => Ok(ProbeMode::LongTail),
        other => Err(format!("unknown probe `{other}`")),
    }
}

fn parse_curves(v: &str) -> std::result::Result<CurveAggregation, String> {
    match v {
        "pooled" => Ok(CurveAggregation::Pooled),
        "mean_over_anchors" => Ok(CurveAggregation::MeanOverAnchors),
        other => Err(format!("unknown curve aggregation `{other}`")),
    }
}

fn curves_name(c: CurveAggregation) -> &'static str {
    match c {
        CurveAggregation::Pooled => "pooled",
        CurveAggregation::MeanOverAnchors => "mean_over_anchors",
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses and validates configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut lines: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| line_err(line, format!("expected `section.key = value`, got `{content}`")))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            if let Some(prev) = lines.insert(key.to_string(), line) {
                return Err(line_err(line, format!("{key} already set on line {prev}")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate_with(&lines)?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let d = &mut self.data;
        let e = &mut self.encoder;
        let s = &mut self.schedule;
        match key {
            "data.source" => d.source = parse_enum(key, v, line)?,
            "data.num_classes" => d.num_classes = parse_num(key, v, line)?,
            "data.dim" => d.dim = parse_num(key, v, line)?,
            "data.n_max" => d.n_max = parse_num(key, v, line)?,
            "data.imbalance" => d.imbalance = parse_num(key, v, line)?,
            "data.class_separation" => d.class_separation = parse_num(key, v, line)?,
            "data.within_sigma" => d.within_sigma = parse_num(key, v, line)?,
            "data.test_per_class" => d.test_per_class = parse_num(key, v, line)?,
            "data.seed" => d.seed = Some(parse_num(key, v, line)?),
            "data.train_path" => d.train_path = v.to_string(),
            "data.test_path" => d.test_path = v.to_string(),
            "data.augment" => d.augment = parse_enum(key, v, line)?,
            "data.noise_sigma" => d.noise_sigma = parse_num(key, v, line)?,
            "data.dropout_prob" => d.dropout_prob = parse_num(key, v, line)?,
            "data.flip_prob" => d.flip_prob = parse_num(key, v, line)?,
            "data.crop_padding" => d.crop_padding = parse_num(key, v, line)?,
            "data.pixel_noise_sigma" => d.pixel_noise_sigma = parse_num(key, v, line)?,
            "encoder.hidden" => e.hidden = parse_list(key, v, line)?,
            "encoder.head_hidden" => e.head_hidden = parse_list(key, v, line)?,
            "encoder.embed_dim" => e.embed_dim = parse_num(key, v, line)?,
            "encoder.negatives" => e.negatives = parse_enum(key, v, line)?,
            "encoder.batch_size" => e.batch_size = parse_num(key, v, line)?,
            "encoder.queue_size" => e.queue_size = parse_num(key, v, line)?,
            "encoder.key_momentum" => e.key_momentum = parse_num(key, v, line)?,
            "encoder.lr" => e.lr = parse_num(key, v, line)?,
            "encoder.warmup_epochs" => e.warmup_epochs = parse_num(key, v, line)?,
            "encoder.weight_decay" => e.weight_decay = parse_num(key, v, line)?,
            "encoder.sgd_momentum" => e.sgd_momentum = parse_num(key, v, line)?,
            "encoder.symmetrize" => e.symmetrize = parse_bool(key, v, line)?,
            "schedule.kind" => s.kind = parse_enum(key, v, line)?,
            "schedule.tau_minus" => s.tau_minus = parse_num(key, v, line)?,
            "schedule.tau_plus" => s.tau_plus = parse_num(key, v, line)?,
            "schedule.period_T" => s.period_t = parse_num(key, v, line)?,
            "schedule.step_length" => s.step_length = parse_num(key, v, line)?,
            "schedule.tau" => s.tau = parse_num(key, v, line)?,
            "schedule.seed" => s.seed = Some(parse_num(key, v, line)?),
            "schedule.coarse" => s.coarse = parse_bool(key, v, line)?,
            "schedule.coarse_head" => s.coarse_head = parse_num(key, v, line)?,
            "schedule.tau_head" => s.tau_head = parse_num(key, v, line)?,
            "schedule.tau_tail" => s.tau_tail = parse_num(key, v, line)?,
            "eval.knn_k" => self.eval.knn_k = parse_list(key, v, line)?,
            "eval.probes" => {
                self.eval.probes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty() && *p != "none")
                    .map(|p| parse_probe(p).map_err(|m| line_err(line, format!("{key}: {m}"))))
                    .collect::<Result<_>>()?
            }
            "eval.probe_epochs" => self.eval.probe_epochs = parse_num(key, v, line)?,
            "eval.probe_lr" => self.eval.probe_lr = parse_num(key, v, line)?,
            "analysis.enabled" => self.analysis.enabled = parse_bool(key, v, line)?,
            "analysis.bins" => self.analysis.bins = parse_num(key, v, line)?,
            "analysis.curves" => {
                self.analysis.curves = parse_curves(v).map_err(|m| line_err(line, format!("{key}: {m}")))?
            }
            "analysis.curve_samples" => self.analysis.curve_samples = parse_num(key, v, line)?,
            "analysis.pca_components" => self.analysis.pca_components = parse_num(key, v, line)?,
            "run.seed" => self.run.seed = parse_num(key, v, line)?,
            "run.epochs" => self.run.epochs = parse_num(key, v, line)?,
            "run.eval_every" => self.run.eval_every = parse_num(key, v, line)?,
            "run.output_dir" => self.run.output_dir = PathBuf::from(v),
            other => return Err(line_err(line, format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Re-runs every check; used after programmatic edits such as CLI
    /// overrides.
    pub fn validate(&self) -> Result<()> {
        self.validate_with(&BTreeMap::new())
    }

    fn validate_with(&self, lines: &BTreeMap<String, usize>) -> Result<()> {
        let at = |key: &str| lines.get(key).copied().unwrap_or(0);
        // The latest of several keys, so the message points at the line
        // that completed the conflict.
        let last = |keys: &[&str]| keys.iter().map(|k| at(k)).max().unwrap_or(0);
        let fail = |keys: &[&str], msg: String| Err(line_err(last(keys), msg));

        let d = &self.data;
        if d.num_classes < 3 {
            return fail(&["data.num_classes"], format!("data.num_classes must be >= 3, got {}", d.num_classes));
        }
        if d.source == DataSource::Synth {
            if d.dim < 2 {
                return fail(&["data.dim"], "data.dim must be >= 2".into());
            }
            if !(d.class_separation.is_finite() && d.class_separation > 0.0) {
                return fail(&["data.class_separation"], "data.class_separation must be positive".into());
            }
            if !(d.within_sigma.is_finite() && d.within_sigma >= 0.0) {
                return fail(&["data.within_sigma"], "data.within_sigma must be >= 0".into());
            }
            if d.test_per_class == 0 {
                return fail(&["data.test_per_class"], "data.test_per_class must be positive".into());
            }
        }
        if !(d.imbalance.is_finite() && d.imbalance >= 1.0) {
            return fail(&["data.imbalance"], format!("data.imbalance must be >= 1, got {}", d.imbalance));
        }
        if d.n_max == 0 {
            return fail(&["data.n_max"], "data.n_max must be positive".into());
        }
        if d.source != DataSource::Synth && (d.train_path.is_empty() || d.test_path.is_empty()) {
            return fail(
                &["data.source", "data.train_path", "data.test_path"],
                format!("data.source = {} needs data.train_path and data.test_path", d.source.name()),
            );
        }
        match (d.source.is_image(), d.augment) {
            (true, AugmentKind::Noise) => {
                return fail(
                    &["data.source", "data.augment"],
                    format!("data.source = {} requires data.augment = pixel", d.source.name()),
                )
            }
            (false, AugmentKind::Pixel) => {
                return fail(
                    &["data.source", "data.augment"],
                    format!("data.source = {} requires data.augment = noise", d.source.name()),
                )
            }
            _ => {}
        }
        self.augmentation()
            .map_err(|e| line_err(last(&["data.noise_sigma", "data.dropout_prob", "data.flip_prob", "data.crop_padding", "data.pixel_noise_sigma"]), e.to_string()))?;

        let e = &self.encoder;
        if e.hidden.contains(&0) || e.head_hidden.contains(&0) || e.embed_dim == 0 {
            return fail(&["encoder.hidden", "encoder.head_hidden", "encoder.embed_dim"], "layer widths must be positive".into());
        }
        if e.batch_size < 2 {
            return fail(&["encoder.batch_size"], "encoder.batch_size must be >= 2".into());
        }
        if !(e.lr.is_finite() && e.lr >= 0.0) {
            return fail(&["encoder.lr"], "encoder.lr must be >= 0".into());
        }
        if !(e.weight_decay.is_finite() && e.weight_decay >= 0.0) {
            return fail(&["encoder.weight_decay"], "encoder.weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&e.sgd_momentum) {
            return fail(&["encoder.sgd_momentum"], "encoder.sgd_momentum must lie in [0, 1)".into());
        }
        if e.negatives == NegativeKind::MomentumQueue {
            if e.queue_size == 0 {
                return fail(&["encoder.queue_size"], "encoder.queue_size must be positive".into());
            }
            if !(e.key_momentum > 0.0 && e.key_momentum <= 1.0) {
                return fail(&["encoder.key_momentum"], "encoder.key_momentum must lie in (0, 1]".into());
            }
        }

        let s = &self.schedule;
        if s.tau_minus.is_finite() && s.tau_plus.is_finite() && s.tau_minus > s.tau_plus {
            return fail(
                &["schedule.tau_minus", "schedule.tau_plus"],
                format!("schedule.tau_minus ({}) must be <= schedule.tau_plus ({})", s.tau_minus, s.tau_plus),
            );
        }
        self.schedule_config().map_err(|e| {
            line_err(
                last(&["schedule.kind", "schedule.tau_minus", "schedule.tau_plus", "schedule.period_T", "schedule.step_length", "schedule.tau"]),
                e.to_string(),
            )
        })?;
        if self.is_periodic() && self.run.epochs > 0 && u64::from(s.period_t) > self.run.epochs {
            return fail(
                &["schedule.kind", "schedule.period_T", "run.epochs"],
                format!(
                    "schedule.period_T ({}) exceeds run.epochs ({}) for a {} schedule",
                    s.period_t,
                    self.run.epochs,
                    s.kind.name()
                ),
            );
        }
        if s.coarse {
            if s.coarse_head == 0 || s.coarse_head >= d.num_classes {
                return fail(
                    &["schedule.coarse_head", "data.num_classes"],
                    format!("schedule.coarse_head must lie in 1..{}", d.num_classes),
                );
            }
            for (k, v) in [("schedule.tau_head", s.tau_head), ("schedule.tau_tail", s.tau_tail)] {
                if !(v.is_finite() && v > 0.0) {
                    return fail(&[k], format!("{k} must be positive"));
                }
            }
        }

        if self.eval.knn_k.contains(&0) {
            return fail(&["eval.knn_k"], "eval.knn_k entries must be positive".into());
        }
        if !self.eval.probes.is_empty() {
            ProbeConfig::new(ProbeMode::FewShot, self.eval.probe_epochs, self.eval.probe_lr, 0)
                .map_err(|e| line_err(last(&["eval.probe_epochs", "eval.probe_lr"]), e.to_string()))?;
        }
        let a = &self.analysis;
        if a.enabled {
            if a.bins == 0 {
                return fail(&["analysis.bins"], "analysis.bins must be positive".into());
            }
            if a.curve_samples < 2 {
                return fail(&["analysis.curve_samples"], "analysis.curve_samples must be >= 2".into());
            }
            if a.pca_components == 0 {
                return fail(&["analysis.pca_components"], "analysis.pca_components must be positive".into());
            }
        }
        if self.run.eval_every == 0 {
            return fail(&["run.eval_every"], "run.eval_every must be positive".into());
        }
        Ok(())
    }

    /// Cosine and linear-oscillation schedules repeat with `period_T`.
    pub fn is_periodic(&self) -> bool {
        matches!(self.schedule.kind, ScheduleKind::Cosine | ScheduleKind::LinearOscillation)
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.run.seed)
    }

    pub fn schedule_config(&self) -> Result<ScheduleConfig> {
        let s = &self.schedule;
        if s.kind == ScheduleKind::Constant {
            return ScheduleConfig::constant(s.tau);
        }
        ScheduleConfig::new(
            s.kind,
            s.tau_minus,
            s.tau_plus,
            s.period_t,
            s.step_length,
            s.seed.unwrap_or(self.run.seed),
            s.tau,
        )
    }

    /// Coarse temperatures keyed on the `coarse_head` largest classes.
    pub fn coarse_config(&self, class_sizes: &[usize]) -> Result<Option<CoarseTauConfig>> {
        let s = &self.schedule;
        if !s.coarse {
            return Ok(None);
        }
        let mut order: Vec<usize> = (0..class_sizes.len()).collect();
        order.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b)));
        let head: BTreeSet<usize> = order.into_iter().take(s.coarse_head).collect();
        CoarseTauConfig::new(head, s.tau_head, s.tau_tail, class_sizes.len()).map(Some)
    }

    pub fn augmentation(&self) -> Result<AugmentationPolicy> {
        let d = &self.data;
        match d.augment {
            AugmentKind::Noise => AugmentationPolicy::embedding_noise(d.noise_sigma, d.dropout_prob),
            AugmentKind::Pixel => {
                let norm = if d.source == DataSource::Cifar100 { CIFAR100_NORM } else { CIFAR10_NORM };
                AugmentationPolicy::pixel_with_norm(d.flip_prob, d.crop_padding, d.pixel_noise_sigma, norm)
            }
        }
    }

    pub fn direction(&self) -> Direction {
        if self.encoder.symmetrize {
            Direction::Symmetric
        } else {
            Direction::Forward
        }
    }

    pub fn probe_configs(&self) -> Result<Vec<ProbeConfig>> {
        self.eval
            .probes
            .iter()
            .map(|&m| ProbeConfig::new(m, self.eval.probe_epochs, self.eval.probe_lr, self.run.seed))
            .collect()
    }

    /// Every key with its effective value, in a form [`ExperimentConfig::parse`]
    /// accepts.
    pub fn to_resolved_text(&self) -> String {
        let d = &self.data;
        let e = &self.encoder;
        let s = &self.schedule;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("data.source", d.source.name().into());
        kv("data.num_classes", d.num_classes.to_string());
        kv("data.dim", d.dim.to_string());
        kv("data.n_max", d.n_max.to_string());
        kv("data.imbalance", d.imbalance.to_string());
        kv("data.class_separation", d.class_separation.to_string());
        kv("data.within_sigma", d.within_sigma.to_string());
        kv("data.test_per_class", d.test_per_class.to_string());
        kv("data.seed", self.data_seed().to_string());
        kv("data.train_path", d.train_path.clone());
        kv("data.test_path", d.test_path.clone());
        kv("data.augment", match d.augment { AugmentKind::Noise => "noise", AugmentKind::Pixel => "pixel" }.into());
        kv("data.noise_sigma", d.noise_sigma.to_string());
        kv("data.dropout_prob", d.dropout_prob.to_string());
        kv("data.flip_prob", d.flip_prob.to_string());
        kv("data.crop_padding", d.crop_padding.to_string());
        kv("data.pixel_noise_sigma", d.pixel_noise_sigma.to_string());
        kv("encoder.hidden", join(&e.hidden));
        kv("encoder.head_hidden", join(&e.head_hidden));
        kv("encoder.embed_dim", e.embed_dim.to_string());
        kv(
            "encoder.negatives",
            match e.negatives { NegativeKind::InBatch => "in_batch", NegativeKind::MomentumQueue => "momentum_queue" }.into(),
        );
        kv("encoder.batch_size", e.batch_size.to_string());
        kv("encoder.queue_size", e.queue_size.to_string());
        kv("encoder.key_momentum", e.key_momentum.to_string());
        kv("encoder.lr", e.lr.to_string());
        kv("encoder.warmup_epochs", e.warmup_epochs.to_string());
        kv("encoder.weight_decay", e.weight_decay.to_string());
        kv("encoder.sgd_momentum", e.sgd_momentum.to_string());
        kv("encoder.symmetrize", e.symmetrize.to_string());
        kv("schedule.kind", s.kind.name().into());
        kv("schedule.tau_minus", s.tau_minus.to_string());
        kv("schedule.tau_plus", s.tau_plus.to_string());
        kv("schedule.period_T", s.period_t.to_string());
        kv("schedule.step_length", s.step_length.to_string());
        kv("schedule.tau", s.tau.to_string());
        kv("schedule.seed", s.seed.unwrap_or(self.run.seed).to_string());
        kv("schedule.coarse", s.coarse.to_string());
        kv("schedule.coarse_head", s.coarse_head.to_string());
        kv("schedule.tau_head", s.tau_head.to_string());
        kv("schedule.tau_tail", s.tau_tail.to_string());
        kv("eval.knn_k", join(&self.eval.knn_k));
        let probes: Vec<&str> = self.eval.probes.iter().map(|p| p.metric_name()).collect();
        kv("eval.probes", if probes.is_empty() { "none".into() } else { probes.join(",") });
        kv("eval.probe_epochs", self.eval.probe_epochs.to_string());
        kv("eval.probe_lr", self.eval.probe_lr.to_string());
        kv("analysis.enabled", self.analysis.enabled.to_string());
        kv("analysis.bins", self.analysis.bins.to_string());
        kv("analysis.curves", curves_name(self.analysis.curves).into());
        kv("analysis.curve_samples", self.analysis.curve_samples.to_string());
        kv("analysis.pca_components", self.analysis.pca_components.to_string());
        kv("run.seed", self.run.seed.to_string());
        kv("run.epochs", self.run.epochs.to_string());
        kv("run.eval_every", self.run.eval_every.to_string());
        kv("run.output_dir", self.run.output_dir.display().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(e: Error) -> usize {
        match e {
            Error::ConfigLine { line, .. } => line,
            other => panic!("expected a line error, got {other}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.schedule.kind, ScheduleKind::Cosine);
        assert_eq!((c.schedule.tau_minus, c.schedule.tau_plus, c.schedule.period_t), (0.1, 1.0, 400));
        assert_eq!(c.schedule_config().unwrap().tau_at(0), 1.0);
    }

    #[test]
    fn comments_and_overrides() {
        let c = ExperimentConfig::parse(
            "# header\n\nschedule.kind = constant  # fixed\nschedule.tau = 0.3\nencoder.hidden = 64, 32\neval.probes = none\n",
        )
        .unwrap();
        assert_eq!(c.schedule.kind, ScheduleKind::Constant);
        assert_eq!(c.schedule_config().unwrap().tau_at(77), 0.3);
        assert_eq!(c.encoder.hidden, vec![64, 32]);
        assert!(c.eval.probes.is_empty());
    }

    #[test]
    fn tau_order_violation() {
        let e = ExperimentConfig::parse("schedule.tau_minus = 0.5\nschedule.tau_plus = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("tau_minus"), "{e}");
        assert_eq!(line_of(e), 2);
    }

    #[test]
    fn period_longer_than_run() {
        let e = ExperimentConfig::parse("schedule.kind = cosine\nrun.epochs = 100\nschedule.period_T = 400\n").unwrap_err();
        assert!(e.to_string().contains("period_T"), "{e}");
        assert_eq!(line_of(e), 3);
        // No training at all: nothing to conflict with.
        assert!(ExperimentConfig::parse("run.epochs = 0").is_ok());
        assert!(ExperimentConfig::parse("schedule.kind = constant\nrun.epochs = 100").is_ok());
    }

    #[test]
    fn unknown_and_malformed() {
        assert_eq!(line_of(ExperimentConfig::parse("\nfoo.bar = 1").unwrap_err()), 2);
        assert_eq!(line_of(ExperimentConfig::parse("run.epochs = ten").unwrap_err()), 1);
        assert_eq!(line_of(ExperimentConfig::parse("run.epochs").unwrap_err()), 1);
        assert_eq!(line_of(ExperimentConfig::parse("run.seed = 1\nrun.seed = 2").unwrap_err()), 2);
        assert_eq!(line_of(ExperimentConfig::parse("encoder.symmetrize = maybe").unwrap_err()), 1);
        assert_eq!(line_of(ExperimentConfig::parse("schedule.kind = wavy").unwrap_err()), 1);
    }

    #[test]
    fn data_and_augmentation_must_agree() {
        let e = ExperimentConfig::parse(
            "data.source = cifar10\ndata.train_path = a.bin\ndata.test_path = b.bin\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("pixel"), "{e}");
        assert!(ExperimentConfig::parse("data.augment = pixel").is_err());
        assert!(ExperimentConfig::parse(
            "data.source = cifar10\ndata.augment = pixel\ndata.train_path = a.bin\ndata.test_path = b.bin"
        )
        .is_ok());
    }

    #[test]
    fn coarse_head_in_range() {
        assert!(ExperimentConfig::parse("schedule.coarse = true\nschedule.coarse_head = 10").is_err());
        let c = ExperimentConfig::parse("schedule.coarse = true\nschedule.coarse_head = 2").unwrap();
        let coarse = c.coarse_config(&[9, 7, 7, 3]).unwrap().unwrap();
        assert_eq!(coarse.head_classes(), &BTreeSet::from([0, 1]));
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = ExperimentConfig::parse(
            "run.seed = 7\nschedule.kind = random\nencoder.negatives = momentum_queue\nanalysis.curves = mean_over_anchors\n",
        )
        .unwrap();
        let text = c.to_resolved_text();
        assert!(text.contains("schedule.seed = 7\n"));
        let again = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(again.to_resolved_text(), text);
        assert_eq!(again.schedule_config().unwrap(), c.schedule_config().unwrap());
    }
}
