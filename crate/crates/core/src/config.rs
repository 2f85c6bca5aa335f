//! Experiment configuration: a flat `key = value` text format with optional
//! `[section]` headers, `#` comments, strict keys and validated constraints.
//!
//! ```text
//! # model block
//! [model]
//! L = 8           # same as `model.L = 8` at top level
//! quantizer.kind = softvq
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::objectives::LossWeights;
use crate::quantizers::{QuantizerKind, QuantizerSpec, DEFAULT_TEMPERATURE};
use crate::tokenizer::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Shapes,
    Idx,
}

impl FromStr for DataSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shapes" => Ok(DataSource::Shapes),
            "idx" => Ok(DataSource::Idx),
            _ => Err(format!(
                "unknown data source `{s}` (expected shapes or idx)"
            )),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Shapes => "shapes",
            DataSource::Idx => "idx",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBlock {
    pub source: DataSource,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub classes: usize,
    pub train_images: String,
    pub train_labels: String,
    pub val_images: String,
    pub val_labels: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBlock {
    pub h: usize,
    pub p: usize,
    pub l: usize,
    pub d: usize,
    pub w: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerBlock {
    pub kind: QuantizerKind,
    pub k: usize,
    pub tau: f64,
    pub groups: usize,
    pub layers: usize,
    pub per_layer_codebooks: bool,
    pub squared_distance: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBlock {
    pub lambda_perceptual: f64,
    pub lambda_adversarial: f64,
    pub lambda_align: f64,
    pub lambda_kl: f64,
    pub align: bool,
    pub oracle_dim: usize,
    pub oracle_alpha: f64,
    pub oracle_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerBlock {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup: u64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalBlock {
    pub probe: bool,
    pub probe_seed: u64,
    pub sweep_kinds: Vec<QuantizerKind>,
    pub sweep_l: Vec<usize>,
    pub sweep_k: Vec<usize>,
    pub sweep_d: Vec<usize>,
    pub sweep_tau: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBlock {
    pub steps: u64,
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub sample_steps: usize,
    pub samples: usize,
    /// Tokenizer checkpoint to encode with; empty trains one from this config.
    pub tokenizer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetBlock,
    pub model: ModelBlock,
    pub quantizer: QuantizerBlock,
    pub loss: LossBlock,
    pub trainer: TrainerBlock,
    pub eval: EvalBlock,
    pub flow: FlowBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetBlock {
                source: DataSource::Shapes,
                seed: 7,
                train_count: 2048,
                val_count: 512,
                classes: 4,
                train_images: String::new(),
                train_labels: String::new(),
                val_images: String::new(),
                val_labels: String::new(),
            },
            model: ModelBlock {
                h: 16,
                p: 4,
                l: 8,
                d: 16,
                w: 64,
                enc_depth: 2,
                dec_depth: 2,
                mlp_ratio: 4,
            },
            quantizer: QuantizerBlock {
                kind: QuantizerKind::SoftVq,
                k: 64,
                tau: DEFAULT_TEMPERATURE,
                groups: 1,
                layers: 1,
                per_layer_codebooks: false,
                squared_distance: false,
            },
            loss: LossBlock {
                lambda_perceptual: 1.0,
                lambda_adversarial: 0.2,
                lambda_align: 0.1,
                lambda_kl: 0.01,
                align: true,
                oracle_dim: 32,
                oracle_alpha: crate::datagen::ORACLE_ALPHA,
                oracle_seed: 0,
            },
            trainer: TrainerBlock {
                steps: 2000,
                batch: 32,
                lr: 1e-4,
                lr_min: 0.0,
                warmup: 100,
                seed: 0,
                weight_decay: 1e-4,
                beta1: 0.9,
                beta2: 0.95,
                grad_clip: 0.0,
                checkpoint_every: 0,
            },
            eval: EvalBlock {
                probe: true,
                probe_seed: 0,
                sweep_kinds: vec![QuantizerKind::SoftVq, QuantizerKind::HardVq],
                sweep_l: vec![4, 8, 16],
                sweep_k: vec![],
                sweep_d: vec![],
                sweep_tau: vec![],
            },
            flow: FlowBlock {
                steps: 3000,
                hidden: 256,
                depth: 3,
                time_dim: 32,
                batch: 64,
                lr: 1e-3,
                warmup: 100,
                seed: 0,
                sample_steps: 100,
                samples: 512,
                tokenizer: String::new(),
            },
        }
    }
}

trait ConfigValue: Sized {
    fn parse(raw: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty => $name:literal),*) => {$(
        impl ConfigValue for $t {
            fn parse(raw: &str) -> std::result::Result<Self, String> {
                raw.parse().map_err(|_| format!("expected {}, got `{raw}`", $name))
            }
            fn render(&self) -> String {
                format!("{:?}", self)
            }
        }
    )*};
}

numeric_value!(u64 => "a non-negative integer", usize => "a non-negative integer", f64 => "a number");

impl ConfigValue for bool {
    fn parse(raw: &str) -> std::result::Result<Self, String> {
        match raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected true or false, got `{raw}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse(raw: &str) -> std::result::Result<Self, String> {
        Ok(raw.to_string())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for QuantizerKind {
    fn parse(raw: &str) -> std::result::Result<Self, String> {
        raw.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for DataSource {
    fn parse(raw: &str) -> std::result::Result<Self, String> {
        raw.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse(raw: &str) -> std::result::Result<Self, String> {
        let inner = raw
            .trim()
            .trim_start_matches('[')
            .trim_end_matches(']')
            .trim();
        if inner.is_empty() {
            return Ok(Vec::new());
        }
        inner
            .split(',')
            .map(|s| T::parse(unquote(s.trim())))
            .collect()
    }
    fn render(&self) -> String {
        let items: Vec<String> = self.iter().map(ConfigValue::render).collect();
        format!("[{}]", items.join(", "))
    }
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    if s.len() >= 2
        && ((s.starts_with('"') && s.ends_with('"')) || (s.starts_with('\'') && s.ends_with('\'')))
    {
        &s[1..s.len() - 1]
    } else {
        s
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ ;)*) => {
        /// Every accepted key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn apply(cfg: &mut ExperimentConfig, key: &str, raw: &str) -> Option<std::result::Result<(), String>> {
            match key {
                $($key => Some(ConfigValue::parse(raw).map(|v| cfg.$($field).+ = v)),)*
                _ => None,
            }
        }

        fn entries(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, ConfigValue::render(&cfg.$($field).+))),*]
        }
    };
}

config_keys! {
    "dataset.source" => dataset.source;
    "dataset.seed" => dataset.seed;
    "dataset.train_count" => dataset.train_count;
    "dataset.val_count" => dataset.val_count;
    "dataset.classes" => dataset.classes;
    "dataset.train_images" => dataset.train_images;
    "dataset.train_labels" => dataset.train_labels;
    "dataset.val_images" => dataset.val_images;
    "dataset.val_labels" => dataset.val_labels;
    "model.H" => model.h;
    "model.P" => model.p;
    "model.L" => model.l;
    "model.D" => model.d;
    "model.W" => model.w;
    "model.enc_depth" => model.enc_depth;
    "model.dec_depth" => model.dec_depth;
    "model.mlp_ratio" => model.mlp_ratio;
    "quantizer.kind" => quantizer.kind;
    "quantizer.K" => quantizer.k;
    "quantizer.tau" => quantizer.tau;
    "quantizer.groups" => quantizer.groups;
    "quantizer.layers" => quantizer.layers;
    "quantizer.per_layer_codebooks" => quantizer.per_layer_codebooks;
    "quantizer.squared_distance" => quantizer.squared_distance;
    "loss.lambda_perceptual" => loss.lambda_perceptual;
    "loss.lambda_adversarial" => loss.lambda_adversarial;
    "loss.lambda_align" => loss.lambda_align;
    "loss.lambda_kl" => loss.lambda_kl;
    "loss.align" => loss.align;
    "loss.oracle_dim" => loss.oracle_dim;
    "loss.oracle_alpha" => loss.oracle_alpha;
    "loss.oracle_seed" => loss.oracle_seed;
    "trainer.steps" => trainer.steps;
    "trainer.batch" => trainer.batch;
    "trainer.lr" => trainer.lr;
    "trainer.lr_min" => trainer.lr_min;
    "trainer.warmup" => trainer.warmup;
    "trainer.seed" => trainer.seed;
    "trainer.weight_decay" => trainer.weight_decay;
    "trainer.beta1" => trainer.beta1;
    "trainer.beta2" => trainer.beta2;
    "trainer.grad_clip" => trainer.grad_clip;
    "trainer.checkpoint_every" => trainer.checkpoint_every;
    "eval.probe" => eval.probe;
    "eval.probe_seed" => eval.probe_seed;
    "eval.sweep_kinds" => eval.sweep_kinds;
    "eval.sweep_L" => eval.sweep_l;
    "eval.sweep_K" => eval.sweep_k;
    "eval.sweep_D" => eval.sweep_d;
    "eval.sweep_tau" => eval.sweep_tau;
    "flow.steps" => flow.steps;
    "flow.hidden" => flow.hidden;
    "flow.depth" => flow.depth;
    "flow.time_dim" => flow.time_dim;
    "flow.batch" => flow.batch;
    "flow.lr" => flow.lr;
    "flow.warmup" => flow.warmup;
    "flow.seed" => flow.seed;
    "flow.sample_steps" => flow.sample_steps;
    "flow.samples" => flow.samples;
    "flow.tokenizer" => flow.tokenizer;
}

/// Where each key was set, for error reporting.
#[derive(Clone, Debug, Default)]
pub struct KeyLines {
    pub path: String,
    lines: HashMap<String, usize>,
}

impl KeyLines {
    pub fn line(&self, key: &str) -> usize {
        self.lines.get(key).copied().unwrap_or(0)
    }

    fn error(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::ConfigKey {
            path: self.path.clone(),
            line: self.line(key),
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = None;
    for (i, c) in line.char_indices() {
        match (c, in_quote) {
            ('"' | '\'', None) => in_quote = Some(c),
            (q, Some(open)) if q == open => in_quote = None,
            ('#', None) => return &line[..i],
            _ => {}
        }
    }
    line
}

impl ExperimentConfig {
    /// Parses config text; `origin` names the source in error messages.
    pub fn parse_str(text: &str, origin: &str) -> Result<(Self, KeyLines)> {
        let mut cfg = ExperimentConfig::default();
        let mut lines = KeyLines {
            path: origin.to_string(),
            lines: HashMap::new(),
        };
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let lineno = n + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let err = |key: &str, msg: String| Error::ConfigKey {
                path: origin.to_string(),
                line: lineno,
                key: key.to_string(),
                msg,
            };
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(err(line, "unterminated section header".into()));
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(line, "expected `key = value`".into()));
            };
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if lines.lines.contains_key(&key) {
                return Err(err(
                    &key,
                    format!("duplicate key (first set on line {})", lines.line(&key)),
                ));
            }
            match apply(&mut cfg, &key, unquote(v)) {
                None => return Err(err(&key, "unknown key".into())),
                Some(Err(msg)) => return Err(err(&key, msg)),
                Some(Ok(())) => {}
            }
            lines.lines.insert(key, lineno);
        }
        cfg.validate(&lines)?;
        Ok((cfg, lines))
    }

    pub fn parse_file(path: &Path) -> Result<(Self, KeyLines)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io("parse_config", path, e))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Checks every cross-field constraint, naming the responsible key.
    pub fn validate(&self, at: &KeyLines) -> Result<()> {
        let m = &self.model;
        if self.dataset.source == DataSource::Shapes && m.h != 16 && m.h != 32 {
            return Err(at.error(
                "model.H",
                format!("synthetic images must be 16 or 32 pixels, got {}", m.h),
            ));
        }
        if m.p == 0 || m.h % m.p != 0 {
            return Err(at.error("model.P", format!("P={} must divide H={}", m.p, m.h)));
        }
        let n = (m.h / m.p).pow(2);
        check_l(m.l, n).map_err(|msg| at.error("model.L", msg))?;
        if m.w == 0 || m.w % 4 != 0 {
            return Err(at.error(
                "model.W",
                format!("W={} must be a positive multiple of 4", m.w),
            ));
        }
        for (key, v) in [
            ("model.D", m.d),
            ("model.mlp_ratio", m.mlp_ratio),
            ("model.enc_depth", m.enc_depth),
            ("model.dec_depth", m.dec_depth),
        ] {
            if v == 0 {
                return Err(at.error(key, "must be positive"));
            }
        }
        let q = &self.quantizer;
        if q.k < 2 {
            return Err(at.error("quantizer.K", format!("K={} must be at least 2", q.k)));
        }
        if !(q.tau > 0.0 && q.tau.is_finite()) {
            return Err(at.error("quantizer.tau", format!("tau={} must be > 0", q.tau)));
        }
        if q.groups == 0 || m.d % q.groups != 0 {
            return Err(at.error(
                "quantizer.groups",
                format!("G={} must divide D={}", q.groups, m.d),
            ));
        }
        if q.layers == 0 {
            return Err(at.error("quantizer.layers", "must be >= 1"));
        }
        if q.groups > 1 && q.layers > 1 {
            return Err(at.error("quantizer.layers", "groups and layers cannot both exceed 1"));
        }
        if matches!(q.kind, QuantizerKind::HardVq | QuantizerKind::GmmVq)
            && (q.groups > 1 || q.layers > 1)
        {
            return Err(at.error(
                "quantizer.kind",
                format!("{} supports only groups = 1 and layers = 1", q.kind),
            ));
        }
        let l = &self.loss;
        for (key, v) in [
            ("loss.lambda_perceptual", l.lambda_perceptual),
            ("loss.lambda_adversarial", l.lambda_adversarial),
            ("loss.lambda_align", l.lambda_align),
            ("loss.lambda_kl", l.lambda_kl),
            ("loss.oracle_alpha", l.oracle_alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(at.error(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        let d = &self.dataset;
        if d.classes == 0 || d.classes > crate::datagen::MAX_CLASSES {
            return Err(at.error(
                "dataset.classes",
                format!("must be in 1..={}", crate::datagen::MAX_CLASSES),
            ));
        }
        if l.align && l.oracle_dim < d.classes {
            return Err(at.error(
                "loss.oracle_dim",
                format!(
                    "F={} must be >= number of classes {}",
                    l.oracle_dim, d.classes
                ),
            ));
        }
        if d.source == DataSource::Shapes {
            if d.train_count == 0 {
                return Err(at.error("dataset.train_count", "must be positive"));
            }
        } else {
            for (key, v) in [
                ("dataset.train_images", &d.train_images),
                ("dataset.train_labels", &d.train_labels),
            ] {
                if v.is_empty() {
                    return Err(at.error(key, "required when dataset.source = idx"));
                }
            }
        }
        let t = &self.trainer;
        if t.batch == 0 {
            return Err(at.error("trainer.batch", "must be positive"));
        }
        if t.warmup > t.steps {
            return Err(at.error(
                "trainer.warmup",
                format!("warmup {} exceeds steps {}", t.warmup, t.steps),
            ));
        }
        for (key, v) in [
            ("trainer.lr", t.lr),
            ("trainer.lr_min", t.lr_min),
            ("trainer.weight_decay", t.weight_decay),
            ("trainer.grad_clip", t.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(at.error(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (key, v) in [("trainer.beta1", t.beta1), ("trainer.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(at.error(key, format!("must be in [0, 1), got {v}")));
            }
        }
        for &sl in &self.eval.sweep_l {
            check_l(sl, n).map_err(|msg| at.error("eval.sweep_L", msg))?;
        }
        for &sd in &self.eval.sweep_d {
            if sd == 0 || sd % q.groups != 0 {
                return Err(at.error(
                    "eval.sweep_D",
                    format!("D={sd} must be positive and divisible by G={}", q.groups),
                ));
            }
        }
        if self.eval.sweep_k.iter().any(|&k| k < 2) {
            return Err(at.error("eval.sweep_K", "every K must be at least 2"));
        }
        if self.eval.sweep_tau.iter().any(|&tau| !(tau > 0.0)) {
            return Err(at.error("eval.sweep_tau", "every tau must be > 0"));
        }
        let f = &self.flow;
        for (key, v) in [
            ("flow.hidden", f.hidden),
            ("flow.depth", f.depth),
            ("flow.batch", f.batch),
            ("flow.sample_steps", f.sample_steps),
        ] {
            if v == 0 {
                return Err(at.error(key, "must be positive"));
            }
        }
        if f.time_dim < 2 {
            return Err(at.error("flow.time_dim", "must be >= 2"));
        }
        if f.warmup > f.steps {
            return Err(at.error(
                "flow.warmup",
                format!("warmup {} exceeds steps {}", f.warmup, f.steps),
            ));
        }
        Ok(())
    }

    /// Stable text form with every key, in canonical order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in entries(self) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// 64-bit FNV-1a hash of [`canonical`](Self::canonical).
    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            image_size: m.h,
            patch_size: m.p,
            channels: 1,
            latent_tokens: m.l,
            latent_dim: m.d,
            width: m.w,
            enc_depth: m.enc_depth,
            dec_depth: m.dec_depth,
            mlp_ratio: m.mlp_ratio,
            align_dim: self.aligned().then_some(self.loss.oracle_dim),
        }
    }

    /// Whether the alignment loss is active.
    pub fn aligned(&self) -> bool {
        self.loss.align && self.loss.lambda_align > 0.0
    }

    pub fn quantizer_spec(&self) -> QuantizerSpec {
        let q = &self.quantizer;
        QuantizerSpec {
            kind: q.kind,
            codebook_size: q.k,
            groups: q.groups,
            layers: q.layers,
            temperature: q.tau,
            per_layer_codebooks: q.per_layer_codebooks,
            squared_distance: q.squared_distance,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            perceptual: self.loss.lambda_perceptual,
            adversarial: self.loss.lambda_adversarial,
            align: if self.aligned() {
                self.loss.lambda_align
            } else {
                0.0
            },
            kl: self.loss.lambda_kl,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch,
            lr_max: t.lr,
            lr_min: t.lr_min,
            warmup_steps: t.warmup,
            seed: t.seed,
            weights: self.loss_weights(),
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        let f = &self.flow;
        FlowConfig {
            hidden: f.hidden,
            depth: f.depth,
            time_dim: f.time_dim,
            num_classes: self.dataset.classes,
            steps: f.steps,
            batch_size: f.batch,
            lr: f.lr,
            warmup_steps: f.warmup,
            seed: f.seed,
        }
    }

    /// Absolute or config-relative path of an IDX input.
    pub fn resolve(&self, base: Option<&Path>, p: &str) -> PathBuf {
        let path = PathBuf::from(p);
        match base {
            Some(b) if path.is_relative() => b.join(path),
            _ => path,
        }
    }
}

fn check_l(l: usize, n: usize) -> std::result::Result<(), String> {
    if l == 0 || l > n || n % l != 0 {
        Err(format!("L={l} must divide the number of patches N={n}"))
    } else {
        Ok(())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parses a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::parse_file(path).map(|(c, _)| c)
}
