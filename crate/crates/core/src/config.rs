//! Flat `key = value` configuration with dotted namespaces.
//!
//! ```text
//! # comment
//! model.hidden_dim = 64
//! plan.order = descending
//! ```
//!
//! [`Config::to_text`] emits every key, so a snapshot reproduces a run exactly.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ShapeWorldConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionOrder {
    CrossThenSelf,
    SelfThenCross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderMode {
    Ascending,
    Descending,
    Shuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub feature_levels: usize,
    pub ffn_dim: usize,
    pub attention_order: AttentionOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpaConfig {
    pub enabled: bool,
    pub stop_gradient: bool,
    pub freeze_old_prototypes: bool,
    pub prototype_init_std: f64,
    pub selection_loss_weight: f64,
    pub selection_targets: SelectionTargets,
}

/// Labels for the prototype classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionTargets {
    /// Selected points take the class of the ground truth matched to their query.
    Matched,
    /// Every feature location takes the class covering its centre pixel.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CslConfig {
    pub enabled: bool,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub enabled: bool,
    pub queue_len: usize,
    pub num_virtual: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoConfig {
    pub enabled: bool,
    /// Confidence threshold shared by pseudo-label fusion and pseudo counts.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub class_weight: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub no_object_weight: f64,
    pub deep_supervision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub base_classes: usize,
    pub increment: usize,
    pub order: OrderMode,
    pub order_seed: u64,
    pub base_iters: usize,
    pub iters_per_class: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub lr_decay: f64,
    /// Fraction of a stage's iterations after which the learning rate decays.
    pub lr_milestone: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Catalog ids drawn with `rare_weight` instead of weight 1.
    pub rare_classes: Vec<u32>,
    pub rare_weight: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub overlap_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub qpa: QpaConfig,
    pub csl: CslConfig,
    pub vq: VqConfig,
    pub pseudo: PseudoConfig,
    pub loss: LossConfig,
    pub plan: PlanConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                hidden_dim: 64,
                num_queries: 20,
                decoder_layers: 3,
                feature_levels: 3,
                ffn_dim: 128,
                attention_order: AttentionOrder::CrossThenSelf,
            },
            qpa: QpaConfig {
                enabled: true,
                stop_gradient: true,
                freeze_old_prototypes: false,
                prototype_init_std: 0.02,
                selection_loss_weight: 1.0,
                selection_targets: SelectionTargets::Dense,
            },
            csl: CslConfig { enabled: true, weight: 2.0 },
            vq: VqConfig { enabled: true, queue_len: 20, num_virtual: 80 },
            pseudo: PseudoConfig { enabled: true, threshold: 0.5 },
            loss: LossConfig {
                class_weight: 2.0,
                bce_weight: 5.0,
                dice_weight: 5.0,
                no_object_weight: 0.1,
                deep_supervision: false,
            },
            plan: PlanConfig {
                base_classes: 8,
                increment: 2,
                order: OrderMode::Ascending,
                order_seed: 0,
                base_iters: 2000,
                iters_per_class: 200,
                batch_size: 4,
                lr_base: 1e-4,
                lr_incremental: 5e-5,
                lr_decay: 0.1,
                lr_milestone: 0.9,
                weight_decay: 0.05,
                grad_clip: 0.0,
            },
            data: DataConfig {
                num_classes: 16,
                image_size: 32,
                train_images: 2000,
                test_images: 200,
                min_instances: 1,
                max_instances: 3,
                rare_classes: Vec::new(),
                rare_weight: 1.0,
                seed: 0,
            },
            eval: EvalConfig { score_threshold: 0.5, overlap_threshold: 0.8 },
        }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "seed",
    "model.hidden_dim",
    "model.num_queries",
    "model.decoder_layers",
    "model.feature_levels",
    "model.ffn_dim",
    "model.attention_order",
    "qpa.enabled",
    "qpa.stop_gradient",
    "qpa.freeze_old_prototypes",
    "qpa.prototype_init_std",
    "qpa.selection_loss_weight",
    "qpa.selection_targets",
    "csl.enabled",
    "csl.weight",
    "vq.enabled",
    "vq.queue_len",
    "vq.num_virtual",
    "pseudo.enabled",
    "pseudo.threshold",
    "loss.class_weight",
    "loss.bce_weight",
    "loss.dice_weight",
    "loss.no_object_weight",
    "loss.deep_supervision",
    "plan.base_classes",
    "plan.increment",
    "plan.order",
    "plan.order_seed",
    "plan.base_iters",
    "plan.iters_per_class",
    "plan.batch_size",
    "plan.lr_base",
    "plan.lr_incremental",
    "plan.lr_decay",
    "plan.lr_milestone",
    "plan.weight_decay",
    "plan.grad_clip",
    "data.num_classes",
    "data.image_size",
    "data.train_images",
    "data.test_images",
    "data.min_instances",
    "data.max_instances",
    "data.rare_classes",
    "data.rare_weight",
    "data.seed",
    "eval.score_threshold",
    "eval.overlap_threshold",
];

/// Method components that can be switched off for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Psd,
    Qpa,
    Csl,
    Vq,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Psd, Component::Qpa, Component::Csl, Component::Vq];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psd" | "pseudo" => Ok(Component::Psd),
            "qpa" => Ok(Component::Qpa),
            "csl" => Ok(Component::Csl),
            "vq" => Ok(Component::Vq),
            other => Err(Error::Config(format!("unknown component `{other}` (expected psd, qpa, csl or vq)"))),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::Psd => "psd",
            Component::Qpa => "qpa",
            Component::Csl => "csl",
            Component::Vq => "vq",
        };
        f.write_str(s)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl Config {
    pub fn with_components(mut self, psd: bool, qpa: bool, csl: bool, vq: bool) -> Self {
        self.pseudo.enabled = psd;
        self.qpa.enabled = qpa;
        self.csl.enabled = csl;
        self.vq.enabled = vq;
        self
    }

    pub fn set_component(&mut self, c: Component, on: bool) {
        match c {
            Component::Psd => self.pseudo.enabled = on,
            Component::Qpa => self.qpa.enabled = on,
            Component::Csl => self.csl.enabled = on,
            Component::Vq => self.vq.enabled = on,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse_num(key, v)?,
            "model.num_queries" => self.model.num_queries = parse_num(key, v)?,
            "model.decoder_layers" => self.model.decoder_layers = parse_num(key, v)?,
            "model.feature_levels" => self.model.feature_levels = parse_num(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse_num(key, v)?,
            "model.attention_order" => {
                self.model.attention_order = match v {
                    "cross_self" => AttentionOrder::CrossThenSelf,
                    "self_cross" => AttentionOrder::SelfThenCross,
                    _ => return Err(Error::Config(format!("{key}: expected cross_self or self_cross, got `{v}`"))),
                }
            }
            "qpa.enabled" => self.qpa.enabled = parse_bool(key, v)?,
            "qpa.stop_gradient" => self.qpa.stop_gradient = parse_bool(key, v)?,
            "qpa.freeze_old_prototypes" => self.qpa.freeze_old_prototypes = parse_bool(key, v)?,
            "qpa.prototype_init_std" => self.qpa.prototype_init_std = parse_num(key, v)?,
            "qpa.selection_loss_weight" => self.qpa.selection_loss_weight = parse_num(key, v)?,
            "qpa.selection_targets" => {
                self.qpa.selection_targets = match v {
                    "matched" => SelectionTargets::Matched,
                    "dense" => SelectionTargets::Dense,
                    _ => return Err(Error::Config(format!("{key}: expected matched or dense, got `{v}`"))),
                }
            }
            "csl.enabled" => self.csl.enabled = parse_bool(key, v)?,
            "csl.weight" => self.csl.weight = parse_num(key, v)?,
            "vq.enabled" => self.vq.enabled = parse_bool(key, v)?,
            "vq.queue_len" => self.vq.queue_len = parse_num(key, v)?,
            "vq.num_virtual" => self.vq.num_virtual = parse_num(key, v)?,
            "pseudo.enabled" => self.pseudo.enabled = parse_bool(key, v)?,
            "pseudo.threshold" => self.pseudo.threshold = parse_num(key, v)?,
            "loss.class_weight" => self.loss.class_weight = parse_num(key, v)?,
            "loss.bce_weight" => self.loss.bce_weight = parse_num(key, v)?,
            "loss.dice_weight" => self.loss.dice_weight = parse_num(key, v)?,
            "loss.no_object_weight" => self.loss.no_object_weight = parse_num(key, v)?,
            "loss.deep_supervision" => self.loss.deep_supervision = parse_bool(key, v)?,
            "plan.base_classes" => self.plan.base_classes = parse_num(key, v)?,
            "plan.increment" => self.plan.increment = parse_num(key, v)?,
            "plan.order" => {
                self.plan.order = match v {
                    "ascending" => OrderMode::Ascending,
                    "descending" => OrderMode::Descending,
                    "shuffle" => OrderMode::Shuffle,
                    _ => return Err(Error::Config(format!("{key}: expected ascending, descending or shuffle, got `{v}`"))),
                }
            }
            "plan.order_seed" => self.plan.order_seed = parse_num(key, v)?,
            "plan.base_iters" => self.plan.base_iters = parse_num(key, v)?,
            "plan.iters_per_class" => self.plan.iters_per_class = parse_num(key, v)?,
            "plan.batch_size" => self.plan.batch_size = parse_num(key, v)?,
            "plan.lr_base" => self.plan.lr_base = parse_num(key, v)?,
            "plan.lr_incremental" => self.plan.lr_incremental = parse_num(key, v)?,
            "plan.lr_decay" => self.plan.lr_decay = parse_num(key, v)?,
            "plan.lr_milestone" => self.plan.lr_milestone = parse_num(key, v)?,
            "plan.weight_decay" => self.plan.weight_decay = parse_num(key, v)?,
            "plan.grad_clip" => self.plan.grad_clip = parse_num(key, v)?,
            "data.num_classes" => self.data.num_classes = parse_num(key, v)?,
            "data.image_size" => self.data.image_size = parse_num(key, v)?,
            "data.train_images" => self.data.train_images = parse_num(key, v)?,
            "data.test_images" => self.data.test_images = parse_num(key, v)?,
            "data.min_instances" => self.data.min_instances = parse_num(key, v)?,
            "data.max_instances" => self.data.max_instances = parse_num(key, v)?,
            "data.rare_classes" => {
                self.data.rare_classes = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "data.rare_weight" => self.data.rare_weight = parse_num(key, v)?,
            "data.seed" => self.data.seed = parse_num(key, v)?,
            "eval.score_threshold" => self.eval.score_threshold = parse_num(key, v)?,
            "eval.overlap_threshold" => self.eval.overlap_threshold = parse_num(key, v)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let order = |o: AttentionOrder| match o {
            AttentionOrder::CrossThenSelf => "cross_self",
            AttentionOrder::SelfThenCross => "self_cross",
        };
        let mode = |m: OrderMode| match m {
            OrderMode::Ascending => "ascending",
            OrderMode::Descending => "descending",
            OrderMode::Shuffle => "shuffle",
        };
        Ok(match key {
            "seed" => self.seed.to_string(),
            "model.hidden_dim" => self.model.hidden_dim.to_string(),
            "model.num_queries" => self.model.num_queries.to_string(),
            "model.decoder_layers" => self.model.decoder_layers.to_string(),
            "model.feature_levels" => self.model.feature_levels.to_string(),
            "model.ffn_dim" => self.model.ffn_dim.to_string(),
            "model.attention_order" => order(self.model.attention_order).to_string(),
            "qpa.enabled" => self.qpa.enabled.to_string(),
            "qpa.stop_gradient" => self.qpa.stop_gradient.to_string(),
            "qpa.freeze_old_prototypes" => self.qpa.freeze_old_prototypes.to_string(),
            "qpa.prototype_init_std" => self.qpa.prototype_init_std.to_string(),
            "qpa.selection_loss_weight" => self.qpa.selection_loss_weight.to_string(),
            "qpa.selection_targets" => match self.qpa.selection_targets {
                SelectionTargets::Matched => "matched".into(),
                SelectionTargets::Dense => "dense".into(),
            },
            "csl.enabled" => self.csl.enabled.to_string(),
            "csl.weight" => self.csl.weight.to_string(),
            "vq.enabled" => self.vq.enabled.to_string(),
            "vq.queue_len" => self.vq.queue_len.to_string(),
            "vq.num_virtual" => self.vq.num_virtual.to_string(),
            "pseudo.enabled" => self.pseudo.enabled.to_string(),
            "pseudo.threshold" => self.pseudo.threshold.to_string(),
            "loss.class_weight" => self.loss.class_weight.to_string(),
            "loss.bce_weight" => self.loss.bce_weight.to_string(),
            "loss.dice_weight" => self.loss.dice_weight.to_string(),
            "loss.no_object_weight" => self.loss.no_object_weight.to_string(),
            "loss.deep_supervision" => self.loss.deep_supervision.to_string(),
            "plan.base_classes" => self.plan.base_classes.to_string(),
            "plan.increment" => self.plan.increment.to_string(),
            "plan.order" => mode(self.plan.order).to_string(),
            "plan.order_seed" => self.plan.order_seed.to_string(),
            "plan.base_iters" => self.plan.base_iters.to_string(),
            "plan.iters_per_class" => self.plan.iters_per_class.to_string(),
            "plan.batch_size" => self.plan.batch_size.to_string(),
            "plan.lr_base" => self.plan.lr_base.to_string(),
            "plan.lr_incremental" => self.plan.lr_incremental.to_string(),
            "plan.lr_decay" => self.plan.lr_decay.to_string(),
            "plan.lr_milestone" => self.plan.lr_milestone.to_string(),
            "plan.weight_decay" => self.plan.weight_decay.to_string(),
            "plan.grad_clip" => self.plan.grad_clip.to_string(),
            "data.num_classes" => self.data.num_classes.to_string(),
            "data.image_size" => self.data.image_size.to_string(),
            "data.train_images" => self.data.train_images.to_string(),
            "data.test_images" => self.data.test_images.to_string(),
            "data.min_instances" => self.data.min_instances.to_string(),
            "data.max_instances" => self.data.max_instances.to_string(),
            "data.rare_classes" => {
                self.data.rare_classes.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
            }
            "data.rare_weight" => self.data.rare_weight.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "eval.score_threshold" => self.eval.score_threshold.to_string(),
            "eval.overlap_threshold" => self.eval.overlap_threshold.to_string(),
            _ => return Err(unknown_key(key)),
        })
    }

    /// Parses config text on top of the defaults. All problems are reported
    /// together in one error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut problems = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", lineno + 1));
                continue;
            };
            if let Err(e) = cfg.set(k.trim(), v) {
                problems.push(format!("line {}: {}", lineno + 1, strip_prefix(&e)));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut problems = Vec::new();
        for o in overrides {
            match o.as_ref().split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        problems.push(strip_prefix(&e));
                    }
                }
                None => problems.push(format!("override `{}` is not key=value", o.as_ref())),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.model.hidden_dim == 0 || self.model.num_queries == 0 {
            p.push("model.hidden_dim and model.num_queries must be positive".to_string());
        }
        if self.model.decoder_layers == 0 {
            p.push("model.decoder_layers must be >= 1".to_string());
        }
        if self.model.feature_levels == 0 {
            p.push("model.feature_levels must be >= 1".to_string());
        }
        let stride = 1usize << self.model.feature_levels;
        if !self.data.image_size.is_multiple_of(stride) {
            p.push(format!("data.image_size must be divisible by {stride}"));
        }
        let nc = self.data.num_classes;
        if self.plan.base_classes == 0 || self.plan.base_classes > nc {
            p.push(format!("plan.base_classes must lie in 1..={nc}"));
        } else if self.plan.base_classes < nc
            && (self.plan.increment == 0 || !(nc - self.plan.base_classes).is_multiple_of(self.plan.increment))
        {
            p.push("plan.increment must divide data.num_classes - plan.base_classes".to_string());
        }
        if self.data.min_instances > self.data.max_instances {
            p.push("data.min_instances exceeds data.max_instances".to_string());
        }
        if self.data.rare_classes.iter().any(|&c| c as usize >= nc) {
            p.push("data.rare_classes contains an id outside the catalog".to_string());
        }
        if self.plan.batch_size == 0 {
            p.push("plan.batch_size must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.pseudo.threshold) {
            p.push("pseudo.threshold must lie in [0, 1]".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&self.get(k).expect("every listed key is gettable"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical snapshot text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn shape_world(&self) -> ShapeWorldConfig {
        let mut weights = vec![1.0; self.data.num_classes];
        for &c in &self.data.rare_classes {
            weights[c as usize] = self.data.rare_weight;
        }
        ShapeWorldConfig {
            image_size: self.data.image_size,
            num_classes: self.data.num_classes,
            min_instances: self.data.min_instances,
            max_instances: self.data.max_instances,
            class_weights: weights,
            seed: self.data.seed,
            ..ShapeWorldConfig::default()
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(s) => s.clone(),
        other => other.to_string(),
    }
}

fn unknown_key(key: &str) -> Error {
    let best = KEYS
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .min()
        .filter(|(d, _)| *d <= 4.max(key.len() / 3));
    match best {
        Some((_, k)) => Error::Config(format!("unknown key `{key}` (did you mean `{k}`?)")),
        None => Error::Config(format!("unknown key `{key}`")),
    }
}
