//! Experiment configuration. Defaults target a ResNet50 fine-tuning setup; the
//! [`ExperimentConfig::desk`] preset scales everything down for CPU runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::Reduction;
use crate::model::EncoderSpec;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Triplet,
    Quadruplet,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Contrastive => "Contrastive",
            LossKind::Triplet => "Triplet",
            LossKind::Quadruplet => "Quadruplet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Margins {
    pub contrastive: f64,
    pub triplet: f64,
    pub quadruplet_m1: f64,
    pub quadruplet_m2: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            contrastive: 0.4,
            triplet: 0.1,
            quadruplet_m1: 0.1,
            quadruplet_m2: 0.1,
        }
    }
}

/// Positive / negative geographic radii in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Radii {
    pub positive: f64,
    pub negative: f64,
}

impl Default for Radii {
    fn default() -> Self {
        Self {
            positive: 10.0,
            negative: 25.0,
        }
    }
}

/// Epoch budget per training phase. There is no sensible universal value, so
/// config files must state it explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    pub teacher: usize,
    pub student: usize,
    pub pfe: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Hardest violating tuples kept per anchor.
    pub top_k: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { top_k: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentInit {
    /// Extractor and mean head copied from the teacher, variance head fresh.
    CopyTeacher,
    /// Student drawn from the encoder initializer with the experiment seed.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub init: StudentInit,
    pub reduction: Reduction,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            init: StudentInit::CopyTeacher,
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McDropoutConfig {
    pub rate: f64,
    pub passes: usize,
}

impl Default for McDropoutConfig {
    fn default() -> Self {
        Self { rate: 0.2, passes: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Reliability-diagram / ECE bin count.
    pub bins: usize,
    /// Retrieval depth.
    pub topk: usize,
    /// Recall / mAP cut-offs reported.
    pub cutoffs: Vec<usize>,
    /// Fractions of most-uncertain queries discarded for the removal curve.
    pub removal_fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 11,
            topk: 10,
            cutoffs: vec![1, 5, 10],
            removal_fractions: (0..10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub margins: Margins,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub radii: Radii,
    #[serde(default)]
    pub seed: u64,
    pub epochs: Epochs,
    #[serde(default)]
    pub mining: MiningConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub mc_dropout: McDropoutConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_loss() -> LossKind {
    LossKind::Triplet
}
fn default_batch_size() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    1e-5
}
fn default_lr_decay() -> f64 {
    0.99
}
fn default_weight_decay() -> f64 {
    0.001
}

impl Default for ExperimentConfig {
    /// Full-scale hyperparameters with the desk epoch budget.
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            loss: default_loss(),
            margins: Margins::default(),
            encoder: EncoderSpec::default(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            lr_decay: default_lr_decay(),
            weight_decay: default_weight_decay(),
            radii: Radii::default(),
            seed: 0,
            epochs: Epochs {
                teacher: 12,
                student: 12,
                pfe: 12,
            },
            mining: MiningConfig::default(),
            student: StudentConfig::default(),
            mc_dropout: McDropoutConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small encoder, small images and a learning rate suited to training from
    /// scratch; everything else keeps the defaults.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderSpec::desk(),
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    /// Margin(s) for the configured loss: `(m, m)` for the single-margin losses.
    pub fn margins_for(&self, kind: LossKind) -> (f64, f64) {
        match kind {
            LossKind::Contrastive => (self.margins.contrastive, self.margins.contrastive),
            LossKind::Triplet => (self.margins.triplet, self.margins.triplet),
            LossKind::Quadruplet => (self.margins.quadruplet_m1, self.margins.quadruplet_m2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        let m = &self.margins;
        for (name, v) in [
            ("contrastive", m.contrastive),
            ("triplet", m.triplet),
            ("quadruplet_m1", m.quadruplet_m1),
            ("quadruplet_m2", m.quadruplet_m2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("margin {name} must be a finite nonnegative number, got {v}"));
            }
        }
        if !(self.radii.positive >= 0.0 && self.radii.positive < self.radii.negative)
            || !self.radii.negative.is_finite()
        {
            return fail(format!(
                "radii must satisfy 0 <= positive < negative, got {} / {}",
                self.radii.positive, self.radii.negative
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.mining.top_k == 0 {
            return fail("mining.top_k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mc_dropout.rate) {
            return fail(format!(
                "mc_dropout.rate must lie in [0, 1), got {}",
                self.mc_dropout.rate
            ));
        }
        if self.mc_dropout.passes < 2 {
            return fail("mc_dropout.passes must be at least 2".into());
        }
        if self.eval.bins == 0 || self.eval.topk == 0 {
            return fail("eval.bins and eval.topk must be at least 1".into());
        }
        if let Some(&n) = self.eval.cutoffs.iter().find(|&&n| n == 0 || n > self.eval.topk) {
            return fail(format!("eval cutoff {n} must lie in 1..={}", self.eval.topk));
        }
        if let Some(&f) = self.eval.removal_fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return fail(format!("removal fraction {f} must lie in [0, 1)"));
        }
        self.encoder.validate()
    }

    /// SHA-256 over the canonical JSON rendering, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config is always serializable");
        hex_digest(&bytes)
    }

    /// Hash of the settings that shape trained weights. Evaluation settings are
    /// left out so a checkpoint stays valid under other bin counts or depths.
    pub fn training_hash(&self) -> String {
        Self {
            eval: EvalConfig::default(),
            ..self.clone()
        }
        .hash()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
