//! Run configuration: architecture plus training hyperparameters, read from
//! a flat JSON object whose keys are validated exhaustively.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Read { path: String, msg: String },
}

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Persona HRED generator trained with MLE only.
    Phred,
    /// Adversarial HRED without attributes.
    Hredgan,
    /// Attributes as an input of the adversarial discriminator.
    PhredganA,
    /// Attributes as the target of a collaborative attribute discriminator.
    PhredganD,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Phred, Variant::Hredgan, Variant::PhredganA, Variant::PhredganD];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Phred => "phred",
            Variant::Hredgan => "hredgan",
            Variant::PhredganA => "phredgan_a",
            Variant::PhredganD => "phredgan_d",
        }
    }

    /// Whether attribute embeddings condition the generator.
    pub fn uses_attributes(self) -> bool {
        self != Variant::Hredgan
    }

    pub fn has_adversary(self) -> bool {
        self != Variant::Phred
    }

    /// Whether the adversarial discriminator reads the target attribute.
    pub fn adversary_conditioned(self) -> bool {
        self == Variant::PhredganA
    }

    pub fn has_attribute_discriminator(self) -> bool {
        self == Variant::PhredganD
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "unknown variant `{s}`; valid variants: {}",
                Variant::ALL.map(Variant::as_str).join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One draw per response, reused at every decoder step.
    Utterance,
    /// A fresh draw per decoder step.
    Word,
}

/// Gaussian noise injected at the decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    /// Standard deviation. Zero turns the noise off (inference only).
    pub std: f32,
    pub dim: usize,
}

impl NoiseSpec {
    pub fn new(mode: NoiseMode, std: f32, dim: usize) -> Result<Self, ConfigError> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(ConfigError::Invalid(format!("noise std must be a nonnegative finite number, got {std}")));
        }
        if dim == 0 {
            return Err(ConfigError::Invalid("noise dimension must be positive".into()));
        }
        Ok(Self { mode, std, dim })
    }

    pub fn with_std(self, std: f32) -> Result<Self, ConfigError> {
        Self::new(self.mode, std, self.dim)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Upper bound on the word vocabulary, reserved entries included.
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub attribute_dim: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub attention_dim: usize,
    pub noise_mode: NoiseMode,
    pub noise_std: f32,
    pub max_len: usize,
    pub max_turns: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PhredganD,
            vocab_size: 2000,
            embedding_dim: 32,
            attribute_dim: 32,
            hidden_size: 64,
            layers: 2,
            attention_dim: 64,
            noise_mode: NoiseMode::Word,
            noise_std: 1.0,
            max_len: 20,
            max_turns: 5,
        }
    }
}

impl ModelConfig {
    /// Noise width equals the word-embedding width.
    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { mode: self.noise_mode, std: self.noise_std, dim: self.embedding_dim }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("attribute_dim", self.attribute_dim),
            ("hidden_size", self.hidden_size),
            ("layers", self.layers),
            ("attention_dim", self.attention_dim),
            ("max_turns", self.max_turns),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{name} must be positive")));
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return Err(ConfigError::Invalid("vocab_size must exceed the 4 reserved tokens".into()));
        }
        if self.max_len < 2 {
            return Err(ConfigError::Invalid("max_len must be at least 2".into()));
        }
        if self.max_turns < 2 {
            return Err(ConfigError::Invalid("max_turns must be at least 2".into()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(ConfigError::Invalid(format!("noise_std must be positive, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Optimization hyperparameters and update gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_g_adv: f32,
    /// Defaults to 1 for `phredgan_d` and 0 otherwise.
    pub lambda_g_att: Option<f32>,
    pub lambda_m: f32,
    pub acc_d_threshold: f64,
    pub acc_g_threshold: f64,
    pub learning_rate: f32,
    pub clip_norm: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_g_adv: 1.0,
            lambda_g_att: None,
            lambda_m: 1.0,
            acc_d_threshold: 0.99,
            acc_g_threshold: 0.75,
            learning_rate: 0.5,
            clip_norm: 5.0,
            batch_size: 32,
            epochs: 10,
            seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn lambda_g_att(&self, variant: Variant) -> f32 {
        self.lambda_g_att.unwrap_or(if variant == Variant::PhredganD { 1.0 } else { 0.0 })
    }

    pub fn validate(&self, variant: Variant) -> Result<(), ConfigError> {
        for (name, v) in [("lambda_g_adv", self.lambda_g_adv), ("lambda_m", self.lambda_m), ("lambda_g_att", self.lambda_g_att(variant))] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if variant != Variant::PhredganD && self.lambda_g_att(variant) != 0.0 {
            return Err(ConfigError::Invalid(format!(
                "lambda_g_att must be 0 for {variant}: it has no attribute discriminator"
            )));
        }
        for (name, v) in [("acc_d_threshold", self.acc_d_threshold), ("acc_g_threshold", self.acc_g_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::Invalid(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid("learning_rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(ConfigError::Invalid("clip_norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// The flat configuration file: every key of [`ModelConfig`] and
/// [`TrainConfig`] at the top level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value).expect("serializable") {
        serde_json::Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("config structs serialize to objects"),
    }
}

impl RunConfig {
    pub fn known_keys() -> Vec<String> {
        let mut keys = keys_of(&ModelConfig::default());
        keys.extend(keys_of(&TrainConfig::default()));
        keys
    }

    /// Parses the flat JSON form. Missing keys take defaults; every unknown
    /// key is reported by name.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let serde_json::Value::Object(map) = value else {
            return Err(ConfigError::Invalid("configuration must be a JSON object".into()));
        };
        let known = Self::known_keys();
        let mut unknown: Vec<String> = map.keys().filter(|k| !known.contains(k)).cloned().collect();
        if !unknown.is_empty() {
            unknown.sort();
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let merge = |defaults: serde_json::Value| -> serde_json::Value {
            let serde_json::Value::Object(mut d) = defaults else { unreachable!() };
            for (k, v) in &map {
                if d.contains_key(k) {
                    d.insert(k.clone(), v.clone());
                }
            }
            serde_json::Value::Object(d)
        };
        let model: ModelConfig = serde_json::from_value(merge(serde_json::to_value(ModelConfig::default()).unwrap()))
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let train: TrainConfig = serde_json::from_value(merge(serde_json::to_value(TrainConfig::default()).unwrap()))
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let cfg = Self { model, train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = match serde_json::to_value(&self.model).unwrap() {
            serde_json::Value::Object(m) => m,
            _ => unreachable!(),
        };
        if let serde_json::Value::Object(t) = serde_json::to_value(&self.train).unwrap() {
            m.extend(t);
        }
        serde_json::Value::Object(m)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate(self.model.variant)
    }
}
