//! Run configuration: parsed strictly, validated before any side effect.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use slick_core::blocks::{ModelConfig, ModelError};
use slick_core::distill::{DistillConfig, DistillError};
use slick_core::infer::{InferError, NmsConfig};
use slick_core::losses::{LossError, LossWeights};
use slick_core::synthdata::{Taxonomy, MIN_SIDE};
use slick_core::train::{DistillSettings, OptimizerConfig, TrainError, TrainSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("schema error at `{key}`: {reason}")]
    Schema { key: String, reason: String },
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Synthetic data used when no dataset path is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset directory; generated from the seed when absent.
    pub path: Option<PathBuf>,
    pub train_size: usize,
    pub eval_size: usize,
    pub height: usize,
    pub width: usize,
    pub difficulty: f64,
    pub taxonomy: Taxonomy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            train_size: 2000,
            eval_size: 200,
            height: 64,
            width: 64,
            difficulty: 0.5,
            taxonomy: Taxonomy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub runs: usize,
    pub sizes: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 5,
            runs: 50,
            sizes: vec![64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub loss: LossWeights,
    pub distill: DistillConfig,
    pub optimizer: OptimizerConfig,
    /// Teacher training epochs.
    pub epochs: usize,
    /// Student distillation epochs.
    pub distill_epochs: usize,
    pub batch_size: usize,
    pub data: DataConfig,
    pub seed: u64,
    pub nms: NmsConfig,
    /// Use bootstrap refinement at inference.
    pub bootstrap: bool,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            teacher: ModelConfig::teacher(),
            student: ModelConfig::student(),
            loss: LossWeights::default(),
            distill: DistillConfig::default(),
            optimizer: OptimizerConfig {
                step_size: 3e-3,
                ..OptimizerConfig::default()
            },
            epochs: 3,
            distill_epochs: 5,
            batch_size: 4,
            data: DataConfig::default(),
            seed: 0,
            nms: NmsConfig::default(),
            bootstrap: false,
            bench: BenchConfig::default(),
        }
    }
}

/// `"name must ..."` → `prefix.name`; anything else → `prefix`.
fn key_from_message(prefix: &str, msg: &str, fields: &[&str]) -> String {
    match msg.split_whitespace().next() {
        Some(first) if fields.contains(&first) => format!("{prefix}.{first}"),
        _ => prefix.to_string(),
    }
}

const MODEL_FIELDS: [&str; 12] = [
    "channels",
    "levels",
    "stem_stride",
    "level_depth",
    "query_dim",
    "num_queries",
    "mask_kernel",
    "num_part_classes",
    "num_damage_classes",
    "se_reduction",
    "fusion_dim",
    "fusion_channels",
];

fn model_error(prefix: &str, e: ModelError) -> ConfigError {
    let msg = match &e {
        ModelError::InvalidConfig(m) => m.clone(),
        other => other.to_string(),
    };
    invalid(key_from_message(prefix, &msg, &MODEL_FIELDS), msg)
}

fn train_error(prefix: &str, e: TrainError) -> ConfigError {
    match e {
        TrainError::Config { key, reason } => invalid(format!("{prefix}.{key}"), reason),
        TrainError::Loss(l) => loss_error(l),
        other => invalid(prefix, other.to_string()),
    }
}

fn loss_error(e: LossError) -> ConfigError {
    match e {
        LossError::NegativeWeight { name, value } => invalid(format!("loss.{name}"), format!("must be non-negative, got {value}")),
        other => invalid("loss", other.to_string()),
    }
}

impl RunConfig {
    /// Strict parse: unknown keys and type errors name their JSON path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let msg = e.into_inner().to_string();
            invalid(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.teacher.validate().map_err(|e| model_error("teacher", e))?;
        self.student.validate().map_err(|e| model_error("student", e))?;
        let tax = &self.data.taxonomy;
        tax.validate().map_err(|e| invalid("data.taxonomy", e.to_string()))?;
        for (name, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            if m.num_part_classes != tax.parts.len() {
                return Err(invalid(
                    format!("{name}.num_part_classes"),
                    format!("{} does not match the {} taxonomy parts", m.num_part_classes, tax.parts.len()),
                ));
            }
            if m.num_damage_classes != tax.damages.len() {
                return Err(invalid(
                    format!("{name}.num_damage_classes"),
                    format!("{} does not match the {} taxonomy damages", m.num_damage_classes, tax.damages.len()),
                ));
            }
        }
        self.loss.validate().map_err(loss_error)?;
        self.distill.validate().map_err(|e| match e {
            DistillError::Temperature(t) => invalid("distill.temperature", format!("must be positive, got {t}")),
            DistillError::Config(m) => {
                let fields = [
                    "lambda_m",
                    "lambda_c",
                    "lambda_f",
                    "lambda_g",
                    "lambda_attn",
                    "lambda_kd",
                    "lambda_multi",
                    "lambda_refine",
                    "lambda_1",
                    "lambda_2",
                    "lambda_3",
                    "alpha",
                ];
                invalid(key_from_message("distill", &m, &fields), m)
            }
            other => invalid("distill", other.to_string()),
        })?;
        self.optimizer.validate().map_err(|e| train_error("optimizer", e))?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        let d = &self.data;
        if d.path.is_none() {
            let min = MIN_SIDE.max(self.teacher.min_input_side()).max(self.student.min_input_side());
            if d.height < min {
                return Err(invalid("data.height", format!("must be at least {min}")));
            }
            if d.width < min {
                return Err(invalid("data.width", format!("must be at least {min}")));
            }
            if !(0.0..=1.0).contains(&d.difficulty) {
                return Err(invalid("data.difficulty", "must lie in [0, 1]"));
            }
        }
        self.nms.validate().map_err(|e| match e {
            InferError::Nms(m) => invalid(key_from_message("nms", &m, &["score_threshold", "iou_threshold", "top_k"]), m),
            other => invalid("nms", other.to_string()),
        })?;
        if self.bench.runs == 0 {
            return Err(invalid("bench.runs", "must be positive"));
        }
        if self.bench.sizes.is_empty() {
            return Err(invalid("bench.sizes", "must list at least one size"));
        }
        let min = self.teacher.min_input_side().max(self.student.min_input_side());
        if let Some(&s) = self.bench.sizes.iter().find(|&&s| s < min) {
            return Err(invalid("bench.sizes", format!("size {s} is below the minimum {min}")));
        }
        Ok(())
    }

    /// Canonical JSON: struct fields serialize in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn teacher_settings(&self, threads: usize) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            loss: self.loss,
            seed: derive_seed(self.seed, "teacher-batches"),
            threads,
        }
    }

    pub fn distill_settings(&self, threads: usize) -> DistillSettings {
        DistillSettings {
            train: TrainSettings {
                epochs: self.distill_epochs,
                seed: derive_seed(self.seed, "student-batches"),
                ..self.teacher_settings(threads)
            },
            distill: self.distill.clone(),
            head_seed: derive_seed(self.seed, "projection-head"),
        }
    }
}

/// Independent stream seed for a named purpose.
pub fn derive_seed(base: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match RunConfig::from_json(text) {
            Err(ConfigError::Schema { key, .. }) => key,
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.canonical_json()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_offending_key() {
        assert_eq!(key_of(r#"{"bogus": 1}"#), "bogus");
        assert_eq!(key_of(r#"{"optimizer": {"step_sise": 1}}"#), "optimizer.step_sise");
        assert_eq!(key_of(r#"{"optimizer": {"step_size": -1}}"#), "optimizer.step_size");
        assert_eq!(key_of(r#"{"batch_size": "four"}"#), "batch_size");
        assert_eq!(key_of(r#"{"batch_size": 0}"#), "batch_size");
        assert_eq!(key_of(r#"{"loss": {"lambda_bnd": -0.5}}"#), "loss.lambda_bnd");
        assert_eq!(key_of(r#"{"distill": {"temperature": 0}}"#), "distill.temperature");
        assert_eq!(key_of(r#"{"distill": {"alpha": [0.2]}}"#), "distill.alpha");
        assert_eq!(key_of(r#"{"data": {"height": 8}}"#), "data.height");
        let mut t = serde_json::to_value(ModelConfig::teacher()).unwrap();
        t["channels"] = 0.into();
        assert_eq!(key_of(&serde_json::json!({ "teacher": t }).to_string()), "teacher.channels");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
    }
}
