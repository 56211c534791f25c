//! Architecture blocks: encoder pyramid, prior-constrained and
//! localization-aware attention, instance mask head, channel calibration and
//! knowledge fusion with FiLM modulation.

mod attention;
mod c3;
mod encoder;
mod fusion;
mod graph;
mod heatmap;
mod isr;
mod model;

pub use attention::{Activation, attention_bias, loc_attention, plain_attention, prior_attention, LocMlp, PriorAttentionWeights};
pub use c3::c3_calibrate;
pub use encoder::{encode, FeaturePyramid};
pub use fusion::{film_modulate, fuse_knowledge, fuse_vectors, knowledge_encoder, FilmWeights, MlpWeights};
pub use graph::{GraphError, StructuralPriorGraph};
pub use heatmap::{weak_heatmap, DamageHeatmap, Rect, BOX_INTENSITY};
pub use isr::{isr_masks, IsrOutput};
pub use model::{
    nearest_index, ForwardOptions, ForwardOutput, InstancePrediction, InstanceQuery, QuerySlot,
    SlickModel, TokenPartSource,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("image {h}x{w} too small for {levels} pyramid levels (needs at least {min})")]
    ImageTooSmall {
        h: usize,
        w: usize,
        levels: usize,
        min: usize,
    },
    #[error("unexpected input shape {0:?}")]
    BadInput(Vec<usize>),
}

/// Capacity knobs of one network. The teacher and student are two instances
/// of the same block family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C` shared by all pyramid levels.
    pub channels: usize,
    /// Pyramid depth `L`.
    pub levels: usize,
    /// Stride of the stem convolution (1 keeps full resolution at level 1).
    pub stem_stride: usize,
    /// Extra 3×3 convolutions per pyramid level.
    pub level_depth: usize,
    /// Query embedding width `d`.
    pub query_dim: usize,
    /// Number of instance queries `N`.
    pub num_queries: usize,
    /// Spatial size of the dynamic mask kernel produced from each query.
    pub mask_kernel: usize,
    pub num_part_classes: usize,
    pub num_damage_classes: usize,
    /// Squeeze-and-excitation reduction ratio `r`.
    pub se_reduction: usize,
    /// Knowledge vector width `|z|`.
    pub fusion_dim: usize,
    /// Channels of each of the three knowledge encoders.
    pub fusion_channels: usize,
}

/// Image channels; the stem also receives one conditioning channel.
pub const IMAGE_CHANNELS: usize = 3;
pub const STEM_CHANNELS: usize = IMAGE_CHANNELS + 1;

impl ModelConfig {
    /// Large configuration used as the distillation teacher.
    pub fn teacher() -> Self {
        Self {
            channels: 16,
            levels: 3,
            stem_stride: 1,
            level_depth: 1,
            query_dim: 32,
            num_queries: 14,
            mask_kernel: 3,
            num_part_classes: 6,
            num_damage_classes: 4,
            se_reduction: 4,
            fusion_dim: 16,
            fusion_channels: 8,
        }
    }

    /// Lightweight student configuration.
    pub fn student() -> Self {
        Self {
            channels: 8,
            levels: 2,
            stem_stride: 2,
            level_depth: 0,
            query_dim: 16,
            num_queries: 10,
            mask_kernel: 3,
            num_part_classes: 6,
            num_damage_classes: 4,
            se_reduction: 2,
            fusion_dim: 8,
            fusion_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("channels", self.channels),
            ("levels", self.levels),
            ("stem_stride", self.stem_stride),
            ("query_dim", self.query_dim),
            ("num_queries", self.num_queries),
            ("mask_kernel", self.mask_kernel),
            ("num_part_classes", self.num_part_classes),
            ("num_damage_classes", self.num_damage_classes),
            ("se_reduction", self.se_reduction),
            ("fusion_dim", self.fusion_dim),
            ("fusion_channels", self.fusion_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.levels < 2 {
            return Err(ModelError::InvalidConfig("levels must be at least 2".into()));
        }
        if self.stem_stride > 2 {
            return Err(ModelError::InvalidConfig("stem_stride must be 1 or 2".into()));
        }
        if self.mask_kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig("mask_kernel must be odd".into()));
        }
        if self.channels % self.se_reduction != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "se_reduction {} must divide channels {}",
                self.se_reduction, self.channels
            )));
        }
        if self.num_queries < self.num_part_classes + self.num_damage_classes {
            return Err(ModelError::InvalidConfig(format!(
                "num_queries {} must cover one slot per part and damage class ({})",
                self.num_queries,
                self.num_part_classes + self.num_damage_classes
            )));
        }
        Ok(())
    }

    /// Whether `self` exceeds `other` in channels, levels, query width and
    /// query count.
    pub fn dominates(&self, other: &ModelConfig) -> bool {
        self.channels > other.channels
            && self.levels > other.levels
            && self.query_dim > other.query_dim
            && self.num_queries > other.num_queries
    }

    /// Part logits carry one trailing "no object" entry.
    pub fn part_logits(&self) -> usize {
        self.num_part_classes + 1
    }

    /// Damage logits carry one trailing "no damage" entry.
    pub fn damage_logits(&self) -> usize {
        self.num_damage_classes + 1
    }

    /// Spatial size of pyramid level `level` (0-based) for an input side.
    pub fn level_size(&self, side: usize, level: usize) -> usize {
        let mut s = side.div_ceil(self.stem_stride);
        for _ in 0..level {
            s = s.div_ceil(2);
        }
        s
    }

    pub fn min_input_side(&self) -> usize {
        1 << self.levels
    }
}
