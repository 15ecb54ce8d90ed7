use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::loss::LossWeights;

/// How object queries obtain their content and positional embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryInit {
    /// Both embeddings are learned and image independent (content starts at zero).
    Static,
    /// Both embeddings come from the top-scoring encoder tokens.
    Pure,
    /// Positional embedding from the top-scoring encoder tokens, learned content.
    Mixed,
}

impl std::fmt::Display for QueryInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Static => "static",
            Self::Pure => "pure",
            Self::Mixed => "mixed",
        })
    }
}

pub const RESOLUTION_SCALES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const ENCODER_DEPTHS: [usize; 4] = [0, 1, 3, 6];
/// Backbone stride of feature levels 1..=4.
pub const LEVEL_STRIDES: [usize; 4] = [8, 16, 32, 64];

/// Architecture switches plus dimensions and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub resolution_scale: f64,
    pub encoder_layers: usize,
    /// Ascending subset of `1..=4`.
    pub feature_levels: Vec<usize>,
    pub num_queries: usize,
    pub query_init: QueryInit,
    pub ibbr: bool,
    pub model_dim: usize,
    pub heads: usize,
    pub samples: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution_scale: 1.0,
            encoder_layers: 1,
            feature_levels: vec![2],
            num_queries: 20,
            query_init: QueryInit::Static,
            ibbr: false,
            model_dim: 32,
            heads: 4,
            samples: 4,
            decoder_layers: 6,
            ffn_dim: 64,
            num_classes: 2,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !RESOLUTION_SCALES.contains(&self.resolution_scale) {
            return bad(format!("resolution_scale {} not in {:?}", self.resolution_scale, RESOLUTION_SCALES));
        }
        if !ENCODER_DEPTHS.contains(&self.encoder_layers) {
            return bad(format!("encoder_layers {} not in {:?}", self.encoder_layers, ENCODER_DEPTHS));
        }
        if self.feature_levels.is_empty() {
            return bad("feature_levels must not be empty".into());
        }
        if self.feature_levels.iter().any(|l| !(1..=4).contains(l)) {
            return bad(format!("feature_levels {:?} must lie in 1..=4", self.feature_levels));
        }
        if self.feature_levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "feature_levels {:?} must be strictly ascending without duplicates",
                self.feature_levels
            ));
        }
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(4) {
            return bad(format!("model_dim {} must be a positive multiple of 4", self.model_dim));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.samples == 0 || self.decoder_layers == 0 || self.ffn_dim == 0 {
            return bad("samples, decoder_layers and ffn_dim must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        self.loss.validate().map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn max_level(&self) -> usize {
        self.feature_levels.iter().copied().max().unwrap_or(1)
    }
}
