use serde::{Deserialize, Serialize};

use crate::corpus::UnknownInit;
use crate::error::{Error, Result};

/// Which syntactic branches feed the tagger and classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Branches {
    #[default]
    Both,
    CgcnOnly,
    DgcnOnly,
}

/// Which constituents a word may draw from in constituent-token attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMask {
    /// Every constituent dominating the word.
    #[default]
    Ancestors,
    /// Only the lowest constituent dominating the word.
    Parent,
    /// No masking at all.
    Unmasked,
}

/// Model and training hyperparameters. Field names are the JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// Per direction; contextual states are twice as wide.
    pub hidden_dim: usize,
    pub label_dim: usize,
    pub relation_dim: usize,
    pub cgcn_layers: usize,
    pub dgcn_layers: usize,
    pub cgcn_layer_norm: bool,
    pub attention_mask: AttentionMask,
    pub branches: Branches,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 coefficient.
    pub lambda: f64,
    /// Weight of the scope-tagging loss.
    pub gamma: f64,
    pub seed: u64,
    pub hard_bio: bool,
    pub target_indicator: bool,
    pub dropout: f64,
    pub freeze_embeddings: bool,
    pub lowercase: bool,
    pub unknown_init: UnknownInit,
    pub init_range: f64,
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            hidden_dim: 100,
            label_dim: 100,
            relation_dim: 30,
            cgcn_layers: 2,
            dgcn_layers: 2,
            cgcn_layer_norm: true,
            attention_mask: AttentionMask::Ancestors,
            branches: Branches::Both,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 32,
            lambda: 1e-4,
            gamma: 3e-2,
            seed: 42,
            hard_bio: false,
            target_indicator: true,
            dropout: 0.0,
            freeze_embeddings: true,
            lowercase: true,
            unknown_init: UnknownInit::Mean,
            init_range: 0.1,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    /// Width of the contextual and graph representations.
    pub fn model_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    /// Width of the concatenated syntactic representation.
    pub fn syntactic_dim(&self) -> usize {
        match self.branches {
            Branches::Both => 2 * self.model_dim(),
            Branches::CgcnOnly | Branches::DgcnOnly => self.model_dim(),
        }
    }

    pub fn uses_cgcn(&self) -> bool {
        self.branches != Branches::DgcnOnly
    }

    pub fn uses_dgcn(&self) -> bool {
        self.branches != Branches::CgcnOnly
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("label_dim", self.label_dim),
            ("relation_dim", self.relation_dim),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.gamma >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("gamma and lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_training_setup() {
        let c = ModelConfig::default();
        assert_eq!(c.embedding_dim, 300);
        assert_eq!(c.hidden_dim, 100);
        assert_eq!(c.relation_dim, 30);
        assert_eq!(c.label_dim, 100);
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lambda, 1e-4);
        assert_eq!(c.gamma, 3e-2);
        assert_eq!(c.syntactic_dim(), 400);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"gamma": 0.0, "branches": "cgcn-only"}"#).unwrap();
        assert_eq!(c.gamma, 0.0);
        assert_eq!(c.syntactic_dim(), 200);
        assert_eq!(c.epochs, 100);
    }

    #[test]
    fn rejects_negative_gamma() {
        let c = ModelConfig {
            gamma: -1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
