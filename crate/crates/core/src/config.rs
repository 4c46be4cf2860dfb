use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GstError, Result};

/// Observed steps per window (3.2 s at 2.5 Hz).
pub const OBS_LEN: usize = 8;
/// Predicted steps per window (4.8 s at 2.5 Hz).
pub const PRED_LEN: usize = 12;
pub const WINDOW_LEN: usize = OBS_LEN + PRED_LEN;
/// Seconds between consecutive steps.
pub const STEP_SECONDS: f64 = 0.4;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub node_dim: usize,
    pub edge_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub feed_forward_dim: usize,
    /// Run the edge selector; when false the encoder sees the binary
    /// adjacency.
    pub sparsity: bool,
    /// Neighbor cap `n`, which is also the number of selector heads.
    pub neighbors: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            node_dim: 32,
            edge_dim: 64,
            hidden_dim: 32,
            encoder_layers: 3,
            encoder_heads: 8,
            feed_forward_dim: 128,
            sparsity: true,
            neighbors: 1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Width of `[v_j | v_i | e_ij]`.
    pub fn augmented_dim(&self) -> usize {
        2 * self.node_dim + self.edge_dim
    }

    pub fn selector_head_dim(&self) -> usize {
        self.augmented_dim() / self.neighbors
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GstError::Config(m));
        if self.neighbors == 0 || self.augmented_dim() % self.neighbors != 0 {
            return bad(format!(
                "neighbors = {} must divide the augmented edge width {}",
                self.neighbors,
                self.augmented_dim()
            ));
        }
        if self.encoder_heads == 0 || self.node_dim % self.encoder_heads != 0 {
            return bad(format!(
                "encoder_heads = {} must divide node_dim = {}",
                self.encoder_heads, self.node_dim
            ));
        }
        if self.node_dim == 0
            || self.edge_dim == 0
            || self.hidden_dim == 0
            || self.feed_forward_dim == 0
        {
            return bad("layer widths must be positive".into());
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers must be positive".into());
        }
        Ok(())
    }
}

/// How the selector turns edge logits into an adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Gumbel-softmax relaxation.
    #[default]
    Soft,
    /// One-hot argmax of the relaxed sample, straight-through gradient.
    Hard,
    /// Softmax without noise; for tests.
    Deterministic,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Soft => "soft",
            SamplingMode::Hard => "hard",
            SamplingMode::Deterministic => "deterministic",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = GstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(SamplingMode::Soft),
            "hard" => Ok(SamplingMode::Hard),
            "deterministic" => Ok(SamplingMode::Deterministic),
            other => Err(GstError::InvalidArgument(format!(
                "unknown sampling mode `{other}`"
            ))),
        }
    }
}

/// The three model switches: partial input, sparsity, neighbor cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub partial_input: bool,
    pub sparsity: bool,
    /// Ignored when `sparsity` is off.
    pub neighbors: usize,
}

impl Variant {
    /// Configuration IDs 1..=8.
    pub fn from_id(id: u8) -> Result<Self> {
        let (partial_input, sparsity, neighbors) = match id {
            1 => (false, false, 1),
            2 => (false, true, 16),
            3 => (false, true, 4),
            4 => (false, true, 1),
            5 => (true, false, 1),
            6 => (true, true, 16),
            7 => (true, true, 4),
            8 => (true, true, 1),
            _ => {
                return Err(GstError::InvalidArgument(format!(
                    "configuration ID {id} is not in 1..=8"
                )))
            }
        };
        Ok(Self {
            partial_input,
            sparsity,
            neighbors,
        })
    }

    /// Configuration ID, if this combination is one of the eight.
    pub fn id(&self) -> Option<u8> {
        let base = if self.partial_input { 4 } else { 0 };
        let offset = match (self.sparsity, self.neighbors) {
            (false, _) => 1,
            (true, 16) => 2,
            (true, 4) => 3,
            (true, 1) => 4,
            _ => return None,
        };
        Some(base + offset)
    }

    /// Same behavior: the neighbor cap is irrelevant without sparsity.
    pub fn matches(&self, other: &Variant) -> bool {
        self.partial_input == other.partial_input
            && self.sparsity == other.sparsity
            && (!self.sparsity || self.neighbors == other.neighbors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_ids_roundtrip() {
        for id in 1..=8 {
            assert_eq!(Variant::from_id(id).unwrap().id(), Some(id));
        }
        assert!(Variant::from_id(9).is_err());
        let v = Variant::from_id(8).unwrap();
        assert!(v.partial_input && v.sparsity && v.neighbors == 1);
        let v = Variant::from_id(1).unwrap();
        assert!(!v.partial_input && !v.sparsity);
    }

    #[test]
    fn default_dims() {
        let c = ModelConfig::default();
        assert_eq!(c.augmented_dim(), 128);
        c.validate().unwrap();
        let bad = ModelConfig { neighbors: 3, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_parse() {
        assert_eq!("hard".parse::<SamplingMode>().unwrap(), SamplingMode::Hard);
        assert!("fuzzy".parse::<SamplingMode>().is_err());
    }
}
