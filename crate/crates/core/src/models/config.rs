use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Transformer whose readout predicts the query label directly.
    Vanilla,
    /// Transformer emitting a latent code that weights learned modules.
    #[serde(alias = "hypertransformer", alias = "hypernetwork")]
    Hyper,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::Hyper => "hyper",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" => Ok(ModelKind::Vanilla),
            "hyper" | "hypertransformer" | "hypernetwork" => Ok(ModelKind::Hyper),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_expansion: usize,
    /// Dimension `d` of the task inputs; tokens carry `d + 1` values.
    pub input_dim: usize,
    pub output_dim: usize,
    /// Number of learned modules (hyper only).
    pub latent_dim: usize,
    /// Hidden width of the generated task network (hyper only).
    pub hidden_dim: usize,
    pub position_buckets: usize,
    pub position_max_distance: usize,
    pub final_layer_norm: bool,
    /// Feed every labelled pair plus an empty `(0, 0)` token instead of masking the query label.
    pub literal_hyper_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::vanilla()
    }
}

impl ModelConfig {
    pub fn vanilla() -> Self {
        ModelConfig {
            kind: ModelKind::Vanilla,
            d_model: 128,
            heads: 4,
            layers: 2,
            ffn_expansion: 4,
            input_dim: 16,
            output_dim: 1,
            latent_dim: 6,
            hidden_dim: 32,
            position_buckets: 32,
            position_max_distance: 128,
            final_layer_norm: true,
            literal_hyper_input: false,
        }
    }

    pub fn hyper() -> Self {
        ModelConfig {
            kind: ModelKind::Hyper,
            d_model: 64,
            ..ModelConfig::vanilla()
        }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Vanilla => ModelConfig::vanilla(),
            ModelKind::Hyper => ModelConfig::hyper(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_expansion
    }

    pub fn token_dim(&self) -> usize {
        self.input_dim + 1
    }

    /// Number of tokens the trunk sees for an episode of `n` pairs.
    pub fn sequence_len(&self, n: usize) -> usize {
        if self.kind == ModelKind::Hyper && self.literal_hyper_input {
            n + 1
        } else {
            n
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_expansion", self.ffn_expansion),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d_model = {} is not divisible by model.heads = {}",
                self.d_model, self.heads
            )));
        }
        if self.position_buckets < 4 || !self.position_buckets.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model.position_buckets must be even and at least 4, got {}",
                self.position_buckets
            )));
        }
        if self.position_max_distance <= self.position_buckets / 4 {
            return Err(Error::Config(format!(
                "model.position_max_distance must exceed {}, got {}",
                self.position_buckets / 4,
                self.position_max_distance
            )));
        }
        if self.kind == ModelKind::Hyper && (self.latent_dim == 0 || self.hidden_dim == 0) {
            return Err(Error::Config(
                "hyper models need positive latent_dim and hidden_dim".into(),
            ));
        }
        Ok(())
    }
}
