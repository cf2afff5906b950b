//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{MimError, Result};

/// Attention family backing one inter-level expert group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Spatial,
    Channel,
    Swin,
    Se,
}

impl Mechanism {
    pub const CANONICAL: [Mechanism; 4] = [
        Mechanism::Spatial,
        Mechanism::Channel,
        Mechanism::Swin,
        Mechanism::Se,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Spatial => "spatial",
            Mechanism::Channel => "channel",
            Mechanism::Swin => "swin",
            Mechanism::Se => "se",
        }
    }
}

/// How the four expert groups are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterRouting {
    /// Softmax-weighted fusion of every group.
    Dense,
    /// Only the highest-gated group runs, scaled by its softmax weight.
    SparseTop1,
}

/// How sub-experts inside one group are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraRouting {
    /// Softmax, top-k, renormalize.
    Sparse,
    /// Every sub-expert with weight 1/N.
    DenseUniform,
    /// One fixed expert per group, no router.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiMConfig {
    /// Mechanism of each of the four expert groups, in routing order.
    pub groups: Vec<Mechanism>,
    pub sub_experts: usize,
    pub top_k: usize,
    pub model_dim: usize,
    pub block_count: usize,
    pub window: usize,
    pub heads: usize,
    pub se_reduction: usize,
    pub inter_routing: InterRouting,
    pub intra_routing: IntraRouting,
    /// Adds the MiM input back onto the fused group output.
    pub mim_residual: bool,
    /// Weight of the optional sub-expert importance-balance penalty.
    pub balance_coef: f64,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub text_tokens: usize,
}

impl Default for MiMConfig {
    fn default() -> Self {
        MiMConfig {
            groups: Mechanism::CANONICAL.to_vec(),
            sub_experts: 4,
            top_k: 2,
            model_dim: 32,
            block_count: 2,
            window: 2,
            heads: 1,
            se_reduction: 4,
            inter_routing: InterRouting::Dense,
            intra_routing: IntraRouting::Sparse,
            mim_residual: true,
            balance_coef: 0.0,
            image_size: 16,
            channels: 1,
            patch: 4,
            text_tokens: 2,
        }
    }
}

impl MiMConfig {
    pub const GROUP_COUNT: usize = 4;

    /// Side length of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch width, i.e. the latent channel count.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Number of sub-experts actually instantiated per group.
    pub fn experts_per_group(&self) -> usize {
        match self.intra_routing {
            IntraRouting::Single => 1,
            _ => self.sub_experts,
        }
    }

    pub fn se_hidden(&self) -> usize {
        (self.model_dim / self.se_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(MimError::Config(msg));
        if self.groups.len() != Self::GROUP_COUNT {
            return fail(format!("expected 4 expert groups, got {}", self.groups.len()));
        }
        if self.sub_experts == 0 {
            return fail("sub_experts must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.sub_experts {
            return fail(format!(
                "top_k must lie in [1, {}], got {}",
                self.sub_experts, self.top_k
            ));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.se_reduction == 0 {
            return fail("se_reduction must be positive".into());
        }
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            ));
        }
        if self.channels == 0 || self.text_tokens == 0 {
            return fail("channels and text_tokens must be positive".into());
        }
        let grid = self.grid();
        if self.groups.contains(&Mechanism::Swin) && (self.window == 0 || grid % self.window != 0) {
            return fail(format!(
                "token grid {grid} is not divisible by window {}",
                self.window
            ));
        }
        if !self.balance_coef.is_finite() || self.balance_coef < 0.0 {
            return fail(format!("balance_coef must be >= 0, got {}", self.balance_coef));
        }
        Ok(())
    }

    /// Field-by-field description of where `self` and `other` disagree.
    pub fn differences(&self, other: &MiMConfig) -> Vec<String> {
        let a = toml::Value::try_from(self).expect("config serializes");
        let b = toml::Value::try_from(other).expect("config serializes");
        let (Some(a), Some(b)) = (a.as_table(), b.as_table()) else {
            return vec![];
        };
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, v)| {
                let theirs = b.get(k).map(|x| x.to_string()).unwrap_or_else(|| "missing".into());
                format!("{k}: {v} vs {theirs}")
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: MiMConfig =
            toml::from_str(text).map_err(|e| MimError::Config(format!("bad model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = MiMConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens(), 16);
        assert_eq!(cfg.patch_dim(), 16);
    }

    #[test]
    fn rejects_bad_top_k_and_group_count() {
        let cfg = MiMConfig {
            top_k: 5,
            ..MiMConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(MimError::Config(_))));
        let cfg = MiMConfig {
            groups: vec![Mechanism::Spatial; 3],
            ..MiMConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MiMConfig {
            window: 3,
            ..MiMConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn text_roundtrip_and_differences() {
        let cfg = MiMConfig::default();
        assert_eq!(MiMConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let other = MiMConfig {
            model_dim: 8,
            top_k: 1,
            ..cfg.clone()
        };
        let diffs = cfg.differences(&other);
        assert_eq!(diffs.len(), 2);
        assert!(diffs.iter().any(|d| d.starts_with("model_dim")));
    }
}
