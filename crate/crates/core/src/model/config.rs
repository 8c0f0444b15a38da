use serde::{Deserialize, Serialize};

use crate::conditions::{ConditionKind, TEXT_WIDTH};
use crate::error::{ensure, Result};

/// Toy vocabulary used for captions and the synthetic corpus.
pub const DEFAULT_LABELS: [&str; 12] = [
    "dog", "cat", "bell", "clap", "speech", "engine", "bird", "siren", "rain", "horn", "drum", "whistle",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_mmdit: usize,
    pub n_dit: usize,
    pub latent_width: usize,
    pub hidden: usize,
    pub heads: usize,
    pub text_width: usize,
    /// Caption tokens per sample.
    pub text_len: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    /// Caption vocabulary; token ids are `2 + index` (0 = pad, 1 = null).
    pub vocab: Vec<String>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_mmdit: 4,
            n_dit: 8,
            latent_width: 40,
            hidden: 64,
            heads: 4,
            text_width: TEXT_WIDTH,
            text_len: 4,
            mlp_ratio: 4,
            rope_base: 10_000.0,
            vocab: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl BackboneConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            n_mmdit: 1,
            n_dit: 1,
            latent_width: 16,
            hidden: 64,
            heads: 4,
            mlp_ratio: 4,
            rope_base: 100.0,
            ..Self::default()
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_mmdit + self.n_dit
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_mmdit >= 1, Config, "need at least one MMDiT layer");
        ensure!(self.heads >= 1 && self.hidden.is_multiple_of(self.heads), Config, "hidden {} not divisible by {} heads", self.hidden, self.heads);
        ensure!(self.head_dim().is_multiple_of(2), Config, "head width {} must be even for rotary embeddings", self.head_dim());
        ensure!(self.latent_width >= 1 && self.mlp_ratio >= 1 && self.text_len >= 1, Config, "widths must be positive");
        ensure!(self.text_width == TEXT_WIDTH, Config, "text width must be {TEXT_WIDTH}, got {}", self.text_width);
        ensure!(self.rope_base > 1.0, Config, "rope base must exceed 1");
        Ok(())
    }

    pub fn token_id(&self, label: &str) -> Option<usize> {
        self.vocab.iter().position(|l| l == label).map(|i| i + 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub depth: usize,
    pub encoder_hidden: usize,
    pub kernel: usize,
    /// Layer-normalised learned query projection per layer (otherwise the raw latent is the query).
    pub query_proj: bool,
    /// Per-layer key/value projections on top of the shared encoder output.
    pub per_layer_kv: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            encoder_hidden: 64,
            kernel: 3,
            query_proj: true,
            per_layer_kv: false,
        }
    }
}

impl AdapterConfig {
    /// Narrow encoder used with [`BackboneConfig::desk`].
    pub fn desk() -> Self {
        Self {
            encoder_hidden: 32,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlNetConfig {
    pub depth: usize,
}

impl Default for ControlNetConfig {
    fn default() -> Self {
        Self { depth: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            alpha: 64.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BranchArch {
    ControlNet(ControlNetConfig),
    Adapter(AdapterConfig),
}

impl BranchArch {
    pub fn depth(&self) -> usize {
        match self {
            Self::ControlNet(c) => c.depth,
            Self::Adapter(c) => c.depth,
        }
    }
}

/// One auxiliary branch. `condition = edit` makes it an editor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub name: String,
    pub condition: ConditionKind,
    pub arch: BranchArch,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

impl BranchConfig {
    pub fn adapter(name: &str, condition: ConditionKind, config: AdapterConfig) -> Self {
        Self {
            name: name.into(),
            condition,
            arch: BranchArch::Adapter(config),
            lora: None,
        }
    }

    pub fn controlnet(name: &str, condition: ConditionKind, config: ControlNetConfig) -> Self {
        Self {
            name: name.into(),
            condition,
            arch: BranchArch::ControlNet(config),
            lora: None,
        }
    }

    pub fn editor(name: &str, config: AdapterConfig, lora: Option<LoraConfig>) -> Self {
        Self {
            name: name.into(),
            condition: ConditionKind::Edit,
            arch: BranchArch::Adapter(config),
            lora,
        }
    }

    pub fn prefix(&self) -> String {
        format!("branch.{}.", self.name)
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let valid_name = !self.name.is_empty()
            && self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        ensure!(valid_name, Config, "branch name {:?} must be non-empty [A-Za-z0-9_-]", self.name);
        let depth = self.arch.depth();
        ensure!(
            depth >= 1 && depth <= backbone.n_layers(),
            Config,
            "branch depth {depth} must lie in 1..={} (backbone layers)",
            backbone.n_layers()
        );
        if let BranchArch::Adapter(a) = &self.arch {
            ensure!(a.encoder_hidden >= 1, Config, "encoder width must be positive");
            ensure!(a.kernel % 2 == 1, Config, "encoder kernel {} must be odd", a.kernel);
        }
        if let Some(l) = &self.lora {
            ensure!(l.rank >= 1 && l.alpha > 0.0, Config, "LoRA rank and alpha must be positive");
            ensure!(matches!(self.arch, BranchArch::Adapter(_)), Config, "LoRA is only supported on adapter-type branches");
        }
        if self.condition == ConditionKind::Edit {
            ensure!(matches!(self.arch, BranchArch::Adapter(_)), Config, "editors use the adapter architecture");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stated_values_and_validate() {
        let c = BackboneConfig::default();
        assert_eq!((c.n_mmdit, c.n_dit, c.latent_width), (4, 8, 40));
        c.validate().unwrap();
        BackboneConfig::desk().validate().unwrap();
        assert_eq!(LoraConfig::default().rank, 64);
        assert_eq!(c.token_id("dog"), Some(2));
        assert_eq!(c.token_id("zebra"), None);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = BackboneConfig::desk();
        c.heads = 3;
        assert!(c.validate().is_err());
        let desk = BackboneConfig::desk();
        let b = BranchConfig::adapter("x", ConditionKind::Loudness, AdapterConfig { depth: 3, ..Default::default() });
        assert!(b.validate(&desk).is_err());
        let b = BranchConfig::adapter("a b", ConditionKind::Loudness, AdapterConfig::default());
        assert!(b.validate(&desk).is_err());
        let mut b = BranchConfig::controlnet("c", ConditionKind::Loudness, ControlNetConfig::default());
        b.lora = Some(LoraConfig::default());
        assert!(b.validate(&desk).is_err());
    }

    #[test]
    fn branch_json_shape() {
        let b = BranchConfig::editor("insert", AdapterConfig::default(), Some(LoraConfig { rank: 8, alpha: 8.0 }));
        let text = serde_json::to_string(&b).unwrap();
        assert!(text.contains("\"type\":\"adapter\""));
        let back: BranchConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BackboneConfig>(r#"{"hidden": 8, "bogus": 1}"#).is_err());
    }
}
