use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the network are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Backbone and a single decoder on the deepest stage.
    Baseline,
    /// Region mining and a decoder on every stage, no cross-stage refinement.
    Mgm,
    /// Region mining, cross-stage refinement and per-stage decoders.
    #[default]
    Full,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "mgm" => Ok(Variant::Mgm),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant {other:?} (baseline|mgm|full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of granularity levels `L`.
    pub num_stages: usize,
    /// Region prototypes `M_l` per stage.
    pub parts_per_stage: Vec<usize>,
    pub backbone_widths: Vec<usize>,
    /// Common token grid; defaults to the deepest stage's grid.
    pub common_grid: Option<[usize; 2]>,
    pub common_channels: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    pub word_dim: usize,
    pub lambda_sce: f64,
    pub lambda_ar: f64,
    pub sce_temperature: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
}

pub(crate) fn default_widths(stages: usize) -> Vec<usize> {
    (0..stages).map(|l| 16usize << l.min(12)).collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            num_stages: 2,
            parts_per_stage: vec![3, 3],
            backbone_widths: default_widths(2),
            common_grid: None,
            common_channels: 32,
            decoder_dim: 32,
            heads: 1,
            word_dim: 32,
            lambda_sce: 1.0,
            lambda_ar: 1.0,
            sce_temperature: 1.0,
            learning_rate: 0.0005,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_size: 32,
            epochs: 60,
            eval_every: 5,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Sets `L` and a shared `N_p`, resetting per-stage lists to match.
    pub fn with_stages(mut self, stages: usize, parts: usize) -> Self {
        self.num_stages = stages;
        self.parts_per_stage = vec![parts; stages];
        self.backbone_widths = default_widths(stages);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_stages < 1 {
            return bad("need at least one stage".into());
        }
        if self.parts_per_stage.len() != self.num_stages || self.parts_per_stage.contains(&0) {
            return bad(format!(
                "parts per stage {:?} must list {} positive counts",
                self.parts_per_stage, self.num_stages
            ));
        }
        if self.backbone_widths.len() != self.num_stages || self.backbone_widths.contains(&0) {
            return bad(format!("backbone widths {:?} must list {} positive widths", self.backbone_widths, self.num_stages));
        }
        if self.backbone_widths.windows(2).any(|w| w[1] < w[0]) {
            return bad("backbone widths must be non-decreasing".into());
        }
        if matches!(self.common_grid, Some([0, _]) | Some([_, 0])) {
            return bad("common grid must be positive".into());
        }
        if self.common_channels == 0 || self.decoder_dim == 0 || self.word_dim == 0 {
            return bad("channel, decoder and word dimensions must be positive".into());
        }
        if self.heads == 0 || self.decoder_dim % self.heads != 0 {
            return bad(format!("{} heads do not divide decoder dim {}", self.heads, self.decoder_dim));
        }
        if !(self.sce_temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        for (name, v) in [
            ("learning rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight decay", self.weight_decay),
            ("lambda_sce", self.lambda_sce),
            ("lambda_ar", self.lambda_ar),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Stages that own a decoder head under the configured variant.
    pub fn decoded_stages(&self) -> usize {
        match self.variant {
            Variant::Baseline => 1,
            Variant::Mgm | Variant::Full => self.num_stages,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        let c = ModelConfig::default().with_stages(3, 7);
        c.validate().unwrap();
        assert_eq!(c.backbone_widths, vec![16, 32, 64]);
        assert_eq!(c.parts_per_stage, vec![7, 7, 7]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::default();
        c.sce_temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.parts_per_stage = vec![3, 0];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = ModelConfig::default().with_stages(0, 3);
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::default().with_stages(3, 5);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ModelConfig>("{\"bogus\": 1}").is_err());
    }
}
