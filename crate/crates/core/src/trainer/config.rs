use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::scoring::ScoringConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Token learning plus mask-guided distillation.
    Ett,
    /// Plain continued training on each new snapshot.
    FineTune,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ett" => Ok(Mode::Ett),
            "fine-tune" | "finetune" => Ok(Mode::FineTune),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Which triples drive token learning at a snapshot transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Source {
    /// Train triples of the previous snapshot.
    Previous,
    /// Train triples of the current snapshot whose ids all lie in the overlap.
    CurrentOverlap,
}

/// Run configuration. Every field has a default, so a JSON file may set
/// any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dim: usize,
    pub margin: f64,
    pub negatives: usize,
    pub tokens: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stage1_epochs: usize,
    pub max_epochs_first: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub no_distill: bool,
    pub no_stage1: bool,
    pub no_div: bool,
    pub float64: bool,
    pub reproducible: bool,
    pub filter_negatives: bool,
    pub renormalize: bool,
    pub shared_tokens: bool,
    pub stop_mask_gradient: bool,
    pub stage1_source: Stage1Source,
    pub eval_protocol: Protocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ett,
            dim: 200,
            margin: 9.0,
            negatives: 10,
            tokens: 4,
            lambda: 0.1,
            alpha: 1e4,
            batch_size: 1024,
            learning_rate: 1e-3,
            stage1_epochs: 10,
            max_epochs_first: 100,
            max_epochs: 50,
            patience: 3,
            seed: 0,
            no_distill: false,
            no_stage1: false,
            no_div: false,
            float64: false,
            reproducible: false,
            filter_negatives: false,
            renormalize: false,
            shared_tokens: false,
            stop_mask_gradient: false,
            stage1_source: Stage1Source::Previous,
            eval_protocol: Protocol::Filtered,
        }
    }
}

impl TrainConfig {
    /// Settings for graphs of a few thousand facts (the synthetic
    /// benchmarks): small dimension, small batches, faster learning rate,
    /// deterministic reduction. Everything else keeps its default.
    pub fn desk_scale() -> Self {
        TrainConfig {
            dim: 8,
            batch_size: 128,
            learning_rate: 1e-2,
            max_epochs_first: 300,
            max_epochs: 50,
            patience: 5,
            reproducible: true,
            ..TrainConfig::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.scoring().validate()?;
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if self.tokens == 0 {
            return bad("token count must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be finite and >= 0", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            margin: self.margin,
            negatives: self.negatives,
        }
    }

    /// True when snapshot transitions use nothing beyond plain training.
    pub fn is_plain(&self) -> bool {
        self.mode == Mode::FineTune
    }

    pub fn runs_stage1(&self) -> bool {
        self.mode == Mode::Ett && !self.no_stage1
    }

    pub fn runs_distill(&self) -> bool {
        self.mode == Mode::Ett && !self.no_distill
    }

    /// Effective diversity weight.
    pub fn diversity_weight(&self) -> f64 {
        if self.no_div {
            0.0
        } else {
            self.lambda
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_sit_in_published_ranges() {
        let c = TrainConfig::default();
        assert_eq!(c.margin, 9.0);
        assert_eq!(c.dim, 200);
        assert!(c.tokens >= 1 && c.tokens <= 10);
        assert!((0.0..=1.0).contains(&c.lambda));
        assert!((1e3..=1e5).contains(&c.alpha));
        assert!([1024, 2048, 3072].contains(&c.batch_size));
        assert!([1e-2, 1e-3, 1e-4, 1e-5].contains(&c.learning_rate));
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_and_unknown_fields() {
        let c: TrainConfig = serde_json::from_str(r#"{"dim": 16, "mode": "fine-tune"}"#).unwrap();
        assert_eq!(c.dim, 16);
        assert_eq!(c.mode, Mode::FineTune);
        assert_eq!(c.tokens, 4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"dimm": 16}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_values_rejected() {
        let c = TrainConfig {
            negatives: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            margin: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
