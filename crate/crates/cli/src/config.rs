//! Experiment configuration: one TOML file, one top-level seed.
//!
//! Every random process in a run derives from `seed`; the content hash of
//! the resolved config addresses the output directory, so two different
//! configs can never silently share artifacts.

use serde::{Deserialize, Serialize};

use uaplab_core::seeds::fnv1a64;
use uaplab_core::zoo::{ArchName, Regime};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// The single top-level seed; stages derive their own streams.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub ensemble: EnsembleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Regimes trained on the primary architecture.
    pub regimes: Vec<String>,
    /// Primary architecture for the regime comparison.
    pub architecture: String,
    /// Extra architectures trained under the IN regime for the
    /// cross-architecture transfer columns.
    pub cross_architectures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Untargeted sweep budgets (8-bit units).
    pub epsilons: Vec<f32>,
    /// The benchmark ε used for transfer, targeted and ensemble work.
    pub primary_epsilon: f32,
    /// Passes over the attack subset.
    pub iterations: usize,
    pub batch_size: usize,
    /// Sign-step length in pixel units; omit for the (ε/255)/10 default.
    #[serde(default)]
    pub step_size: Option<f32>,
    /// Perturbations optimize over this many train-split images.
    pub attack_images: usize,
    /// Regimes that get a full per-class targeted sweep.
    pub targeted_regimes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Size of the cue-conflict probe set.
    pub conflict_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    /// Member regimes (on the primary architecture).
    pub members: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config {
                path: "<root>".into(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Content hash of the resolved config (after any seed override).
    pub fn content_hash(&self) -> u64 {
        fnv1a64(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |path: &str, message: String| -> Result<(), CliError> {
            Err(CliError::Config {
                path: path.into(),
                message,
            })
        };
        if self.dataset.n_train < 10 {
            return fail("dataset.n_train", format!("must be >= 10, got {}", self.dataset.n_train));
        }
        if self.dataset.n_test < 10 {
            return fail("dataset.n_test", format!("must be >= 10, got {}", self.dataset.n_test));
        }
        if self.train.epochs < 1 {
            return fail("train.epochs", "must be >= 1".into());
        }
        if self.train.batch_size < 1 {
            return fail("train.batch_size", "must be >= 1".into());
        }
        if self.train.learning_rate <= 0.0 || self.train.learning_rate.is_nan() {
            return fail("train.learning_rate", format!("must be > 0, got {}", self.train.learning_rate));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return fail("train.momentum", format!("must be in [0, 1), got {}", self.train.momentum));
        }
        if self.train.regimes.is_empty() {
            return fail("train.regimes", "must name at least one regime".into());
        }
        for (i, r) in self.train.regimes.iter().enumerate() {
            if parse_regime(r).is_none() {
                return fail(&format!("train.regimes[{i}]"), format!("unknown regime {r:?}"));
            }
        }
        if ArchName::parse(&self.train.architecture).is_err() {
            return fail("train.architecture", format!("unknown architecture {:?}", self.train.architecture));
        }
        for (i, a) in self.train.cross_architectures.iter().enumerate() {
            if ArchName::parse(a).is_err() {
                return fail(&format!("train.cross_architectures[{i}]"), format!("unknown architecture {a:?}"));
            }
            if *a == self.train.architecture {
                return fail(
                    &format!("train.cross_architectures[{i}]"),
                    "duplicates train.architecture".into(),
                );
            }
        }
        if self.attack.epsilons.is_empty() {
            return fail("attack.epsilons", "must be non-empty".into());
        }
        for (i, &e) in self.attack.epsilons.iter().enumerate() {
            if e <= 0.0 || e.is_nan() {
                return fail(&format!("attack.epsilons[{i}]"), format!("must be > 0, got {e}"));
            }
        }
        if !self.attack.epsilons.contains(&self.attack.primary_epsilon) {
            return fail(
                "attack.primary_epsilon",
                format!("{} is not in attack.epsilons", self.attack.primary_epsilon),
            );
        }
        if self.attack.iterations < 1 {
            return fail("attack.iterations", "must be >= 1".into());
        }
        if self.attack.batch_size < 1 {
            return fail("attack.batch_size", "must be >= 1".into());
        }
        if let Some(s) = self.attack.step_size {
            if s <= 0.0 || s.is_nan() {
                return fail("attack.step_size", format!("must be > 0, got {s}"));
            }
        }
        if self.attack.attack_images < 1 {
            return fail("attack.attack_images", "must be >= 1".into());
        }
        for (i, r) in self.attack.targeted_regimes.iter().enumerate() {
            if parse_regime(r).is_none() {
                return fail(&format!("attack.targeted_regimes[{i}]"), format!("unknown regime {r:?}"));
            }
            if !self.train.regimes.contains(r) {
                return fail(
                    &format!("attack.targeted_regimes[{i}]"),
                    format!("regime {r:?} is not trained (train.regimes)"),
                );
            }
        }
        if self.eval.conflict_images < 1 {
            return fail("eval.conflict_images", "must be >= 1".into());
        }
        if self.ensemble.members.len() < 2 {
            return fail("ensemble.members", "need at least two members".into());
        }
        for (i, r) in self.ensemble.members.iter().enumerate() {
            if parse_regime(r).is_none() {
                return fail(&format!("ensemble.members[{i}]"), format!("unknown regime {r:?}"));
            }
            if !self.train.regimes.contains(r) {
                return fail(
                    &format!("ensemble.members[{i}]"),
                    format!("regime {r:?} is not trained (train.regimes)"),
                );
            }
        }
        Ok(())
    }

    pub fn regimes(&self) -> Vec<Regime> {
        self.train
            .regimes
            .iter()
            .map(|r| parse_regime(r).expect("validated"))
            .collect()
    }

    pub fn primary_arch(&self) -> ArchName {
        ArchName::parse(&self.train.architecture).expect("validated")
    }

    pub fn cross_archs(&self) -> Vec<ArchName> {
        self.train
            .cross_architectures
            .iter()
            .map(|a| ArchName::parse(a).expect("validated"))
            .collect()
    }
}

pub fn parse_regime(s: &str) -> Option<Regime> {
    match Regime::parse(s) {
        Ok(Regime::Other) | Err(_) => None,
        Ok(r) => Some(r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> &'static str {
        r#"
seed = 7

[dataset]
n_train = 100
n_test = 40

[train]
epochs = 2
batch_size = 16
learning_rate = 0.05
momentum = 0.9
regimes = ["IN", "SIN"]
architecture = "convnet-M"
cross_architectures = ["convnet-S"]

[attack]
epsilons = [2.0, 10.0]
primary_epsilon = 10.0
iterations = 2
batch_size = 16
attack_images = 50
targeted_regimes = ["IN"]

[eval]
conflict_images = 50

[ensemble]
members = ["IN", "SIN"]
"#
    }

    #[test]
    fn roundtrips_losslessly() {
        let cfg = ExperimentConfig::from_toml(sample()).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.content_hash(), again.content_hash());
    }

    #[test]
    fn seed_changes_the_hash() {
        let a = ExperimentConfig::from_toml(sample()).unwrap();
        let mut b = a.clone();
        b.seed = 8;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn validation_names_the_field_path() {
        let mut cfg = ExperimentConfig::from_toml(sample()).unwrap();
        cfg.attack.epsilons[0] = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("attack.epsilons[0]"), "{err}");

        let mut cfg = ExperimentConfig::from_toml(sample()).unwrap();
        cfg.ensemble.members = vec!["IN".into()];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("ensemble.members"), "{err}");

        let mut cfg = ExperimentConfig::from_toml(sample()).unwrap();
        cfg.train.regimes = vec!["IN".into(), "bogus".into()];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("train.regimes[1]"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{}\nunknown_key = 1\n", sample());
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
