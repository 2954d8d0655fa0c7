//! Effective configuration for one command: defaults, then the `--config`
//! file, then flags. The file uses the same `key=value` lines as adapter
//! metadata; `#` starts a comment line.

use std::collections::BTreeSet;
use std::path::Path;

use hotlora_core::backbone::BackboneConfig;
use hotlora_core::store::MissPolicy;
use hotlora_core::taskgen::SuiteConfig;
use hotlora_core::tensor::fnv1a64;
use hotlora_core::trainer::{PretrainConfig, TrainConfig, DESK_FULL_LR};
use hotlora_core::CoreError;

use crate::CliError;

pub const DEFAULT_ITERATIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub suite: SuiteConfig,
    /// Expert training, and the shared budget for every regime.
    pub train: TrainConfig,
    /// Learning rate for the full fine-tuning regimes.
    pub full_lr: f32,
    pub on_miss: MissPolicy,
    pub loader: String,
    pub iterations: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            suite: SuiteConfig::default(),
            train: TrainConfig::desk(),
            full_lr: DESK_FULL_LR,
            on_miss: MissPolicy::BaseFallback,
            loader: "disk".into(),
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

/// Splits `key=value` lines. Blank and `#` lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    fn known_keys() -> BTreeSet<String> {
        let s = Settings::default();
        let mut keys: BTreeSet<String> = s.backbone.to_pairs().into_iter().map(|(k, _)| k).collect();
        keys.extend(s.pretrain.to_pairs().into_iter().map(|(k, _)| k));
        keys.extend(s.suite.to_pairs().into_iter().map(|(k, _)| k));
        keys.extend(s.train.to_pairs().into_iter().map(|(k, _)| k));
        keys.extend(["full_lr", "on_miss", "loader", "iterations"].map(String::from));
        keys
    }

    /// Applies pairs on top of `self`. Unknown keys are an error so typos
    /// do not silently fall back to defaults.
    pub fn apply(self, pairs: &[(String, String)]) -> Result<Self, CliError> {
        let known = Self::known_keys();
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !known.contains(k)) {
            return Err(CliError::Usage(format!("unknown config key {k:?}")));
        }
        let borrowed: Vec<(&str, &str)> = pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let mut out = Self {
            backbone: self.backbone.apply_pairs(borrowed.iter().copied())?,
            pretrain: self.pretrain.apply_pairs(borrowed.iter().copied())?,
            suite: self.suite.apply_pairs(borrowed.iter().copied())?,
            train: self.train.apply_pairs(borrowed.iter().copied())?,
            ..self
        };
        for (k, v) in &borrowed {
            match *k {
                "on_miss" => out.on_miss = MissPolicy::parse(v)?,
                "loader" => out.loader = v.to_string(),
                "full_lr" => {
                    out.full_lr = v
                        .parse()
                        .ok()
                        .filter(|x: &f32| *x > 0.0 && x.is_finite())
                        .ok_or_else(|| CoreError::Config(format!("full_lr: expected a positive number, got {v:?}")))?
                }
                "iterations" => {
                    out.iterations = v
                        .parse()
                        .map_err(|_| CoreError::Config(format!("iterations: cannot parse {v:?}")))?
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(p.to_path_buf(), e))?;
                Self::default().apply(&parse_pairs(&text)?)
            }
        }
    }

    /// `--seed` sets the training seed and the backbone init seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.pretrain.train.seed = s;
            self.backbone.seed = s;
        }
        self
    }

    /// Every effective setting, sorted by key.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut v = self.backbone.to_pairs();
        v.extend(self.pretrain.to_pairs());
        v.extend(self.suite.to_pairs());
        v.extend(self.train.to_pairs());
        v.push(("full_lr".into(), self.full_lr.to_string()));
        v.push(("on_miss".into(), self.on_miss.as_str().into()));
        v.push(("loader".into(), self.loader.clone()));
        v.push(("iterations".into(), self.iterations.to_string()));
        v.sort();
        v
    }

    /// Training config for `mode`: `train` with the mode set, and `full_lr`
    /// for the full fine-tuning regimes.
    pub fn train_for(&self, mode: &str) -> TrainConfig {
        let mut c = self.train.clone();
        c.mode = mode.into();
        if mode != "lora_expert" {
            c.lr = self.full_lr;
        }
        c
    }

    pub fn canonical_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_reparses_to_the_same_settings() {
        let s = Settings::default();
        let back = Settings::default().apply(&parse_pairs(&s.canonical_text()).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn overrides_and_rejections() {
        let pairs = parse_pairs("# c\nsteps = 7\n\nsuite_seed=3\non_miss=reject\n").unwrap();
        let s = Settings::default().apply(&pairs).unwrap();
        assert_eq!(s.train.budget, hotlora_core::trainer::Budget::Steps(7));
        assert_eq!(s.suite.seed, 3);
        assert_eq!(s.on_miss, MissPolicy::Reject);
        assert_ne!(s.hash(), Settings::default().hash());
        assert!(Settings::default().apply(&parse_pairs("stepz=1").unwrap()).is_err());
        assert!(parse_pairs("no equals sign").is_err());
        assert!(Settings::default().apply(&parse_pairs("lr=-1").unwrap()).is_err());
        assert!(Settings::default().apply(&parse_pairs("full_lr=0").unwrap()).is_err());
    }

    #[test]
    fn regimes_get_their_own_learning_rate() {
        let s = Settings::default();
        assert_eq!(s.train_for("lora_expert"), TrainConfig::desk());
        assert_eq!(s.train_for("full_joint"), TrainConfig::desk_for("full_joint"));
    }

    #[test]
    fn seed_flag_reaches_every_seeded_stage() {
        let s = Settings::default().with_seed(Some(42));
        assert_eq!((s.train.seed, s.pretrain.train.seed, s.backbone.seed), (42, 42, 42));
    }
}
