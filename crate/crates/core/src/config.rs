//! Experiment configuration: one TOML document with `mdp`, `sim`, `train`
//! and `eval` sections, plus dotted-key overrides such as `mdp.eta=0.1`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::mdp::MdpConfig;
use crate::simulator::SimConfig;
use crate::training::TrainConfig;

/// First 16 hex chars of the SHA-256 of the value's JSON serialization.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Requests rolled out per evaluation seed.
    pub num_requests: usize,
    /// Requests in each logged training dataset.
    pub dataset_requests: usize,
    /// Requests used for early-stopping validation.
    pub validation_requests: usize,
    pub seeds: Vec<u64>,
    /// Ad-exposure level for `eta` tuning; unset disables tuning.
    pub target_exposure: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_requests: 2000,
            dataset_requests: 20_000,
            validation_requests: 500,
            seeds: vec![1, 2, 3, 4, 5],
            target_exposure: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mdp: MdpConfig,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }

    pub fn validate(&self) -> Result<()> {
        self.mdp.validate()?;
        self.sim.validate(&self.mdp)?;
        self.train.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if let Some(t) = self.eval.target_exposure {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!(
                    "eval.target_exposure must be in [0,1], got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Hash of every setting; names run directories and stamps checkpoints.
    pub fn hash(&self) -> String {
        content_hash(self)
    }

    /// Sets one dotted key, e.g. `("train.alpha1", "0.02")`. The value is
    /// parsed as a TOML value, falling back to a bare string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = parse_value(value);
        let parts: Vec<&str> = key.split('.').collect();
        if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "override key {key:?} must look like section.field"
            )));
        }
        let section = root
            .get_mut(parts[0])
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown config section {:?}", parts[0])))?;
        section.insert(parts[1].to_string(), parsed);
        let updated: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override {key}={value}: {e}")))?;
        *self = updated;
        Ok(())
    }

    /// Applies `key=value` pairs in order, then validates.
    pub fn apply_overrides<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<()> {
        for (k, v) in pairs {
            self.apply_override(k, v)?;
        }
        self.validate()
    }
}

fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[mdp]\nslots = 10\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[nope]\nx = 1\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("train.alpha9", "0.1").is_err());
        assert!(cfg.apply_override("alpha1", "0.1").is_err());
    }

    #[test]
    fn overrides_set_typed_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides([
            ("mdp.eta", "0.1"),
            ("train.max_steps", "12"),
            ("eval.seeds", "[3, 4]"),
        ])
        .unwrap();
        assert_eq!(cfg.mdp.eta, 0.1);
        assert_eq!(cfg.train.max_steps, Some(12));
        assert_eq!(cfg.eval.seeds, vec![3, 4]);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides([("mdp.slots", "0")]).is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides([("mdp.eta", "\"high\"")]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.alpha1 = 0.02;
        assert_ne!(a.hash(), b.hash());
    }
}
