//! `key = value` run configuration merged with `--set` overrides.

use std::collections::BTreeMap;

use rdt_core::data::{GenreVocabulary, SplitSizes, DEFAULT_GENRES};
use rdt_core::ensemble::SelectionMetric;
use rdt_core::model::{Architecture, ModelConfig};
use rdt_core::patch::PatchConfig;
use rdt_core::refine::RefineConfig;
use rdt_core::train::{AdamConfig, AslConfig, TrainConfig};

/// Every accepted key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("genres", ""),
    ("arch", "RDT"),
    ("image_side", "64"),
    ("patch_side", "16"),
    ("channels", "3"),
    ("embed_dim", "32"),
    ("extractor_channels", "8,32"),
    ("extractor_activation", "gelu"),
    ("layers", "2"),
    ("heads", "4"),
    ("ln_eps", "1e-6"),
    ("freeze_extractor", "false"),
    ("batch_size", "32"),
    ("max_epochs", "500"),
    ("patience", "10"),
    ("seed", "0"),
    ("target_loss", "none"),
    ("lr", "0.001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("gamma_pos", "0"),
    ("gamma_neg", "1"),
    ("margin", "0.2"),
    ("tau", "0.3"),
    ("tau_prime", "0.03"),
    ("grid_step", "0.05"),
    ("metric", "BA"),
    ("split_ratio", "8,1,1"),
    ("split_counts", "none"),
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("unknown config key '{key}'")]
    UnknownKey { key: String },
    #[error("config key '{key}': {msg}")]
    Value { key: String, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    /// Duplicate-key notices collected while parsing.
    pub warnings: Vec<String>,
}

fn known(key: &str) -> Result<&'static str, ConfigError> {
    KEYS.iter()
        .find(|(k, _)| *k == key)
        .map(|(k, _)| *k)
        .ok_or_else(|| ConfigError::UnknownKey { key: key.to_string() })
}

fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values: BTreeMap<&'static str, String> = KEYS.iter().map(|(k, v)| (*k, v.to_string())).collect();
        values.insert("genres", DEFAULT_GENRES.join(","));
        RunConfig { values, warnings: Vec::new() }
    }
}

impl RunConfig {
    /// Defaults overlaid with the file text. Later duplicates win with a warning.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeMap<&'static str, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = split_pair(body)
                .ok_or_else(|| ConfigError::Malformed { line, msg: format!("expected key = value, got '{body}'") })?;
            let key = known(k)?;
            if let Some(prev) = seen.insert(key, line) {
                cfg.warnings.push(format!("line {line}: duplicate key '{key}' replaces line {prev}"));
            }
            cfg.values.insert(key, v.to_string());
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = split_pair(pair).ok_or_else(|| ConfigError::Value {
            key: pair.to_string(),
            msg: "override must look like key=value".into(),
        })?;
        let key = known(k)?;
        self.values.insert(key, v.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    fn err(key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::Value { key: key.to_string(), msg: msg.into() }
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let v = self.get(key);
        v.parse().map_err(|_| Self::err(key, format!("cannot parse '{v}'")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.parse_as(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.parse_as(key)?;
        if !v.is_finite() {
            return Err(Self::err(key, "must be finite"));
        }
        Ok(v)
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.get(key) {
            "none" | "" => Ok(None),
            _ => self.f64(key).map(Some),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Self::err(key, format!("bad list item '{}'", s.trim()))))
            .collect()
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.parse_as("seed")
    }

    pub fn vocabulary(&self) -> Result<GenreVocabulary, ConfigError> {
        let names: Vec<&str> = self.get("genres").split(',').map(str::trim).collect();
        GenreVocabulary::new(&names).map_err(|e| Self::err("genres", e.to_string()))
    }

    pub fn model_config(&self, num_genres: usize) -> Result<ModelConfig, ConfigError> {
        let arch: Architecture = self.get("arch").parse().map_err(|e: rdt_core::Error| Self::err("arch", e.to_string()))?;
        let activation = self
            .get("extractor_activation")
            .parse()
            .map_err(|e: rdt_core::Error| Self::err("extractor_activation", e.to_string()))?;
        let cfg = ModelConfig {
            arch,
            patch: PatchConfig {
                image_side: self.usize("image_side")?,
                patch_side: self.usize("patch_side")?,
                channels: self.usize("channels")?,
                embed_dim: self.usize("embed_dim")?,
                extractor_channels: self.list("extractor_channels")?,
                extractor_activation: activation,
            },
            layers: self.usize("layers")?,
            heads: self.usize("heads")?,
            num_genres,
            ln_eps: self.f64("ln_eps")?,
            freeze_extractor: self.parse_as("freeze_extractor")?,
        };
        cfg.validate().map_err(|e| Self::err("model", e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            batch_size: self.usize("batch_size")?,
            patience: self.usize("patience")?,
            max_epochs: self.usize("max_epochs")?,
            seed: self.seed()?,
            target_loss: self.opt_f64("target_loss")?,
            asl: AslConfig {
                gamma_pos: self.f64("gamma_pos")?,
                gamma_neg: self.f64("gamma_neg")?,
                margin: self.f64("margin")?,
            },
            adam: AdamConfig {
                lr: self.f64("lr")?,
                beta1: self.f64("beta1")?,
                beta2: self.f64("beta2")?,
                eps: self.f64("adam_eps")?,
            },
        };
        cfg.validate().map_err(|e| Self::err("training", e.to_string()))?;
        Ok(cfg)
    }

    pub fn refine_config(&self) -> Result<RefineConfig, ConfigError> {
        let cfg = RefineConfig { tau: self.f64("tau")?, tau_prime: self.f64("tau_prime")? };
        cfg.validate().map_err(|e| Self::err("tau", e.to_string()))?;
        Ok(cfg)
    }

    pub fn metric(&self) -> Result<SelectionMetric, ConfigError> {
        self.get("metric").parse().map_err(|e: rdt_core::Error| Self::err("metric", e.to_string()))
    }

    pub fn split_sizes(&self) -> Result<SplitSizes, ConfigError> {
        if self.get("split_counts") != "none" {
            let c: Vec<usize> = self.list("split_counts")?;
            let [a, b, d] = c[..] else { return Err(Self::err("split_counts", "need 3 values")) };
            return Ok(SplitSizes::Counts([a, b, d]));
        }
        let r: Vec<u32> = self.list("split_ratio")?;
        let [a, b, d] = r[..] else { return Err(Self::err("split_ratio", "need 3 values")) };
        Ok(SplitSizes::Ratio([a, b, d]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_plus_overrides() {
        let mut c = RunConfig::parse("").unwrap();
        for kv in ["layers=3", "embed_dim=48", "heads=4", "tau=0.25", "genres=A,B,C,D"] {
            c.set(kv).unwrap();
        }
        let m = c.model_config(4).unwrap();
        assert_eq!((m.layers, m.patch.embed_dim, m.heads), (3, 48, 4));
        assert_eq!(c.refine_config().unwrap().tau, 0.25);
        assert_eq!(c.vocabulary().unwrap().len(), 4);
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn duplicates_warn_and_last_wins() {
        let c = RunConfig::parse("# header\nlayers = 3\n\nlayers = 5  # trailing\n").unwrap();
        assert_eq!(c.get("layers"), "5");
        assert_eq!(c.warnings, vec!["line 4: duplicate key 'layers' replaces line 2".to_string()]);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(RunConfig::parse("depth = 3").unwrap_err(), ConfigError::UnknownKey { key: "depth".into() });
        assert_eq!(
            RunConfig::parse("layers = 2\njust words\n").unwrap_err(),
            ConfigError::Malformed { line: 2, msg: "expected key = value, got 'just words'".into() }
        );
        assert!(RunConfig::parse("= 4").is_err());
        let mut c = RunConfig::default();
        assert!(c.set("nokey").is_err());
        assert!(c.set("bogus=1").is_err());
        c.set("layers=x").unwrap();
        assert!(c.model_config(13).is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let mut c = RunConfig::parse("tau = 0.4\nseed = 3").unwrap();
        c.set("tau=0.1").unwrap();
        assert_eq!(c.refine_config().unwrap().tau, 0.1);
        assert_eq!(c.seed().unwrap(), 3);
    }

    #[test]
    fn split_and_optional_values() {
        let mut c = RunConfig::default();
        assert_eq!(c.split_sizes().unwrap(), SplitSizes::Ratio([8, 1, 1]));
        c.set("split_counts=10942,1470,1470").unwrap();
        assert_eq!(c.split_sizes().unwrap(), SplitSizes::Counts([10942, 1470, 1470]));
        c.set("target_loss=0.01").unwrap();
        assert_eq!(c.train_config().unwrap().target_loss, Some(0.01));
        c.set("metric=hl").unwrap();
        assert_eq!(c.metric().unwrap(), SelectionMetric::HammingLoss);
    }

    #[test]
    fn shipped_configs_parse() {
        let full = RunConfig::parse(include_str!("../../../configs/full.cfg")).unwrap();
        let m = full.model_config(13).unwrap();
        assert_eq!((m.layers, m.patch.embed_dim, m.heads), (4, 256, 6));
        assert_eq!((m.patch.image_side, m.patch.patch_side), (1024, 256));
        assert_eq!(full.refine_config().unwrap(), RefineConfig { tau: 0.3, tau_prime: 0.03 });
        assert_eq!(full.train_config().unwrap().batch_size, 32);
        assert!(full.warnings.is_empty());
        for text in [include_str!("../../../configs/desk.cfg"), include_str!("../../../configs/toy.cfg")] {
            let c = RunConfig::parse(text).unwrap();
            let d = c.vocabulary().unwrap().len();
            c.model_config(d).unwrap();
            c.train_config().unwrap();
        }
    }
}
