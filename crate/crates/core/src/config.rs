//! Run configuration: one TOML document with every tunable, addressable by
//! dotted key (`train.lr`, `model.backbone.channels`, ...).
//!
//! Sources are layered as defaults < file < environment < explicit
//! overrides. The environment name of a key is `CTXSEG_` followed by the
//! key upper-cased with each `.` replaced by `__`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data::{AugmentConfig, PhantomSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "CTXSEG_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Cases written by `gen`.
    pub cases: usize,
    /// Trailing cases of the manifest held out for validation.
    pub validation: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            cases: 32,
            validation: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub iterations: Vec<usize>,
    /// Training epochs per setting; 0 uses `train.epochs`.
    pub epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            iterations: vec![1, 3, 5, 7, 10],
            epochs: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub phantom: PhantomSpec,
    pub dataset: DatasetConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.phantom.validate()?;
        if self.sweep.iterations.is_empty() || self.sweep.iterations.contains(&0) {
            return Err(Error::Config("sweep.iterations must be a non-empty list of positive counts".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in 63 bits".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every leaf key with its current value rendered as TOML.
    pub fn keys(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &self.as_value(), &mut out);
        out
    }

    fn as_value(&self) -> Value {
        Value::try_from(self).expect("config serializes")
    }

    /// Sets one dotted key from its textual form. Unknown keys and values
    /// of the wrong type are configuration errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = self.as_value();
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown configuration key {key}")))?;
        }
        if node.is_table() {
            return Err(Error::Config(format!("{key} is a section, not a value")));
        }
        *node = parse_like(node, raw).ok_or_else(|| Error::Config(format!("{key}: cannot parse {raw:?}")))?;
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    /// Applies `CTXSEG_*` variables that name a known key.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let keys: Vec<String> = self.keys().into_iter().map(|(k, _)| k).collect();
        let mut pending: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(name, v)| {
                name.strip_prefix(ENV_PREFIX)?;
                keys.iter().find(|k| env_name(k) == name).map(|k| (k.clone(), v))
            })
            .collect();
        pending.sort();
        for (k, v) in pending {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then the environment, then `overrides`; the
    /// result is validated.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text, p)?
            }
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "__"))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Parses `raw` as TOML, coercing integers where the current value is a
/// float and falling back to a bare string where it is a string.
fn parse_like(current: &Value, raw: &str) -> Option<Value> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v"));
    if let Value::String(_) = current {
        // Bare words and TOML-quoted strings are both accepted.
        return Some(match parsed {
            Some(Value::String(s)) => Value::String(s),
            _ => Value::String(raw.to_string()),
        });
    }
    let parsed = parsed?;
    coerce(current, parsed)
}

fn coerce(current: &Value, v: Value) -> Option<Value> {
    match (current, v) {
        (Value::Float(_), Value::Integer(i)) => Some(Value::Float(i as f64)),
        (Value::Array(cur), Value::Array(items)) => {
            let proto = cur.first();
            items
                .into_iter()
                .map(|it| match proto {
                    Some(p) => coerce(p, it),
                    None => Some(it),
                })
                .collect::<Option<Vec<_>>>()
                .map(Value::Array)
        }
        (c, v) if std::mem::discriminant(c) == std::mem::discriminant(&v) => Some(v),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml(), Path::new("x")).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml("[train]\nlr = 0.1\nbogus = 1\n", Path::new("f.toml"));
        assert!(matches!(e, Err(Error::Config(_))));
        let mut c = RunConfig::default();
        assert!(c.set("train.bogus", "1").is_err());
        assert!(c.set("train", "1").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[model.crf]\niterations = 3\n", Path::new("f")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.crf.iterations, 3);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn set_coerces_types() {
        let mut c = RunConfig::default();
        c.set("train.lr", "1").unwrap();
        assert_eq!(c.train.lr, 1.0);
        c.set("model.backbone.channels", "[2, 4]").unwrap();
        assert_eq!(c.model.backbone.channels, vec![2, 4]);
        c.set("model.fusion", "concat").unwrap();
        c.set("model.fusion", "\"crf\"").unwrap();
        assert_eq!(c.model.fusion, crate::model::FusionKind::Crf);
        assert!(c.set("model.fusion", "nope").is_err());
        assert!(c.set("train.epochs", "ten").is_err());
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.toml");
        std::fs::write(&f, "seed = 1\n[train]\nepochs = 3\nlr = 0.5\n").unwrap();
        let env = vec![
            ("CTXSEG_TRAIN__EPOCHS".to_string(), "4".to_string()),
            ("CTXSEG_TRAIN__LR".to_string(), "0.25".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = RunConfig::load(Some(&f), env, &[("train.epochs".into(), "5".into())]).unwrap();
        assert_eq!((c.seed, c.train.epochs, c.train.lr), (1, 5, 0.25));
    }

    #[test]
    fn keys_are_unique_and_settable() {
        let c = RunConfig::default();
        let keys = c.keys();
        let mut names: Vec<&str> = keys.iter().map(|(k, _)| k.as_str()).collect();
        names.dedup();
        assert_eq!(names.len(), keys.len());
        for (k, v) in &keys {
            let mut d = RunConfig::default();
            d.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(d, c, "{k}");
        }
        assert_eq!(env_name("train.batch_size"), "CTXSEG_TRAIN__BATCH_SIZE");
    }
}
