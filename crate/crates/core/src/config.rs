//! Run configuration: one TOML document with `env`, `channel`, `ppo`,
//! `diffusion` and `trainer` tables. Missing keys take their defaults;
//! unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::diffusion::DiffusionConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::ppo::PpoConfig;
use crate::trainer::TrainerConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "RANK_POLICY_OUTPUT";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub channel: ChannelParams,
    pub ppo: PpoConfig,
    pub diffusion: DiffusionConfig,
    pub trainer: TrainerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.channel.validate()?;
        self.ppo.validate()?;
        self.diffusion.validate()?;
        self.trainer.validate()?;
        if self.diffusion.inference_steps > self.diffusion.train_steps {
            return Err(Error::config("diffusion.inference_steps", "must not exceed diffusion.train_steps"));
        }
        Ok(())
    }

    /// Sets a dotted key (`env.lambda`, `diffusion.schedule`, …) from a
    /// string. The value is read as a TOML literal when it parses as one and
    /// as a bare string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::config(key, e.to_string()))?;
        let parsed = parse_literal(value);
        let mut cur = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::config(key, format!("`{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            cur = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let updated: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(key, e.to_string()))?;
        *self = updated;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

fn parse_literal(value: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {value}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(value.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["env.lambda=0.01", "diffusion.schedule=cosine", "trainer.seed = 7"])
            .unwrap();
        assert_eq!(c.env.lambda, 0.01);
        assert_eq!(c.diffusion.schedule, ScheduleKind::Cosine);
        assert_eq!(c.trainer.seed, 7);
        assert!(c.set("env.no_such_field", "1").is_err());
        assert!(c.set("env.lambda", "\"high\"").is_err());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_toml("[env]\nlayerz = 3\n").unwrap_err();
        assert!(err.to_string().contains("layerz"));
    }

    #[test]
    fn field_level_validation() {
        let c = RunConfig::from_toml("[ppo]\ngamma = 1.5\n").unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("ppo.gamma"), "{err}");
    }
}
