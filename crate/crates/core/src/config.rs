//! Flat `key = value` text used for run configs, checkpoint headers and
//! sample sidecars.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are skipped.
//! Keys are unique. Rendering sorts keys, so equal maps render to equal bytes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::diffusion::{linear_schedule, DiffusionError, NoiseSchedule};
use crate::model::ModelConfig;
use crate::position::Range;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot use {value:?}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
}

/// Parsed key/value pairs in sorted order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, reason: "expected key = value".into() });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-') {
                return Err(ConfigError::Syntax { line: i + 1, reason: format!("bad key {k:?}") });
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: k.to_string() });
            }
        }
        Ok(Self(map))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copies every entry of `other` over this map.
    pub fn overlay(&mut self, other: &KvMap) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    /// Takes and parses a required key.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        let v = self.0.remove(key).ok_or_else(|| ConfigError::Missing(key.to_string()))?;
        parse_value(key, &v)
    }

    /// Takes and parses an optional key.
    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        match self.0.remove(key) {
            Some(v) => parse_value(key, &v),
            None => Ok(default),
        }
    }

    pub fn take_with<T>(&mut self, key: &str, default: T, f: impl FnOnce(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        match self.0.remove(key) {
            Some(v) => f(&v).map_err(|reason| ConfigError::InvalidValue { key: key.into(), value: v, reason }),
            None => Ok(default),
        }
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.0.into_keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| ConfigError::InvalidValue { key: key.into(), value: v.into(), reason: e.to_string() })
}

pub fn format_range(r: Range) -> String {
    format!("{},{}", r.lo, r.hi)
}

pub fn parse_range(s: &str) -> Result<Range, String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(Range::new(lo, hi))
}

/// Comma separated list of reals.
pub fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

pub fn format_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Noise schedule endpoints; the kind is always linear for now.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Endpoints of the usual 1000-step schedule stretched to `steps` so the
    /// final noise level stays comparable.
    pub fn scaled_for(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        Self { beta_start: (1e-4 * k).min(0.5), beta_end: (0.02 * k).min(0.999) }
    }

    pub fn build(&self, steps: usize) -> Result<NoiseSchedule, DiffusionError> {
        linear_schedule(steps, self.beta_start, self.beta_end)
    }
}

pub fn write_model(cfg: &ModelConfig, kv: &mut KvMap) {
    kv.set("model.resolution_px", cfg.image_side);
    kv.set("model.patch_px", cfg.patch_side);
    kv.set("model.channels", cfg.channels);
    kv.set("model.hidden", cfg.hidden);
    kv.set("model.heads", cfg.heads);
    kv.set("model.ffn_hidden", cfg.ffn_hidden);
    kv.set("model.enc_blocks", cfg.enc_blocks);
    kv.set("model.dec_blocks", cfg.dec_blocks);
    kv.set("model.conv_kernel_px", cfg.conv_kernel);
    kv.set("model.pe_variant", cfg.pe_variant);
    kv.set("model.pe_hidden", cfg.pe_hidden);
    kv.set("model.anchor_pe", cfg.anchor_pe);
    kv.set("model.prediction", cfg.prediction);
    kv.set("diffusion.timesteps", cfg.timesteps);
}

pub fn read_model(kv: &mut KvMap) -> Result<ModelConfig, ConfigError> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        image_side: kv.take_or("model.resolution_px", d.image_side)?,
        patch_side: kv.take_or("model.patch_px", d.patch_side)?,
        channels: kv.take_or("model.channels", d.channels)?,
        hidden: kv.take_or("model.hidden", d.hidden)?,
        heads: kv.take_or("model.heads", d.heads)?,
        ffn_hidden: kv.take_or("model.ffn_hidden", d.ffn_hidden)?,
        enc_blocks: kv.take_or("model.enc_blocks", d.enc_blocks)?,
        dec_blocks: kv.take_or("model.dec_blocks", d.dec_blocks)?,
        conv_kernel: kv.take_or("model.conv_kernel_px", d.conv_kernel)?,
        pe_variant: kv.take_or("model.pe_variant", d.pe_variant)?,
        pe_hidden: kv.take_or("model.pe_hidden", d.pe_hidden)?,
        anchor_pe: kv.take_or("model.anchor_pe", d.anchor_pe)?,
        prediction: kv.take_or("model.prediction", d.prediction)?,
        timesteps: kv.take_or("diffusion.timesteps", d.timesteps)?,
    })
}

pub fn write_schedule(s: &ScheduleConfig, kv: &mut KvMap) {
    kv.set("diffusion.schedule", "linear");
    kv.set("diffusion.beta_start", s.beta_start);
    kv.set("diffusion.beta_end", s.beta_end);
}

pub fn read_schedule(kv: &mut KvMap, steps: usize) -> Result<ScheduleConfig, ConfigError> {
    let kind: String = kv.take_or("diffusion.schedule", "linear".to_string())?;
    if kind != "linear" {
        return Err(ConfigError::InvalidValue { key: "diffusion.schedule".into(), value: kind, reason: "only linear is supported".into() });
    }
    let d = ScheduleConfig::scaled_for(steps.max(1));
    Ok(ScheduleConfig { beta_start: kv.take_or("diffusion.beta_start", d.beta_start)?, beta_end: kv.take_or("diffusion.beta_end", d.beta_end)? })
}
