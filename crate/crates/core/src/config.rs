//! Run configuration: every module config in one TOML tree, with dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::ClipConfig;
use crate::data::GenConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::BenchConfig;
use crate::pipeline::EnsembleConfig;
use crate::train::{PretrainConfig, TrainConfig};

/// Inference-time output controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    /// Detections scoring below this are dropped.
    pub score_floor: f64,
    /// Detections kept per image.
    pub top_n: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_floor: 0.0,
            top_n: 300,
        }
    }
}

/// Artifact locations. Relative paths resolve against the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub clip_checkpoint: PathBuf,
    pub detector_checkpoint: PathBuf,
    /// Per-epoch detector checkpoints go here when `checkpoint_every > 0`.
    pub checkpoint_dir: PathBuf,
    pub checkpoint_every: usize,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            clip_checkpoint: "clip.json".into(),
            detector_checkpoint: "detector.json".into(),
            checkpoint_dir: "checkpoints".into(),
            checkpoint_every: 0,
        }
    }
}

impl PathsConfig {
    pub fn resolve(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub clip: ClipConfig,
    pub ensemble: EnsembleConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parses TOML, applies `key=value` overrides, and validates.
    pub fn from_toml_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut tree: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o.as_ref())?;
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides::<&str>(text, &[])
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every module config and the widths they must share.
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.clip.validate()?;
        self.ensemble.validate()?;
        self.pretrain.schedule.validate()?;
        self.train.schedule.validate()?;
        self.train.weights.validate()?;
        if self.decoder.d != self.encoder.d {
            return Err(Error::Config(format!(
                "decoder.d = {} must equal encoder.d = {}",
                self.decoder.d, self.encoder.d
            )));
        }
        if self.decoder.clip_dim != self.clip.d {
            return Err(Error::Config(format!(
                "decoder.clip_dim = {} must equal clip.d = {}",
                self.decoder.clip_dim, self.clip.d
            )));
        }
        if self.gen.image_size % self.encoder.patch_size != 0 {
            return Err(Error::Config(format!(
                "gen.image_size {} is not a multiple of encoder.patch_size {}",
                self.gen.image_size, self.encoder.patch_size
            )));
        }
        if self.detect.top_n == 0 {
            return Err(Error::Config("detect.top_n must be positive".into()));
        }
        Ok(())
    }
}

/// Sets a dotted key. The value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
