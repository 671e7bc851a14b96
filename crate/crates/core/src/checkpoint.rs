//! Versioned JSON checkpoints shared by every trainable model.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Deserialize)]
struct Header {
    version: u32,
    kind: String,
}

#[derive(Serialize)]
struct Out<'a, T> {
    version: u32,
    kind: &'a str,
    config: &'a RunConfig,
    model: &'a T,
}

#[derive(Deserialize)]
struct In<T> {
    config: RunConfig,
    model: T,
}

pub fn to_json<T: Serialize>(kind: &str, config: &RunConfig, model: &T) -> Result<String> {
    Ok(serde_json::to_string(&Out {
        version: CHECKPOINT_VERSION,
        kind,
        config,
        model,
    })?)
}

/// Parses a checkpoint of the expected kind, returning the model and the
/// configuration it was written with.
pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<(T, RunConfig)> {
    let header: Header = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a `{kind}` checkpoint, found `{}`",
            header.kind
        )));
    }
    let body: In<T> = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("malformed `{kind}` checkpoint: {e}")))?;
    Ok((body.model, body.config))
}

pub fn save<T: Serialize>(
    path: impl AsRef<Path>,
    kind: &str,
    config: &RunConfig,
    model: &T,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_json(kind, config, model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<(T, RunConfig)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(kind, &text).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = vec![0.1f64, -1.0 / 3.0, 1e-300, 123456.789e10];
        let cfg = RunConfig::default();
        let (back, c): (Vec<f64>, RunConfig) =
            from_json("v", &to_json("v", &cfg, &model).unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(c, cfg);
    }

    #[test]
    fn version_and_kind_mismatches_are_distinct() {
        let text = to_json("clip", &RunConfig::default(), &1.0f64).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(
            from_json::<f64>("clip", &bumped),
            Err(Error::Version {
                found: 7,
                expected: 1
            })
        ));
        assert!(matches!(
            from_json::<f64>("detector", &text),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            from_json::<f64>("clip", "{}"),
            Err(Error::Checkpoint(_))
        ));
    }
}
