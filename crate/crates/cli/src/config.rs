//! Run configuration: a JSON file merged with `--set key=value` overrides,
//! schema-validated, hashed, and stamped into every artifact directory.

use anyhow::{anyhow, Context, Result};
use phymotion::model::ModelConfig;
use phymotion::rng::content_hash;
use phymotion::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("dataset"),
            out_dir: PathBuf::from("run"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| anyhow!("model config: {e}"))?;
        self.train.validate().map_err(|e| anyhow!("train config: {e}"))?;
        Ok(())
    }
}

/// Parse an override value: JSON literal first, bare string otherwise.
fn parse_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// Apply one `dotted.path=value` override to a JSON tree.
fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let parts: Vec<&str> = path.split('.').collect();
    let (last, parents) = parts.split_last().expect("split produces at least one part");
    let mut node = &mut *tree;
    for part in parents {
        node = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override path {path:?}: {part:?} is not an object"))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| anyhow!("override path {path:?} does not end in an object"))?
        .insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Load a config file, apply overrides, and re-validate strictly. Unknown
/// keys are rejected with the offending key in the message.
pub fn load_with_overrides<T: serde::de::DeserializeOwned + Serialize + Default>(
    path: Option<&Path>,
    sets: &[String],
) -> Result<T> {
    let mut tree: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config file {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("config file {} is not valid JSON", p.display()))?
        }
        None => serde_json::to_value(T::default())?,
    };
    for spec in sets {
        apply_override(&mut tree, spec)?;
    }
    let config: T = serde_json::from_value(tree).map_err(|e| anyhow!("config schema: {e}"))?;
    Ok(config)
}

/// Hash of the canonical serialized form of a config.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(content_hash(serde_json::to_string(config)?.as_bytes()))
}

/// Reproducibility stamp written next to every artifact.
#[derive(Debug, Serialize)]
pub struct RunStampFile<'a, T: Serialize> {
    pub library_version: &'a str,
    pub seed: u64,
    pub config_hash: String,
    pub effective_config: &'a T,
}

pub fn write_stamp<T: Serialize>(dir: &Path, seed: u64, config: &T) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    let hash = config_hash(config)?;
    let stamp = RunStampFile {
        library_version: env!("CARGO_PKG_VERSION"),
        seed,
        config_hash: hash.clone(),
        effective_config: config,
    };
    let mut json = serde_json::to_string_pretty(&stamp)?;
    json.push('\n');
    std::fs::write(dir.join("run.json"), json)?;
    Ok(hash)
}
