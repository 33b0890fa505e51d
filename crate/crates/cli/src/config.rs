//! Run configuration files and dotted command-line overrides.

use std::path::{Path, PathBuf};

use f2t2hit::data::DataConfig;
use f2t2hit::training::TrainConfig;
use f2t2hit::{Error, ModelConfig, Result, Variant};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "F2T2HIT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_variant() -> Variant {
    Variant::Full
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Parses `--a.b value` / `--a.b=value` pairs. Values that parse as JSON
/// are taken as JSON, anything else as a string.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(Error::Argument(format!("expected `--key value`, got `{arg}`")));
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Argument(format!("override `--{key}` has no value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Argument(format!("malformed override key `{key}`")));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key, value));
    }
    Ok(out)
}

/// Sets `path` (dot separated) in `doc`, creating objects on the way.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::Argument(format!(
                "cannot set `{path}`: `{}` is not an object",
                parts[..i].join(".")
            )));
        }
        let map = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

/// File, then `F2T2HIT_SEED`, then command-line overrides.
pub fn load_run_config(path: Option<&Path>, overrides: &[(String, Value)], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Argument(format!("{}: invalid JSON: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        set_path(&mut doc, "train.seed", Value::from(seed))?;
    }
    for (k, v) in overrides {
        set_path(&mut doc, k, v.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
