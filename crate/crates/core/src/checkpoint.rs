//! Single-file checkpoints: parameters and Adam moments as `f64` tensors in
//! a safetensors archive, run metadata as one JSON record in its header.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockParams;
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, Variant};
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainConfig, TrainState};

pub const SCHEMA_VERSION: u32 = 1;
const METADATA_KEY: &str = "f2t2hit";
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub variant: Variant,
    pub seed: u64,
    pub iteration: u64,
    pub train: Option<TrainConfig>,
    pub optimizer_step: Option<u64>,
    pub rng: Option<ChaCha8Rng>,
    pub loss_ema: Option<f64>,
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_archive(tensors: Vec<(String, &Tensor)>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .into_iter()
        .map(|(k, t)| (k, to_bytes(t), t.shape().to_vec()))
        .collect();
    let views = bytes
        .iter()
        .map(|(k, b, s)| {
            TensorView::new(Dtype::F64, s.clone(), b)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(meta)?)]);
    let buffer = safetensors::serialize(views, &Some(header)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, buffer).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes model, optimizer moments, iteration and RNG state atomically.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let model = &state.model;
    let mut tensors: Vec<(String, &Tensor)> = model.params().iter().map(|(k, t)| (k.clone(), t)).collect();
    tensors.extend(state.optimizer.m.iter().map(|(k, t)| (format!("{MOMENT_M}{k}"), t)));
    tensors.extend(state.optimizer.v.iter().map(|(k, t)| (format!("{MOMENT_V}{k}"), t)));
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        config: model.config().clone(),
        variant: model.variant(),
        seed: model.seed(),
        iteration: state.iteration,
        train: Some(state.config.clone()),
        optimizer_step: Some(state.optimizer.step),
        rng: Some(state.rng.clone()),
        loss_ema: state.loss_ema,
    };
    write_archive(tensors, &meta, path)
}

/// Writes only the model; loads back as a model but not as a training state.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        config: model.config().clone(),
        variant: model.variant(),
        seed: model.seed(),
        iteration: 0,
        train: None,
        optimizer_step: None,
        rng: None,
        loss_ema: None,
    };
    write_archive(model.params().iter().map(|(k, t)| (k.clone(), t)).collect(), &meta, path)
}

struct Archive {
    meta: CheckpointMeta,
    params: BlockParams,
    m: BlockParams,
    v: BlockParams,
}

fn read_archive(path: &Path) -> Result<Archive> {
    let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buffer).map_err(|e| bad(e.to_string()))?;
    let fields = header.metadata().clone().unwrap_or_default();
    if let Some(extra) = fields.keys().find(|k| *k != METADATA_KEY) {
        return Err(bad(format!("unexpected metadata key `{extra}`")));
    }
    let raw = fields
        .get(METADATA_KEY)
        .ok_or_else(|| bad(format!("metadata record `{METADATA_KEY}` missing")))?;
    let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| bad(format!("metadata: {e}")))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err(bad(format!("schema version {v}, this build reads {SCHEMA_VERSION}"))),
        None => return Err(bad("metadata lacks schema_version".into())),
    }
    let meta: CheckpointMeta = serde_json::from_value(value).map_err(|e| bad(format!("metadata: {e}")))?;

    let archive = SafeTensors::deserialize(&buffer).map_err(|e| bad(e.to_string()))?;
    let (mut params, mut m, mut v) = (BlockParams::new(), BlockParams::new(), BlockParams::new());
    for (name, view) in archive.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(bad(format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(view.shape(), data)?;
        if let Some(k) = name.strip_prefix(MOMENT_M) {
            m.insert(k, t);
        } else if let Some(k) = name.strip_prefix(MOMENT_V) {
            v.insert(k, t);
        } else {
            params.insert(name, t);
        }
    }
    Ok(Archive { meta, params, m, v })
}

/// Loads the model stored at `path`, checking every key and shape against
/// the stored configuration.
pub fn load_model(path: &Path) -> Result<Model> {
    let a = read_archive(path)?;
    Model::from_parts(a.meta.config, a.meta.variant, a.meta.seed, a.params)
}

/// Loads the parameters at `path` into the architecture given by `config`;
/// fails naming the first key that does not fit.
pub fn load_model_as(path: &Path, config: &ModelConfig, variant: Variant) -> Result<Model> {
    let a = read_archive(path)?;
    Model::from_parts(config.clone(), variant, a.meta.seed, a.params)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(read_archive(path)?.meta)
}

/// Restores a full training state written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let a = read_archive(path)?;
    let missing = |what: &str| Error::Checkpoint(format!("{}: no {what} stored", path.display()));
    let config = a.meta.train.clone().ok_or_else(|| missing("training configuration"))?;
    let step = a.meta.optimizer_step.ok_or_else(|| missing("optimizer state"))?;
    let rng = a.meta.rng.clone().ok_or_else(|| missing("RNG state"))?;
    let model = Model::from_parts(a.meta.config, a.meta.variant, a.meta.seed, a.params)?;
    for (label, moments) in [("first", &a.m), ("second", &a.v)] {
        if moments.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} {label}-moment tensors for {} parameters",
                path.display(),
                moments.len(),
                model.params().len()
            )));
        }
        for (k, t) in model.params().iter() {
            let got = moments
                .get(k)
                .map_err(|_| Error::Checkpoint(format!("missing {label} moment for `{k}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{label} moment for `{k}` has the wrong shape")));
            }
        }
    }
    Ok(TrainState {
        config,
        model,
        optimizer: AdamState { step, m: a.m, v: a.v },
        iteration: a.meta.iteration,
        rng,
        loss_ema: a.meta.loss_ema,
    })
}
