//! Checkpoints: a JSON manifest beside raw little-endian payloads.
//!
//! ```text
//! step_N/manifest.json   config, step, seeds, tensor table
//! step_N/params.bin      parameters in `Model::params` order
//! step_N/optim.bin       Adam first moments, then second moments (optional)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{OptimizerState, TrainConfig};
use crate::tensor::{Precision, Scalar};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const OPTIM: &str = "optim.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: Precision,
    pub step: u64,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Seed of the batch order; with `step` it fixes every future batch.
    pub data_seed: u64,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run state, e.g. the last validation loss.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step_{step}"))
}

/// Writes into a temporary sibling then renames, so an interrupted save never
/// leaves a half-written checkpoint under the final name.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    step: u64,
    train: Option<&TrainConfig>,
    data_seed: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let params = model.params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, t) in &params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        t.data().iter().for_each(|&x| x.write_le(&mut payload));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: T::PRECISION,
        step,
        model: model.config.clone(),
        train: train.cloned(),
        data_seed,
        optimizer_step: optimizer.map(|o| o.step),
        tensors,
        extra,
    };

    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| FocalError::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| FocalError::io(&tmp, e))?;
    write(&tmp.join(PARAMS), &payload)?;
    if let Some(o) = optimizer {
        if o.m.len() != params.len() {
            return Err(FocalError::Usage(
                "optimizer state does not match the model".into(),
            ));
        }
        let mut buf = Vec::with_capacity(2 * payload.len());
        for vecs in [&o.m, &o.v] {
            vecs.iter().flatten().for_each(|&x| x.write_le(&mut buf));
        }
        write(&tmp.join(OPTIM), &buf)?;
    }
    write(
        &tmp.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| FocalError::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| FocalError::io(dir, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| FocalError::io(path, e))
}

fn read_values<T: Scalar>(bytes: &[u8], precision: Precision, path: &Path) -> Result<Vec<T>> {
    let w = precision.byte_width();
    if !bytes.len().is_multiple_of(w) {
        return Err(FocalError::Data(format!(
            "{}: truncated payload",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(w)
        .map(|c| match precision {
            Precision::F32 => T::of(f32::read_le(c) as f64),
            Precision::F64 => T::of(f64::read_le(c)),
        })
        .collect())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| FocalError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(FocalError::Data(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Loads into precision `T`; a checkpoint saved at the same precision
/// round-trips bit-exactly.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::<T>::new(&manifest.model)?;
    let ppath = dir.join(PARAMS);
    let bytes = std::fs::read(&ppath).map_err(|e| FocalError::io(&ppath, e))?;
    let values: Vec<T> = read_values(&bytes, manifest.precision, &ppath)?;

    let mut params = model.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(FocalError::Data(format!(
            "checkpoint holds {} tensors, model expects {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    let mut total = 0;
    for (p, e) in params.iter_mut().zip(&manifest.tensors) {
        if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
            return Err(FocalError::Data(format!(
                "tensor `{}` {:?} does not match checkpoint entry `{}` {:?}",
                p.name,
                p.tensor.shape(),
                e.name,
                e.shape
            )));
        }
        let n = p.tensor.numel();
        let src = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| FocalError::Data(format!("{}: truncated payload", ppath.display())))?;
        p.tensor.data_mut().copy_from_slice(src);
        total += n;
    }
    if total != values.len() {
        return Err(FocalError::Data(format!(
            "{}: trailing data",
            ppath.display()
        )));
    }

    let optimizer = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let opath = dir.join(OPTIM);
            let bytes = std::fs::read(&opath).map_err(|e| FocalError::io(&opath, e))?;
            let vals: Vec<T> = read_values(&bytes, manifest.precision, &opath)?;
            if vals.len() != 2 * total {
                return Err(FocalError::Data(format!(
                    "{}: wrong length",
                    opath.display()
                )));
            }
            let (mv, vv) = vals.split_at(total);
            let split = |flat: &[T]| {
                manifest
                    .tensors
                    .iter()
                    .zip(params.iter())
                    .map(|(e, p)| flat[e.offset..e.offset + p.tensor.numel()].to_vec())
                    .collect()
            };
            Some(OptimizerState {
                step,
                m: split(mv),
                v: split(vv),
            })
        }
    };
    drop(params);
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
    })
}

/// Highest `step_N` directory under `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(root).map_err(|e| FocalError::io(root, e))? {
        let entry = entry.map_err(|e| FocalError::io(root, e))?;
        let name = entry.file_name();
        let Some(n) = name
            .to_str()
            .and_then(|s| s.strip_prefix("step_"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}
