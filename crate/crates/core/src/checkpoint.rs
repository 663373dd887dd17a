//! Single-file checkpoints of model parameters, optimizer moments and step.
//!
//! Layout: magic (8 bytes), version (u32 LE), SHA-256 of the payload
//! (32 bytes), payload length (u64 LE), payload. The payload is a u64 LE
//! metadata length, the JSON metadata, then raw little-endian floats for
//! each parameter in store order: value, and when present the first and
//! second moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Moments;
use crate::tensor::{Float, Precision, Tensor};
use crate::trainer::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPDOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    moments: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    precision: Precision,
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    opt_t: u64,
    params: Vec<ParamMeta>,
}

fn write_tensor<T: Float>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn save_checkpoint<T: Float>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    let store = &trainer.model.store;
    let params = store
        .iter()
        .map(|(id, p)| ParamMeta {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            moments: trainer.opt.moments[id.index()].is_some(),
        })
        .collect();
    let meta = Meta {
        precision: T::PRECISION,
        model: trainer.model.cfg.clone(),
        train: trainer.cfg.clone(),
        step: trainer.step,
        opt_t: trainer.opt.t,
        params,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut payload = Vec::with_capacity(json.len() + 8 + store.num_scalars() * T::BYTES);
    payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&json);
    for (id, p) in store.iter() {
        write_tensor(&p.value, &mut payload);
        if let Some(m) = &trainer.opt.moments[id.index()] {
            write_tensor(&m.m, &mut payload);
            write_tensor(&m.v, &mut payload);
        }
    }
    let digest = Sha256::digest(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // write to a sibling file first so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&digest)?;
        f.write_all(&(payload.len() as u64).to_le_bytes())?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Name of the first field where two configs differ, with both values.
pub fn config_difference(stored: &ModelConfig, current: &ModelConfig) -> Option<(String, String, String)> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value) -> Option<(String, String, String)> {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                keys.into_iter().find_map(|k| {
                    let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    let null = serde_json::Value::Null;
                    walk(&name, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null))
                })
            }
            _ if a == b => None,
            _ => Some((prefix.to_string(), a.to_string(), b.to_string())),
        }
    }
    let a = serde_json::to_value(stored).ok()?;
    let b = serde_json::to_value(current).ok()?;
    walk("", &a, &b)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn tensor<T: Float>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let end = self.pos + n * T::BYTES;
        if end > self.buf.len() {
            return Err(Error::CheckpointIntegrity("parameter data shorter than its metadata".into()));
        }
        let data = self.buf[self.pos..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        self.pos = end;
        Tensor::from_vec(shape, data)
    }
}

/// Restores a trainer whose model config must equal `current`. Nothing is
/// returned unless the whole file verifies.
pub fn load_checkpoint<T: Float>(path: &Path, current: &ModelConfig) -> Result<Trainer<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::CheckpointIntegrity(format!("{} is too short to be a checkpoint", path.display())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointIntegrity(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let digest = &bytes[12..44];
    let len = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::CheckpointIntegrity(format!("payload is {} bytes, header says {len}", payload.len())));
    }
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::CheckpointIntegrity("checksum mismatch".into()));
    }
    let meta_len = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes")) as usize;
    let meta: Meta = serde_json::from_slice(&payload[8..8 + meta_len])?;
    if meta.precision != T::PRECISION {
        return Err(Error::Config(format!(
            "checkpoint holds {:?} precision values, requested {:?}",
            meta.precision,
            T::PRECISION
        )));
    }
    if let Some((field, stored, current)) = config_difference(&meta.model, current) {
        return Err(Error::CheckpointConfig { field, stored, current });
    }
    let model = Model::<T>::new(&meta.model, 0)?;
    let mut trainer = Trainer::new(model, meta.train.clone())?;
    if meta.params.len() != trainer.model.store.len() {
        return Err(Error::CheckpointIntegrity(format!(
            "{} stored parameters, model has {}",
            meta.params.len(),
            trainer.model.store.len()
        )));
    }
    let mut r = Reader { buf: payload, pos: 8 + meta_len };
    let ids: Vec<_> = trainer.model.store.iter().map(|(id, _)| id).collect();
    for (id, pm) in ids.into_iter().zip(&meta.params) {
        let p = trainer.model.store.get_mut(id);
        if p.name != pm.name || p.value.shape() != pm.shape.as_slice() {
            return Err(Error::CheckpointIntegrity(format!("parameter `{}` does not match the model layout", pm.name)));
        }
        p.value = r.tensor(&pm.shape)?;
        if pm.moments {
            let m = r.tensor(&pm.shape)?;
            let v = r.tensor(&pm.shape)?;
            trainer.opt.moments[id.index()] = Some(Moments { m, v });
        }
    }
    if r.pos != payload.len() {
        return Err(Error::CheckpointIntegrity("trailing bytes after parameter data".into()));
    }
    trainer.step = meta.step;
    trainer.opt.t = meta.opt_t;
    Ok(trainer)
}

/// Loads only the model weights of a checkpoint.
pub fn load_model<T: Float>(path: &Path, current: &ModelConfig) -> Result<Model<T>> {
    Ok(load_checkpoint::<T>(path, current)?.model)
}

/// Stored model config, read without building the model.
pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointIntegrity(format!("{} is not a checkpoint file", path.display())));
    }
    let payload = &bytes[HEADER_LEN..];
    let meta_len = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes")) as usize;
    let end = (8 + meta_len).min(payload.len());
    let meta: Meta = serde_json::from_slice(&payload[8..end])?;
    Ok(meta.model)
}
