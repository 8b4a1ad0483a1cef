//! Checkpoint container: every parameter tensor keyed by its hierarchical
//! name, plus metadata. See `docs/checkpoint_format.md` for the exact byte
//! layout (versioned header, little-endian doubles).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::tensor::Arr;

use super::AdamState;

pub const CKPT_MAGIC: &[u8; 8] = b"PLRCKPT\x01";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub model: ModelConfig,
    pub iteration: u64,
    pub has_optimizer: bool,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Arr)>,
}

fn wio(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(path: &Path, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn write_tensor(w: &mut impl Write, name: &str, arr: &Arr) -> std::io::Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&(arr.nrows() as u32).to_le_bytes())?;
    w.write_all(&(arr.ncols() as u32).to_le_bytes())?;
    for v in arr.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Saves model parameters (and optionally optimizer state) at `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: Option<&AdamState>,
    iteration: u64,
    config_hash: &str,
) -> Result<(), CheckpointError> {
    let meta = CheckpointMeta {
        config_hash: config_hash.to_string(),
        model: model.config.clone(),
        iteration,
        has_optimizer: adam.is_some(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");

    let mut tensors: Vec<(String, Arr)> = model
        .store
        .iter()
        .map(|(n, a)| (n.to_string(), a.clone()))
        .collect();
    if let Some(adam) = adam {
        for (id, name) in model.store.ids().zip(model.store.iter().map(|(n, _)| n)) {
            let (m, v, step) = adam.moments(model.store.index_of(id));
            tensors.push((format!("adam.m/{name}"), m.clone()));
            tensors.push((format!("adam.v/{name}"), v.clone()));
            tensors.push((
                format!("adam.step/{name}"),
                crate::tensor::scalar_arr(step as f64),
            ));
        }
    }

    let f = File::create(path).map_err(wio(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(CKPT_MAGIC).map_err(wio(path))?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(wio(path))?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())
        .map_err(wio(path))?;
    w.write_all(&meta_json).map_err(wio(path))?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(wio(path))?;
    for (name, arr) in &tensors {
        write_tensor(&mut w, name, arr).map_err(wio(path))?;
    }
    w.flush().map_err(wio(path))
}

/// Reads a checkpoint file back into memory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let f = File::open(path).map_err(wio(path))?;
    let mut r = BufReader::new(f);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(wio(path))?;
    if &magic != CKPT_MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(wio(path))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(wio(path))?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(wio(path))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_buf).map_err(|e| bad(path, format!("bad metadata: {e}")))?;

    r.read_exact(&mut u32buf).map_err(wio(path))?;
    let n_tensors = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(wio(path))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(wio(path))?;
        let name = String::from_utf8(name_buf).map_err(|_| bad(path, "non-utf8 tensor name"))?;
        r.read_exact(&mut u32buf).map_err(wio(path))?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf).map_err(wio(path))?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut data = vec![0u8; rows * cols * 8];
        r.read_exact(&mut data).map_err(wio(path))?;
        let vals: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = Arr::from_shape_vec((rows, cols), vals)
            .map_err(|e| bad(path, format!("tensor {name}: {e}")))?;
        tensors.push((name, arr));
    }
    // must be at EOF
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => return Err(bad(path, "trailing bytes after tensor table")),
        Err(e) => return Err(wio(path)(e)),
    }
    Ok(Checkpoint { meta, tensors })
}

/// Rebuilds a model (and optimizer state if stored) from a checkpoint.
pub fn restore_model(
    ckpt: &Checkpoint,
    path: &Path,
) -> Result<(Model, Option<AdamState>, u64), CheckpointError> {
    let mut model = Model::new(ckpt.meta.model.clone(), 0);
    let mut adam = ckpt.meta.has_optimizer.then(|| AdamState::new(&model.store));
    let mut loaded = vec![false; model.store.len()];

    for (name, arr) in &ckpt.tensors {
        if let Some(rest) = name.strip_prefix("adam.m/") {
            let Some(adam) = adam.as_mut() else { continue };
            let id = model
                .store
                .id_of(rest)
                .ok_or_else(|| bad(path, format!("unknown adam.m tensor {rest}")))?;
            adam.set_m(model.store.index_of(id), arr.clone());
        } else if let Some(rest) = name.strip_prefix("adam.v/") {
            let Some(adam) = adam.as_mut() else { continue };
            let id = model
                .store
                .id_of(rest)
                .ok_or_else(|| bad(path, format!("unknown adam.v tensor {rest}")))?;
            adam.set_v(model.store.index_of(id), arr.clone());
        } else if let Some(rest) = name.strip_prefix("adam.step/") {
            let Some(adam) = adam.as_mut() else { continue };
            let id = model
                .store
                .id_of(rest)
                .ok_or_else(|| bad(path, format!("unknown adam.step tensor {rest}")))?;
            adam.set_step(model.store.index_of(id), arr[(0, 0)] as u64);
        } else {
            let id = model
                .store
                .id_of(name)
                .ok_or_else(|| bad(path, format!("unknown parameter {name}")))?;
            if model.store.value(id).dim() != arr.dim() {
                return Err(bad(
                    path,
                    format!(
                        "parameter {name}: shape {:?} != expected {:?}",
                        arr.dim(),
                        model.store.value(id).dim()
                    ),
                ));
            }
            *model.store.value_mut(id) = arr.clone();
            loaded[model.store.index_of(id)] = true;
        }
    }
    if let Some(missing) = loaded.iter().position(|l| !l) {
        let name = model
            .store
            .iter()
            .nth(missing)
            .map(|(n, _)| n.to_string())
            .unwrap_or_default();
        return Err(bad(path, format!("checkpoint missing parameter {name}")));
    }
    Ok((model, adam, ckpt.meta.iteration))
}
