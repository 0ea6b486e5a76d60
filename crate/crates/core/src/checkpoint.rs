//! Binary checkpoints of a [`TrainState`].
//!
//! Layout:
//!
//! ```text
//! magic     8 bytes  "SHIKECKP"
//! version   u32 LE
//! hlen      u64 LE
//! header    hlen bytes of JSON (model config, stage, epoch, history, array table)
//! arrays    f64 LE values of every array in table order
//! digest    32 bytes SHA-256 of everything above
//! ```
//!
//! Arrays are named `param/<name>`, `buffer/<name>` and `velocity/<name>`.
//! Values are stored bit-exactly, so a loaded state continues training and
//! evaluates exactly like the saved one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{MoEModel, ModelConfig};
use crate::train::{EpochMetrics, Stage, TrainState};

pub const MAGIC: &[u8; 8] = b"SHIKECKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    stage: Stage,
    epoch: usize,
    history: Vec<EpochMetrics>,
    arrays: Vec<ArrayEntry>,
}

fn collect(state: &TrainState) -> (Vec<ArrayEntry>, Vec<f64>) {
    let mut table = Vec::new();
    let mut values = Vec::new();
    let mut push = |name: String, v: &[f64]| {
        table.push(ArrayEntry { name, len: v.len() });
        values.extend_from_slice(v);
    };
    let mut names = Vec::new();
    state.model.for_each_param(&mut |n, _, p| {
        names.push(n.to_string());
        push(format!("param/{n}"), &p.value);
    });
    state.model.for_each_buffer(&mut |n, b| push(format!("buffer/{n}"), b));
    for (n, v) in names.iter().zip(&state.velocity) {
        push(format!("velocity/{n}"), v);
    }
    (table, values)
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let (arrays, values) = collect(state);
    let header = Header {
        model: state.model.config().clone(),
        stage: state.stage,
        epoch: state.epoch,
        history: state.history.clone(),
        arrays,
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + h.len() + values.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("digest mismatch (file is corrupt or truncated)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_bytes = body
        .get(20..20 + hlen)
        .ok_or_else(|| bad("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    let data = &body[20 + hlen..];
    let total: usize = header.arrays.iter().map(|a| a.len).sum();
    if data.len() != total * 8 {
        return Err(bad(format!("expected {} array bytes, found {}", total * 8, data.len())));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut arrays = header.arrays.iter().map(|a| {
        let v: Vec<f64> = values.by_ref().take(a.len).collect();
        (a.name.as_str(), v)
    });

    let mut model = MoEModel::new(header.model.clone(), 0)?;
    let mut err = None;
    let mut next = |prefix: &str, name: &str, want: usize| -> Option<Vec<f64>> {
        match arrays.next() {
            Some((n, v)) if n.strip_prefix(prefix) == Some(name) && v.len() == want => Some(v),
            Some((n, v)) => {
                err.get_or_insert(format!("array {n} ({} values) where {prefix}{name} ({want}) was expected", v.len()));
                None
            }
            None => {
                err.get_or_insert(format!("missing array {prefix}{name}"));
                None
            }
        }
    };
    let mut names = Vec::new();
    model.for_each_param_mut(&mut |n, _, p| {
        names.push((n.to_string(), p.len()));
        if let Some(v) = next("param/", n, p.len()) {
            p.value = v;
        }
    });
    model.for_each_buffer_mut(&mut |n, b| {
        if let Some(v) = next("buffer/", n, b.len()) {
            *b = v;
        }
    });
    let velocity: Vec<Vec<f64>> = names
        .iter()
        .map(|(n, len)| next("velocity/", n, *len).unwrap_or_default())
        .collect();
    if let Some(e) = err {
        return Err(bad(e));
    }
    if arrays.next().is_some() {
        return Err(bad("trailing arrays".into()));
    }
    Ok(TrainState {
        model,
        velocity,
        epoch: header.epoch,
        stage: header.stage,
        history: header.history,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Load and check that the model predicts `num_classes` classes.
pub fn load_for_classes(path: &Path, num_classes: usize) -> Result<TrainState> {
    let state = load(path)?;
    if state.model.num_classes() != num_classes {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "model has {} classes but the dataset has {num_classes}",
                state.model.num_classes()
            ),
        });
    }
    Ok(state)
}
