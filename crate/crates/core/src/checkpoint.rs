//! Versioned container of named `f64` arrays plus a JSON snapshot.
//!
//! Layout: a text header (`hetnoise-arrays`, `version`, `config_bytes`,
//! `arrays`, `checksum`, `end`), the JSON snapshot, then per array a `u32`
//! name length, the UTF-8 name, a `u32` rank, `u64` dimensions and the
//! little-endian data. The checksum is the SHA-256 of everything after the
//! header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::hex_digest;
use crate::dataset_file::{check_version, header_field, header_number, split_header};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::trainer::{
    BestParams, EpochRecord, ModelParams, ModelSpec, OptimizerConfig, TrainState,
};

pub const ARRAYS_MAGIC: &str = "hetnoise-arrays";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_arrays(config_json: &str, arrays: &[NamedArray]) -> Vec<u8> {
    let mut body = config_json.as_bytes().to_vec();
    for a in arrays {
        body.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        body.extend_from_slice(a.name.as_bytes());
        body.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = format!(
        "{ARRAYS_MAGIC}\nversion {CHECKPOINT_VERSION}\nconfig_bytes {}\narrays {}\nchecksum {}\nend\n",
        config_json.len(),
        arrays.len(),
        hex_digest(&body)
    )
    .into_bytes();
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("array data is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_arrays(bytes: &[u8]) -> Result<(String, Vec<NamedArray>)> {
    let (fields, body) = split_header(bytes, ARRAYS_MAGIC)?;
    check_version(&fields, CHECKPOINT_VERSION)?;
    let config_len: usize = header_number(&fields, "config_bytes")?;
    let count: usize = header_number(&fields, "arrays")?;
    if header_field(&fields, "checksum")? != hex_digest(body) {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 0,
    };
    let config = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| Error::Corrupt("snapshot is not valid UTF-8".into()))?
        .to_string();
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Corrupt("array name is not valid UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Corrupt(format!("array `{name}` is too large")))?;
        let data = cur
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if cur.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after the last array".into()));
    }
    Ok((config, arrays))
}

/// Writes through a temporary file so a failed write leaves no partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_arrays(path: &Path, config_json: &str, arrays: &[NamedArray]) -> Result<()> {
    write_atomic(path, &encode_arrays(config_json, arrays))
}

pub fn read_arrays(path: &Path) -> Result<(String, Vec<NamedArray>)> {
    decode_arrays(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    model: ModelSpec,
    optimizer: OptimizerConfig,
    step: u64,
    epoch: usize,
    rng: RngState,
    history: Vec<EpochRecord>,
    best: Option<BestMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BestMeta {
    epoch: usize,
    val_nll: f64,
}

fn push_params(prefix: &str, params: &ModelParams, out: &mut Vec<NamedArray>) {
    params.visit(&mut |name, _, shape, data| {
        out.push(NamedArray {
            name: format!("{prefix}/{name}"),
            shape: shape.to_vec(),
            data: data.to_vec(),
        })
    });
}

fn fill_params(prefix: &str, model: &ModelSpec, arrays: &[NamedArray]) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(model);
    let mut shapes = Vec::new();
    params.visit(&mut |name, _, shape, _| shapes.push((name.to_string(), shape.to_vec())));
    let mut missing = None;
    let mut idx = 0;
    params.visit_mut(&mut |name, _, data| {
        let full = format!("{prefix}/{name}");
        match arrays.iter().find(|a| a.name == full) {
            Some(a) if a.shape == shapes[idx].1 && a.data.len() == data.len() => {
                data.copy_from_slice(&a.data)
            }
            _ => {
                missing.get_or_insert(full);
            }
        }
        idx += 1;
    });
    match missing {
        Some(name) => Err(Error::Corrupt(format!(
            "array `{name}` is missing or misshapen"
        ))),
        None => Ok(params),
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let snapshot = Snapshot {
        model: state.model.clone(),
        optimizer: state.optimizer.clone(),
        step: state.step,
        epoch: state.epoch,
        rng: state.rng,
        history: state.history.clone(),
        best: state.best.as_ref().map(|b| BestMeta {
            epoch: b.epoch,
            val_nll: b.val_nll,
        }),
    };
    let mut arrays = Vec::new();
    push_params("params", &state.params, &mut arrays);
    push_params("momentum", &state.momentum, &mut arrays);
    if let Some(b) = &state.best {
        push_params("best", &b.params, &mut arrays);
    }
    Ok(encode_arrays(
        &serde_json::to_string_pretty(&snapshot)?,
        &arrays,
    ))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let (config, arrays) = decode_arrays(bytes)?;
    let snap: Snapshot = serde_json::from_str(&config)
        .map_err(|e| Error::Corrupt(format!("invalid snapshot: {e}")))?;
    snap.model.validate()?;
    let params = fill_params("params", &snap.model, &arrays)?;
    let momentum = fill_params("momentum", &snap.model, &arrays)?;
    let best = match snap.best {
        None => None,
        Some(meta) => Some(BestParams {
            epoch: meta.epoch,
            val_nll: meta.val_nll,
            params: fill_params("best", &snap.model, &arrays)?,
        }),
    };
    Ok(TrainState {
        model: snap.model,
        optimizer: snap.optimizer,
        params,
        momentum,
        step: snap.step,
        epoch: snap.epoch,
        rng: snap.rng,
        history: snap.history,
        best,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}
