//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `BMTCKPT1`, u32 format version, u32 JSON
//! length, the JSON metadata blob, u32 tensor count, then per tensor a u32
//! name length, the UTF-8 name, u32 rank, u32 extents and the f64 payload.

use std::path::Path;

use brainmt_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{BrainError, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::train::{HistoryRow, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BMTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    epoch: usize,
    step: usize,
    weight_decay: f64,
    best_val: Option<f64>,
    best_epoch: usize,
    history: Vec<HistoryRow>,
}

/// A saved run: configuration and full training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: TrainState,
}

const GROUPS: [&str; 4] = ["param", "adam_m", "adam_v", "best"];

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| BrainError::Data(format!("{v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let meta = Meta {
            config: self.config.clone(),
            epoch: s.epoch,
            step: s.optimizer.step,
            weight_decay: s.optimizer.weight_decay,
            best_val: s.best_val.is_finite().then_some(s.best_val),
            best_epoch: s.best_epoch,
            history: s.history.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| BrainError::Data(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        let names: Vec<&str> = s.params.iter().map(|(n, _)| n).collect();
        let groups: [&[Tensor]; 4] = [s.params.tensors(), &s.optimizer.m, &s.optimizer.v, s.best_params.tensors()];
        put_u32(&mut out, 4 * names.len())?;
        for (group, tensors) in GROUPS.iter().zip(groups) {
            for (name, t) in names.iter().zip(tensors) {
                let full = format!("{group}/{name}");
                put_u32(&mut out, full.len())?;
                out.extend_from_slice(full.as_bytes());
                put_u32(&mut out, t.rank())?;
                for &d in t.shape() {
                    put_u32(&mut out, d)?;
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(BrainError::BadMagic {
                path: path.to_path_buf(),
                expected: "checkpoint",
            });
        }
        r.pos = 8;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(BrainError::parse(path, format!("unsupported checkpoint version {version}")));
        }
        let json_len = r.u32()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(json_len)?).map_err(|e| BrainError::parse(path, e.to_string()))?;
        let count = r.u32()? as usize;
        if count % 4 != 0 {
            return Err(BrainError::parse(path, format!("tensor count {count} is not a multiple of 4")));
        }
        let per = count / 4;
        let mut groups: Vec<Vec<(String, Tensor)>> = vec![Vec::with_capacity(per); 4];
        for (gi, group) in GROUPS.iter().enumerate() {
            for _ in 0..per {
                let name_len = r.u32()? as usize;
                let name = std::str::from_utf8(r.take(name_len)?)
                    .map_err(|e| BrainError::parse(path, e.to_string()))?
                    .to_string();
                let Some(short) = name.strip_prefix(&format!("{group}/")) else {
                    return Err(BrainError::parse(path, format!("expected a {group}/ tensor, found '{name}'")));
                };
                let rank = r.u32()? as usize;
                let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
                let n: usize = shape.iter().product();
                let data: Vec<f64> = r
                    .take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                groups[gi].push((short.to_string(), Tensor::new(&shape, data)?));
            }
        }
        if r.pos != bytes.len() {
            return Err(BrainError::DimMismatch {
                path: path.to_path_buf(),
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let names: Vec<String> = groups[0].iter().map(|(n, _)| n.clone()).collect();
        for g in &groups[1..] {
            if g.iter().map(|(n, _)| n).ne(names.iter()) {
                return Err(BrainError::parse(path, "tensor groups list different parameters"));
            }
        }
        let mut it = groups.into_iter().map(|g| g.into_iter().map(|(_, t)| t).collect::<Vec<_>>());
        let store = |ts: Vec<Tensor>| {
            let mut s = ParamStore::new();
            for (n, t) in names.iter().zip(ts) {
                s.add(n.clone(), t);
            }
            s
        };
        let params = store(it.next().expect("group"));
        let m = it.next().expect("group");
        let v = it.next().expect("group");
        let best_params = store(it.next().expect("group"));
        Ok(Checkpoint {
            config: meta.config,
            state: TrainState {
                params,
                optimizer: AdamW {
                    weight_decay: meta.weight_decay,
                    m,
                    v,
                    step: meta.step,
                },
                epoch: meta.epoch,
                best_val: meta.best_val.unwrap_or(f64::INFINITY),
                best_epoch: meta.best_epoch,
                best_params,
                history: meta.history,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| BrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| BrainError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(BrainError::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
