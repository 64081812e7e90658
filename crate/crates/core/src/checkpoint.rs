//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "FGSI" | u32 version | u64 len + JSON header
//! u64 count | count × tensor            model parameters
//! u64 count | count × tensor            Adam moments, then step counter
//! u64 len + RNG state bytes
//! tensor = u64 len + UTF-8 name | u64 rank | rank × u64 dim | f64 values
//! ```
//!
//! Writing is a pure function of the in-memory state, so save → load → save
//! reproduces the file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::config::ModelConfig;
use crate::corpus::{RelationInventory, Vocabulary};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, Cursor, LrSchedule, Trainer};

pub const MAGIC: &[u8; 4] = b"FGSI";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_T: &str = "adam.t";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match its configuration: {0}")]
    ShapeMismatch(#[source] ModelError),
}

/// Everything besides tensors needed to rebuild a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub seed: u64,
    pub total_steps: u64,
    pub relations: Vec<String>,
    pub vocab: Vec<String>,
}

/// Position of the seeded generators: every random stream is derived from
/// these three numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub cursor: Cursor,
}

impl RngState {
    fn to_bytes(self) -> Vec<u8> {
        [self.seed, self.cursor.epoch, self.cursor.batch]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() != 24 {
            return Err(CheckpointError::Malformed(format!(
                "RNG state has {} bytes, expected 24",
                bytes.len()
            )));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        Ok(RngState {
            seed: word(0),
            cursor: Cursor {
                epoch: word(1),
                batch: word(2),
            },
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a trainer to bytes.
pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let model = &trainer.model;
    let header = Header {
        config: model.config.clone(),
        seed: trainer.seed,
        total_steps: trainer.schedule.total_steps,
        relations: model.relations.names().to_vec(),
        vocab: model.vocab.tokens().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, &json);

    let params = &model.params;
    put_u64(&mut out, params.len() as u64);
    for id in params.ids() {
        put_tensor(&mut out, params.name(id), params.value(id));
    }

    put_u64(&mut out, 2 * params.len() as u64 + 1);
    for id in params.ids() {
        put_tensor(
            &mut out,
            &format!("{ADAM_M}{}", params.name(id)),
            &trainer.adam.m[id.index()],
        );
    }
    for id in params.ids() {
        put_tensor(
            &mut out,
            &format!("{ADAM_V}{}", params.name(id)),
            &trainer.adam.v[id.index()],
        );
    }
    put_tensor(&mut out, ADAM_T, &Tensor::scalar(trainer.adam.t as f64));

    let rng = RngState {
        seed: trainer.seed,
        cursor: trainer.cursor,
    };
    put_bytes(&mut out, &rng.to_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        // Anything larger than the remaining buffer cannot be satisfied.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(CheckpointError::Truncated(what));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let n = self.len(what)?;
        self.take(n, what)
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = std::str::from_utf8(self.bytes("tensor name")?)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name: {e}")))?
            .to_string();
        let rank = self.len("tensor rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| {
                n.checked_mul(8)
                    .is_some_and(|b| b <= self.buf.len() - self.pos)
            })
            .ok_or(CheckpointError::Truncated("tensor values"))?;
        let raw = self.take(numel * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)))
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Trainer, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header: Header = serde_json::from_slice(r.bytes("header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;

    let mut params = ParamStore::new();
    let count = r.len("parameter count")?;
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        params
            .insert(&name, t)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }

    let vocab = Vocabulary::from_token_list(header.vocab).map_err(CheckpointError::Malformed)?;
    let relations = RelationInventory::from_names(header.relations.iter().map(String::as_str));
    if relations.names() != header.relations.as_slice() {
        return Err(CheckpointError::Malformed(
            "relation inventory is not canonical".into(),
        ));
    }
    let model = Model::from_parts(header.config.clone(), vocab, relations, params)
        .map_err(CheckpointError::ShapeMismatch)?;

    let count = r.len("optimizer tensor count")?;
    if count != 2 * model.params.len() + 1 {
        return Err(CheckpointError::Malformed(format!(
            "expected {} optimizer tensors, found {count}",
            2 * model.params.len() + 1
        )));
    }
    let mut moments = Vec::with_capacity(2 * model.params.len());
    for prefix in [ADAM_M, ADAM_V] {
        for id in model.params.ids() {
            let (name, t) = r.tensor()?;
            let want = format!("{prefix}{}", model.params.name(id));
            if name != want {
                return Err(CheckpointError::Malformed(format!(
                    "expected {want}, found {name}"
                )));
            }
            if t.shape() != model.params.value(id).shape() {
                return Err(CheckpointError::ShapeMismatch(ModelError::ShapeMismatch {
                    name,
                    expected: model.params.value(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                }));
            }
            moments.push(t);
        }
    }
    let (name, t) = r.tensor()?;
    if name != ADAM_T || t.numel() != 1 {
        return Err(CheckpointError::Malformed(
            "missing optimizer step counter".into(),
        ));
    }
    let v = moments.split_off(model.params.len());
    let cfg = &model.config;
    let adam = AdamState {
        m: moments,
        v,
        t: t.item() as u64,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };

    let rng = RngState::from_bytes(r.bytes("RNG state")?)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    if rng.seed != header.seed {
        return Err(CheckpointError::Malformed(
            "RNG seed disagrees with header".into(),
        ));
    }
    let schedule = LrSchedule {
        lr_initial: cfg.lr_initial,
        lr_min: cfg.lr_min,
        total_steps: header.total_steps,
        power: cfg.decay_power,
    };
    Ok(Trainer {
        model,
        adam,
        schedule,
        seed: header.seed,
        cursor: rng.cursor,
    })
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<(), CheckpointError> {
    fs::write(path, encode(trainer)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
