//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PLGT" | u32 version | u32 config_len | config (UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u8 dtype | u32 rank | u64 extents[rank] | payload
//! u32 crc32 of every preceding byte
//! ```
//!
//! Dtype tags: 0 = f64, 1 = f32, 2 = u64.

use std::path::Path;

use indexmap::IndexMap;

use super::AdamState;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{param_specs, Model, ModelConfig, Params};
use crate::ndgrad::Tensor;

pub const MAGIC: &[u8; 4] = b"PLGT";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;
const DTYPE_U64: u8 = 2;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const STATE: &str = "state/";

/// Everything needed to rebuild a model or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Echo of the run configuration, model keys included.
    pub config: KvMap,
    pub params: Params,
    pub adam: AdamState,
    pub epoch: u64,
    pub step: u64,
    /// Batches already consumed in the current epoch.
    pub cursor: u64,
    /// Root seed; every random stream is derived from it and the counters.
    pub seed: u64,
}

enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    payload: Payload,
}

impl Checkpoint {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = ModelConfig::desk(1, 1);
        for key in ["src_vocab", "tgt_vocab", "d_model"] {
            if !self.config.contains(key) {
                return Err(Error::Checkpoint(format!("config echo lacks `{key}`")));
            }
        }
        base.apply_kv(&self.config)
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.model_config()?, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let f64_entry = |name: String, t: &Tensor| Entry {
            name,
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        };
        for (k, t) in self.params.iter() {
            entries.push(f64_entry(format!("{PARAM}{k}"), t));
        }
        for (k, t) in &self.adam.m {
            entries.push(f64_entry(format!("{ADAM_M}{k}"), t));
        }
        for (k, t) in &self.adam.v {
            entries.push(f64_entry(format!("{ADAM_V}{k}"), t));
        }
        for (k, v) in [
            ("adam_t", self.adam.t),
            ("epoch", self.epoch),
            ("step", self.step),
            ("cursor", self.cursor),
            ("seed", self.seed),
        ] {
            entries.push(Entry {
                name: format!("{STATE}{k}"),
                shape: vec![1],
                payload: Payload::U64(vec![v]),
            });
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in &entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.payload {
                Payload::F64(_) => DTYPE_F64,
                Payload::U64(_) => DTYPE_U64,
            });
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and validates a checkpoint. Nothing is returned unless the
    /// whole file checks out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
        let config = KvMap::parse(cfg_text)?;
        let count = r.u32()? as usize;

        let mut params = Params::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        let mut state: IndexMap<String, u64> = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            match dtype {
                DTYPE_F64 | DTYPE_F32 => {
                    let width = if dtype == DTYPE_F64 { 8 } else { 4 };
                    let raw = r.take(n.checked_mul(width).ok_or_else(too_big)?)?;
                    let data: Vec<f64> = if dtype == DTYPE_F64 {
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect()
                    } else {
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                            .collect()
                    };
                    let t = Tensor::new(&shape, data)?;
                    if let Some(k) = name.strip_prefix(PARAM) {
                        params.insert(k, t);
                    } else if let Some(k) = name.strip_prefix(ADAM_M) {
                        m.insert(k.to_string(), t);
                    } else if let Some(k) = name.strip_prefix(ADAM_V) {
                        v.insert(k.to_string(), t);
                    } else {
                        return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
                    }
                }
                DTYPE_U64 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(too_big)?)?;
                    let k = name
                        .strip_prefix(STATE)
                        .filter(|_| n == 1)
                        .ok_or_else(|| Error::Checkpoint(format!("unexpected counter `{name}`")))?;
                    state.insert(k.to_string(), u64::from_le_bytes(raw.try_into().unwrap()));
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{name}`"))),
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor directory".into()));
        }
        let counter = |k: &str| {
            state
                .get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing counter `{k}`")))
        };
        let ckpt = Checkpoint {
            config,
            adam: AdamState {
                m,
                v,
                t: counter("adam_t")?,
            },
            params,
            epoch: counter("epoch")?,
            step: counter("step")?,
            cursor: counter("cursor")?,
            seed: counter("seed")?,
        };
        let specs = param_specs(&ckpt.model_config()?);
        ckpt.params.check_layout(&specs)?;
        for (name, moments) in [("first", &ckpt.adam.m), ("second", &ckpt.adam.v)] {
            for s in &specs {
                match moments.get(&s.name) {
                    Some(t) if t.shape() == s.shape.as_slice() => {}
                    _ => {
                        return Err(Error::Checkpoint(format!(
                            "{name} moment for `{}` is missing or misshapen",
                            s.name
                        )))
                    }
                }
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn too_big() -> Error {
    Error::Checkpoint("tensor extents overflow".into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
