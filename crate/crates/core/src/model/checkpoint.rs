//! Single-file checkpoint container.
//!
//! ```text
//! "BDC1" | version u32 | meta_len u64 | meta JSON (config, normalizer, tokenizer, step)
//! count u32 | count × ( name_len u32 | name | ndim u32 | dims u32… | f32 data… )
//! ```
//! Integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use bdc_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, PolicyModel};
use crate::error::{Error, Result};
use crate::latents::{LatentTokenizer, Normalizer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained policy with everything needed to run it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: PolicyModel<f32>,
    pub normalizer: Normalizer,
    pub tokenizer: Option<LatentTokenizer>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    normalizer: Normalizer,
    tokenizer: Option<LatentTokenizer>,
    step: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            config: self.model.config().clone(),
            normalizer: self.normalizer.clone(),
            tokenizer: self.tokenizer.clone(),
            step: self.step,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (_, name, t) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(bad("truncated metadata"));
        }
        let meta: Meta = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let n = read_u32(&mut r)? as usize;
            if n > r.len() {
                return Err(bad("truncated tensor name"));
            }
            let name = std::str::from_utf8(&r[..n])
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            r = &r[n..];
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel * 4 > r.len() {
                return Err(bad(format!("truncated data for {name}")));
            }
            let data = r[..numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[numel * 4..];
            if store.find(&name).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            store.add(name, Tensor::new(&shape, data)?);
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        let mut model = PolicyModel::new(meta.config, 0)?;
        model.load_params(&store)?;
        Ok(Self {
            model,
            normalizer: meta.normalizer,
            tokenizer: meta.tokenizer,
            step: meta.step,
        })
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
