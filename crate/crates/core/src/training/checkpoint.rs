//! Binary checkpoint format.
//!
//! ```text
//! b"SVAECKPT"  u32 LE version  u64 LE manifest length
//! manifest (UTF-8 JSON)
//! f64 LE blobs at the offsets the manifest lists
//! u32 LE CRC32 of every preceding byte
//! ```
//!
//! Blobs hold the parameters, then Adam's first and second moments in the
//! same order, then the running variance if the model has one. Floats are
//! stored bit-exactly, so save → load → save reproduces the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::vae::{ModelConfig, RunningVariance, VaeModel};

const MAGIC: &[u8; 8] = b"SVAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: VaeModel,
    pub adam: AdamState,
    pub train: TrainConfig,
    pub step: u64,
    pub bad_steps: u32,
    pub rng: RngState,
    /// Caller-supplied config echo, stored verbatim.
    pub echo: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    bad_steps: u32,
    adam_step: u64,
    rng: RngState,
    running_steps: Option<u64>,
    blobs: Vec<BlobEntry>,
    echo: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = ckpt.model.params();
    if ckpt.adam.m.len() != params.len() || ckpt.adam.v.len() != params.len() {
        return Err(bad("optimizer state does not match the parameters"));
    }
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in params {
        tensors.push((name.clone(), t));
    }
    for ((name, _), m) in params.iter().zip(&ckpt.adam.m) {
        tensors.push((format!("adam.m.{name}"), m));
    }
    for ((name, _), v) in params.iter().zip(&ckpt.adam.v) {
        tensors.push((format!("adam.v.{name}"), v));
    }
    if let Some(r) = &ckpt.model.running {
        tensors.push(("running.ema".into(), &r.ema));
    }

    let mut blobs = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        blobs.push(BlobEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        model: ckpt.model.config.clone(),
        train: ckpt.train.clone(),
        step: ckpt.step,
        bad_steps: ckpt.bad_steps,
        adam_step: ckpt.adam.step,
        rng: ckpt.rng.clone(),
        running_steps: ckpt.model.running.as_ref().map(|r| r.steps),
        blobs,
        echo: ckpt.echo.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| bad(format!("manifest: {e}")))?;

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(bad(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(body[12..20].try_into().unwrap());
    let mend = usize::try_from(mlen)
        .ok()
        .and_then(|l| HEADER_LEN.checked_add(l))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("manifest length exceeds file"))?;
    let manifest: Manifest =
        serde_json::from_slice(&body[HEADER_LEN..mend]).map_err(|e| bad(format!("manifest: {e}")))?;
    let payload = &body[mend..];

    let mut model = VaeModel::zeros(manifest.model.clone())?;
    let n = model.params().len();
    let expected = 3 * n + usize::from(model.running.is_some());
    if manifest.blobs.len() != expected {
        return Err(bad(format!("expected {expected} blobs, found {}", manifest.blobs.len())));
    }
    let mut end = 0usize;
    let mut read = |i: usize| -> Result<Tensor> {
        let b = &manifest.blobs[i];
        let count: usize = b.shape.iter().product();
        let start = usize::try_from(b.offset).map_err(|_| bad("blob offset"))?;
        let stop = start
            .checked_add(count * 8)
            .filter(|&s| s <= payload.len())
            .ok_or_else(|| bad(format!("blob {} runs past the end", b.name)))?;
        end = end.max(stop);
        let data = payload[start..stop]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(&b.shape, data))
    };

    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        if &manifest.blobs[i].name != name {
            return Err(bad(format!("blob {i} is {}, expected {name}", manifest.blobs[i].name)));
        }
        let t = read(i)?;
        model.set_param(name, t).map_err(|e| bad(e.to_string()))?;
    }
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (read(n + i)?, read(2 * n + i)?);
        let shape = model.params()[i].1.shape();
        if a.shape() != shape || b.shape() != shape {
            return Err(bad(format!("optimizer moment shape for {}", names[i])));
        }
        m.push(a);
        v.push(b);
    }
    if let Some(r) = model.running.as_mut() {
        let ema = read(3 * n)?;
        if ema.shape() != r.ema.shape() {
            return Err(bad("running variance shape"));
        }
        *r = RunningVariance {
            ema,
            steps: manifest.running_steps.ok_or_else(|| bad("running variance step count missing"))?,
        };
    }
    if end != payload.len() {
        return Err(bad(format!("{} unreferenced trailing bytes", payload.len() - end)));
    }
    Ok(Checkpoint {
        model,
        adam: AdamState {
            m,
            v,
            step: manifest.adam_step,
        },
        train: manifest.train,
        step: manifest.step,
        bad_steps: manifest.bad_steps,
        rng: manifest.rng,
        echo: manifest.echo,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
