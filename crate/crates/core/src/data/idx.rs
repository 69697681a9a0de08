//! IDX files: a big-endian magic `0x0000 08 nd` (unsigned bytes, `nd`
//! dimensions), `nd` big-endian u32 extents, then the raw bytes.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_error(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn read_u32(buf: &[u8], offset: usize, what: &str) -> Result<u32> {
    let bytes = buf
        .get(offset..offset + 4)
        .ok_or_else(|| parse_error(buf.len(), format!("file ends inside the {what}")))?;
    Ok(u32::from_be_bytes(bytes.try_into().unwrap()))
}

/// Validates magic and extents; returns the extents and the payload.
fn parse(buf: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = read_u32(buf, 0, "magic number")?;
    if found != magic {
        return Err(parse_error(0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let nd = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(nd);
    for i in 0..nd {
        dims.push(read_u32(buf, 4 + 4 * i, "dimension sizes")? as usize);
    }
    let header = 4 + 4 * nd;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_error(4, "dimension product overflows"))?;
    let payload = &buf[header..];
    if payload.len() < expected {
        return Err(parse_error(
            buf.len(),
            format!("truncated payload: {} of {} bytes", payload.len(), expected),
        ));
    }
    if payload.len() > expected {
        return Err(parse_error(
            header + expected,
            format!("{} trailing bytes", payload.len() - expected),
        ));
    }
    Ok((dims, payload))
}

/// Parses a 3-D image file into a one-channel dataset.
pub fn parse_idx_images(buf: &[u8]) -> Result<Dataset> {
    let (dims, payload) = parse(buf, IMAGES_MAGIC)?;
    if dims[1] == 0 || dims[2] == 0 {
        return Err(parse_error(8, format!("empty image extents {}x{}", dims[1], dims[2])));
    }
    Dataset::new(payload.to_vec(), [1, dims[1], dims[2]], Split::All)
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let (_, payload) = parse(buf, LABELS_MAGIC)?;
    Ok(payload.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image file and, optionally, its label file.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let ds = parse_idx_images(&read(images_path)?)?;
    match labels_path {
        Some(p) => {
            let labels = parse_idx_labels(&read(p)?)?;
            if labels.len() != ds.len() {
                return Err(parse_error(
                    4,
                    format!("{} labels for {} images", labels.len(), ds.len()),
                ));
            }
            ds.with_labels(labels)
        }
        None => Ok(ds),
    }
}

pub fn encode_idx_images(ds: &Dataset) -> Result<Vec<u8>> {
    let [c, h, w] = ds.chw();
    if c != 1 {
        return Err(Error::contract(format!("IDX images hold one channel, dataset has {c}")));
    }
    let mut out = Vec::with_capacity(16 + ds.bytes().len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(ds.bytes());
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes images (and labels, when the dataset has them and a path is
/// given).
pub fn write_idx(images_path: &Path, labels_path: Option<&Path>, ds: &Dataset) -> Result<()> {
    std::fs::write(images_path, encode_idx_images(ds)?).map_err(|e| Error::io(images_path, e))?;
    if let (Some(p), Some(labels)) = (labels_path, ds.labels()) {
        std::fs::write(p, encode_idx_labels(labels)).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
