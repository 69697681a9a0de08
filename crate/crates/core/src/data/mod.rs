//! Datasets of 8-bit images and image output.
//!
//! Byte `k` maps to the float `k / 255` everywhere; the discretized
//! likelihoods in [`crate::decoders`] use the same grid.

mod idx;
mod pnm;
mod sprites;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, write_idx};
pub use pnm::{encode_image_grid, write_image_grid};
pub use sprites::{gen_sprites, Rect, SpriteConfig, SpriteSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Everything, e.g. a freshly loaded file.
    All,
}

/// Images as bytes in `[N, C, H, W]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    bytes: Vec<u8>,
    chw: [usize; 3],
    labels: Option<Vec<u8>>,
    split: Split,
}

impl Dataset {
    pub fn new(bytes: Vec<u8>, chw: [usize; 3], split: Split) -> Result<Self> {
        let d = chw.iter().product::<usize>();
        if d == 0 || bytes.len() % d != 0 {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} bytes do not tile images of {:?}", bytes.len(), chw),
            ));
        }
        Ok(Dataset {
            bytes,
            chw,
            labels: None,
            split,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::shape(
                "Dataset::with_labels",
                format!("{} labels for {} images", labels.len(), self.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.bytes.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// `[channels, height, width]`.
    pub fn chw(&self) -> [usize; 3] {
        self.chw
    }

    /// Data dimensionality D = C·H·W.
    pub fn dim(&self) -> usize {
        self.chw.iter().product()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.dim();
        &self.bytes[i * d..(i + 1) * d]
    }

    /// New dataset holding the listed images, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let mut bytes = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            bytes.extend_from_slice(self.image(i));
        }
        Dataset {
            bytes,
            chw: self.chw,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            split,
        }
    }

    /// Bytes of the listed images, concatenated.
    pub fn batch_bytes(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect()
    }

    /// Float view `[B, C, H, W]` of the listed images.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let [c, h, w] = self.chw;
        let data = self.batch_bytes(indices).into_iter().map(|b| b as f64 / 255.0).collect();
        Tensor::from_vec(&[indices.len(), c, h, w], data)
    }

    /// Float view with uniform dequantization noise of one bin width,
    /// `(k + u − ½) / 255`. Off by default everywhere.
    pub fn batch_dequantized(&self, indices: &[usize], rng: &mut Rng) -> Tensor {
        let mut x = self.batch(indices);
        for v in x.data_mut() {
            *v += (rng.uniform() - 0.5) / 255.0;
        }
        x
    }

    /// The whole dataset as floats.
    pub fn to_tensor(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Quantizes floats in `[0, 1]` back to bytes.
pub fn quantize(x: &[f64]) -> Vec<u8> {
    x.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}
