use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Encodes `[N, C, H, W]` images in `[0, 1]` as one binary PGM (C = 1) or
/// PPM (C = 3). Images are tiled row-major, `min(columns, N)` per row, with
/// one-pixel black separators: width `cols·(W+1) − 1`.
pub fn encode_image_grid(images: &Tensor, columns: usize) -> Result<Vec<u8>> {
    if images.ndim() != 4 {
        return Err(Error::shape(
            "write_image_grid",
            format!("expected [N, C, H, W], got {:?}", images.shape()),
        ));
    }
    let (n, c, h, w) = {
        let s = images.shape();
        (s[0], s[1], s[2], s[3])
    };
    if n == 0 || columns == 0 {
        return Err(Error::contract("write_image_grid: need at least one image and one column"));
    }
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::shape(
                "write_image_grid",
                format!("{c} channels; PGM/PPM need 1 or 3"),
            ))
        }
    };
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let width = cols * (w + 1) - 1;
    let height = rows * (h + 1) - 1;
    let mut pixels = vec![0u8; width * height * c];
    let x = images.data();
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let v = x[((i * c + ch) * h + r) * w + col];
                    let (y, xx) = (gr * (h + 1) + r, gc * (w + 1) + col);
                    pixels[(y * width + xx) * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_image_grid(path: &Path, images: &Tensor, columns: usize) -> Result<()> {
    let bytes = encode_image_grid(images, columns)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
