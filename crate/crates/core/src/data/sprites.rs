use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const BACKGROUND: f64 = 32.0;
const FOREGROUND: f64 = 224.0;
const SPRITE_STREAM: u64 = 0x5350_5249;

/// One bright rectangle on a dark background per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpriteConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Inclusive range of rectangle side lengths in pixels.
    pub rect_min: usize,
    pub rect_max: usize,
    /// Gaussian noise std in intensity units (`[0, 1]` scale).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        SpriteConfig {
            count: 4000,
            height: 16,
            width: 16,
            channels: 1,
            rect_min: 4,
            rect_max: 10,
            noise_std: 8.0 / 255.0,
            seed: 0,
        }
    }
}

impl SpriteConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("sprites: {m}")));
        if self.count == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return fail("count and image extents must be positive".into());
        }
        if self.rect_min == 0 || self.rect_min > self.rect_max {
            return fail(format!("bad rectangle range {}..={}", self.rect_min, self.rect_max));
        }
        if self.rect_max > self.height.min(self.width) {
            return fail(format!(
                "rectangles up to {} do not fit {}x{}",
                self.rect_max, self.height, self.width
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        Ok(())
    }
}

/// Placement of the rectangle in one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

/// A generated sprite corpus with its 80/10/10 split by index.
#[derive(Clone, Debug)]
pub struct SpriteSet {
    pub all: Dataset,
    pub rects: Vec<Rect>,
}

impl SpriteSet {
    fn bounds(&self, split: Split) -> (usize, usize) {
        let n = self.all.len();
        let train = n * 8 / 10;
        let val = n / 10;
        match split {
            Split::Train => (0, train),
            Split::Val => (train, train + val),
            Split::Test => (train + val, n),
            Split::All => (0, n),
        }
    }

    pub fn split(&self, split: Split) -> Dataset {
        let (lo, hi) = self.bounds(split);
        let idx: Vec<usize> = (lo..hi).collect();
        self.all.subset(&idx, split)
    }

    pub fn train(&self) -> Dataset {
        self.split(Split::Train)
    }

    pub fn val(&self) -> Dataset {
        self.split(Split::Val)
    }

    pub fn test(&self) -> Dataset {
        self.split(Split::Test)
    }
}

pub fn gen_sprites(config: &SpriteConfig) -> Result<SpriteSet> {
    config.validate()?;
    let mut rng = Rng::with_stream(config.seed, SPRITE_STREAM);
    let (h, w, c) = (config.height, config.width, config.channels);
    let d = c * h * w;
    let mut bytes = Vec::with_capacity(config.count * d);
    let mut rects = Vec::with_capacity(config.count);
    let mut noise = vec![0.0; d];
    let span = config.rect_max - config.rect_min + 1;
    for _ in 0..config.count {
        let rh = config.rect_min + rng.below(span);
        let rw = config.rect_min + rng.below(span);
        let rect = Rect {
            top: rng.below(h - rh + 1),
            left: rng.below(w - rw + 1),
            height: rh,
            width: rw,
        };
        rng.fill_normal(&mut noise);
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w {
                    let base = if rect.contains(row, col) { FOREGROUND } else { BACKGROUND };
                    let v = base + 255.0 * config.noise_std * noise[(ch * h + row) * w + col];
                    bytes.push(v.clamp(0.0, 255.0).round() as u8);
                }
            }
        }
        rects.push(rect);
    }
    Ok(SpriteSet {
        all: Dataset::new(bytes, [c, h, w], Split::All)?,
        rects,
    })
}
