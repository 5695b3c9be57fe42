//! Patch decomposition of decoder-resolution images and positional
//! embeddings.
//!
//! A patch sequence lists `P x P` tiles in raster order. Each tile is
//! flattened channel-major, then row-major within the tile, so index
//! `c*P*P + py*P + px` holds channel `c` at tile offset `(py, px)`. The
//! round trip `unpatchify(patchify(img))` is bit-exact: both directions are
//! pure index permutations.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::error::Error;
use crate::image::{Image, Mask};
use crate::rng;
use crate::tensor::Tensor;
use crate::Result;

/// Standard deviation for learned positional tables. Large enough that
/// distinct rows visibly break permutation symmetry, small enough not to
/// drown the content embedding.
const LEARNED_POS_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    patch: usize,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    /// Row-major `count x (channels * patch^2)` flattened tiles.
    vectors: Vec<Vec<f64>>,
    /// Fraction of masked pixels per tile, in `[0, 1]`.
    mask_ratios: Vec<f64>,
}

impl PatchSequence {
    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn mask_ratio(&self, i: usize) -> f64 {
        self.mask_ratios[i]
    }

    pub fn mask_ratios(&self) -> &[f64] {
        &self.mask_ratios
    }

    pub fn dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Split `img` into `P x P` tiles with per-tile mask ratios. Extents must be
/// divisible by `P`, and the mask must match the image.
pub fn patchify(img: &Image, mask: &Mask, patch: usize) -> Result<PatchSequence> {
    if patch == 0 || !img.height().is_multiple_of(patch) || !img.width().is_multiple_of(patch) {
        return Err(Error::Image {
            detail: format!(
                "extents {}x{} not divisible by patch size {patch}",
                img.height(),
                img.width()
            ),
        });
    }
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::Image {
            detail: format!(
                "image {}x{} vs mask {}x{}",
                img.height(),
                img.width(),
                mask.height(),
                mask.width()
            ),
        });
    }
    let grid_h = img.height() / patch;
    let grid_w = img.width() / patch;
    let c = img.channels();
    let area = (patch * patch) as f64;
    let mut vectors = Vec::with_capacity(grid_h * grid_w);
    let mut mask_ratios = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut v = vec![0.0; c * patch * patch];
            let mut holes = 0usize;
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    if !mask.known(y, x) {
                        holes += 1;
                    }
                    for ch in 0..c {
                        v[ch * patch * patch + py * patch + px] = img.get(y, x, ch);
                    }
                }
            }
            vectors.push(v);
            mask_ratios.push(holes as f64 / area);
        }
    }
    Ok(PatchSequence {
        patch,
        grid_h,
        grid_w,
        channels: c,
        vectors,
        mask_ratios,
    })
}

/// Reassemble the image a sequence was cut from.
pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let p = seq.patch;
    let (h, w, c) = (seq.grid_h * p, seq.grid_w * p, seq.channels);
    let mut pixels = vec![0.0; h * w * c];
    for (i, v) in seq.vectors.iter().enumerate() {
        let (gy, gx) = (i / seq.grid_w, i % seq.grid_w);
        for py in 0..p {
            for px in 0..p {
                let (y, x) = (gy * p + py, gx * p + px);
                for ch in 0..c {
                    pixels[(y * w + x) * c + ch] = v[ch * p * p + py * p + px];
                }
            }
        }
    }
    Image::new(h, w, c, pixels)
}

/// Gather index mapping a stack of flattened tiles (`count x dim`, row-major)
/// back to interleaved image layout `(y, x, channel)`. Used to rebuild the
/// output image tensor differentiably.
pub fn unpatchify_gather_index(
    grid_h: usize,
    grid_w: usize,
    patch: usize,
    channels: usize,
) -> Arc<Vec<Option<usize>>> {
    let (h, w) = (grid_h * patch, grid_w * patch);
    let dim = channels * patch * patch;
    let mut index = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                let g = (y / patch) * grid_w + x / patch;
                let (py, px) = (y % patch, x % patch);
                index.push(Some(g * dim + ch * patch * patch + py * patch + px));
            }
        }
    }
    Arc::new(index)
}

// ── Positional embeddings ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosKind {
    /// Seeded Gaussian table, meant to be trained further.
    Learned { seed: u64 },
    /// Interleaved sin/cos, fixed.
    Sinusoidal,
}

/// `count x dim` table of positional rows.
pub fn positional_embedding(count: usize, dim: usize, kind: PosKind) -> Result<Tensor> {
    if count == 0 || dim == 0 {
        return Err(Error::Shape {
            op: "positional_embedding",
            detail: format!("count {count} and dim {dim} must be positive"),
        });
    }
    let data = match kind {
        PosKind::Learned { seed } => {
            let mut rng = rng::stream(seed, "positional-embedding");
            (0..count * dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * LEARNED_POS_STD
                })
                .collect()
        }
        PosKind::Sinusoidal => {
            let mut data = vec![0.0; count * dim];
            for pos in 0..count {
                for i in 0..dim {
                    let pair = (i / 2) as f64;
                    let rate = 10_000f64.powf(2.0 * pair / dim as f64);
                    let angle = pos as f64 / rate;
                    data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                }
            }
            data
        }
    };
    Tensor::new(vec![count, dim], data)
}
