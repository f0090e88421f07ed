//! Canvas composition and training-time augmentation.
//!
//! The model never sees a lone frame: support and query are tiled into one
//! square canvas of four equal cells —
//!
//! ```text
//! +---------------+---------------+
//! | support image | support mask  |
//! +---------------+---------------+
//! |  query image  |  query mask   |   (query mask: zeros at inference)
//! +---------------+---------------+
//! ```
//!
//! so segmenting the query becomes inpainting the bottom-right cell given the
//! worked example in the top row.
//!
//! Augmentation happens at two levels.  Pairwise: the support/query pairing
//! is resampled `n` times, multiplying the number of distinct canvases.
//! Imagewise: a horizontal flip and a random square crop (resized back),
//! applied to an image and its mask with identical geometry; the trainer
//! feeds the support and query sides identically-keyed streams so one draw
//! transforms the whole canvas coherently.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{resize, ResizeKind};
use crate::error::{Error, Result};

// ── canvas composition ──────────────────────────────────────────────────────

fn check_cell(context: &'static str, cell: usize, arr: &Array2<f32>) -> Result<()> {
    if arr.dim() != (cell, cell) {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{cell}x{cell}"),
            actual: format!("{:?}", arr.dim()),
        });
    }
    Ok(())
}

/// Tiles the four cells into a `2C x 2C` canvas.  All inputs must be square
/// and identically sized; `query_mask = None` fills the bottom-right cell
/// with zeros (the inference arrangement).
pub fn compose_canvas(
    support_image: &Array2<f32>,
    support_mask: &Array2<f32>,
    query_image: &Array2<f32>,
    query_mask: Option<&Array2<f32>>,
) -> Result<Array2<f32>> {
    let (c, cw) = support_image.dim();
    if c != cw {
        return Err(Error::ShapeMismatch {
            context: "compose_canvas support image",
            expected: "square cell".into(),
            actual: format!("{c}x{cw}"),
        });
    }
    check_cell("compose_canvas support mask", c, support_mask)?;
    check_cell("compose_canvas query image", c, query_image)?;
    if let Some(qm) = query_mask {
        check_cell("compose_canvas query mask", c, qm)?;
    }
    let mut canvas = Array2::zeros((2 * c, 2 * c));
    canvas.slice_mut(s![..c, ..c]).assign(support_image);
    canvas.slice_mut(s![..c, c..]).assign(support_mask);
    canvas.slice_mut(s![c.., ..c]).assign(query_image);
    if let Some(qm) = query_mask {
        canvas.slice_mut(s![c.., c..]).assign(qm);
    }
    Ok(canvas)
}

/// Cuts the bottom-right (query-mask) cell back out of a canvas-shaped array.
pub fn extract_query_output(canvas: &Array2<f32>) -> Result<Array2<f32>> {
    let (h, w) = canvas.dim();
    if h != w || h % 2 != 0 || h == 0 {
        return Err(Error::ShapeMismatch {
            context: "extract_query_output",
            expected: "square canvas with even side".into(),
            actual: format!("{h}x{w}"),
        });
    }
    let c = h / 2;
    Ok(canvas.slice(s![c.., c..]).to_owned())
}

// ── augmentation ────────────────────────────────────────────────────────────

/// Knobs for both augmentation levels.  `epochwise` controls whether pairings
/// and imagewise draws are re-derived every epoch or frozen at their
/// first-epoch values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Pairing rounds; the expanded set has `pairwise_n * |query_pool|` pairs.
    pub pairwise_n: usize,
    /// Probability that a given cell is augmented at all.
    pub imagewise_ratio: f64,
    /// Enable horizontal flip (then applied with probability 1/2).
    pub flip: bool,
    /// Enable random square crop-and-resize.
    pub crop: bool,
    /// Smallest crop side as a fraction of the cell side.
    pub crop_min_frac: f64,
    /// Re-derive pairings and augmentation draws each epoch.
    pub epochwise: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pairwise_n: 5,
            imagewise_ratio: 0.5,
            flip: true,
            crop: true,
            crop_min_frac: 150.0 / 224.0,
            epochwise: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairwise_n == 0 {
            return Err(Error::InvalidConfig {
                field: "augment.pairwise_n",
                message: "must be >= 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.imagewise_ratio) {
            return Err(Error::InvalidConfig {
                field: "augment.imagewise_ratio",
                message: format!("must be in [0, 1], got {}", self.imagewise_ratio),
            });
        }
        if !(self.crop_min_frac > 0.0 && self.crop_min_frac <= 1.0) {
            return Err(Error::InvalidConfig {
                field: "augment.crop_min_frac",
                message: format!("must be in (0, 1], got {}", self.crop_min_frac),
            });
        }
        Ok(())
    }
}

/// Expands the support/query pools into `n` rounds of pairings.  Every round
/// pairs each query frame (ascending order) with a support frame drawn
/// uniformly at random, so the output lists `n * |query_pool|` pairs of
/// `(support_index, query_index)` in round-major order.
pub fn pairwise_expand(
    support_pool: &[usize],
    query_pool: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::InvalidConfig {
            field: "augment.pairwise_n",
            message: "must be >= 1".into(),
        });
    }
    if support_pool.is_empty() || query_pool.is_empty() {
        return Err(Error::Dataset(format!(
            "pairwise_expand: empty pool (support {}, query {})",
            support_pool.len(),
            query_pool.len()
        )));
    }
    let mut pairs = Vec::with_capacity(n * query_pool.len());
    for _ in 0..n {
        for &q in query_pool {
            let s = support_pool[rng.random_range(0..support_pool.len())];
            pairs.push((s, q));
        }
    }
    Ok(pairs)
}

/// Horizontal flip (columns reversed).  Its own involution.
pub fn hflip(input: &Array2<f32>) -> Array2<f32> {
    input.slice(s![.., ..;-1]).to_owned()
}

/// Applies the imagewise augmentation to one image/mask cell pair with
/// identical geometry: with probability `imagewise_ratio` the pair is
/// augmented (flip with probability 1/2 if enabled, then a uniform square
/// crop with side in `[ceil(crop_min_frac * C), C]` resized back to `C`),
/// otherwise returned unchanged.  The image resamples bilinearly, the mask
/// by nearest neighbor, so masks stay binary.
pub fn imagewise_augment(
    image: &Array2<f32>,
    mask: &Array2<f32>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f32>, Array2<f32>)> {
    cfg.validate()?;
    let (c, cw) = image.dim();
    if c != cw || image.dim() != mask.dim() {
        return Err(Error::ShapeMismatch {
            context: "imagewise_augment",
            expected: "matching square image and mask".into(),
            actual: format!("image {:?}, mask {:?}", image.dim(), mask.dim()),
        });
    }
    if !rng.random_bool(cfg.imagewise_ratio) {
        return Ok((image.clone(), mask.clone()));
    }
    let (mut img, mut msk) = (image.clone(), mask.clone());
    if cfg.flip && rng.random_bool(0.5) {
        img = hflip(&img);
        msk = hflip(&msk);
    }
    if cfg.crop {
        let s_min = ((cfg.crop_min_frac * c as f64).ceil() as usize).clamp(1, c);
        let side = rng.random_range(s_min..=c);
        let y0 = rng.random_range(0..=c - side);
        let x0 = rng.random_range(0..=c - side);
        let img_crop = img.slice(s![y0..y0 + side, x0..x0 + side]).to_owned();
        let msk_crop = msk.slice(s![y0..y0 + side, x0..x0 + side]).to_owned();
        img = resize(&img_crop, c, c, ResizeKind::Image);
        msk = resize(&msk_crop, c, c, ResizeKind::Mask);
    }
    Ok((img, msk))
}
