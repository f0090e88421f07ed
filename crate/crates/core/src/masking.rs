//! Patch-level masking: which patch embeddings get hidden, and how.
//!
//! A [`PatchMask`] marks a subset of canvas patches.  During training the
//! marked embeddings are replaced by a learned mask token — either entirely
//! (hard) or blended with the original embedding (soft) — and the model is
//! trained to reconstruct the pixels underneath.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a masked patch embedding is replaced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// The mask token fully replaces the embedding.
    Hard,
    /// Blend: `y/100 * token + (1 - y/100) * embedding`, `y` in `[0, 100]`.
    /// `y` is independent of the masking ratio; `Soft { y: 100 }` equals
    /// `Hard` and `Soft { y: 0 }` leaves embeddings untouched.
    Soft { y: f64 },
}

impl MaskMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            MaskMode::Hard => Ok(()),
            MaskMode::Soft { y } => {
                if (0.0..=100.0).contains(y) {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig {
                        field: "mask_mode.y",
                        message: format!("must be in [0, 100], got {y}"),
                    })
                }
            }
        }
    }

    /// Blend weight of the mask token: 1 for hard, `y / 100` for soft.
    pub fn token_weight(&self) -> f32 {
        match self {
            MaskMode::Hard => 1.0,
            MaskMode::Soft { y } => (*y / 100.0) as f32,
        }
    }
}

/// A boolean flag per patch, in patch order (row-major over the patch grid).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub grid: Vec<bool>,
    /// The ratio this mask was sampled at (a record, not a derived count).
    pub ratio: f64,
}

impl PatchMask {
    /// A mask hiding nothing, e.g. for inference at ratio 0.
    pub fn none(num_patches: usize) -> PatchMask {
        PatchMask { grid: vec![false; num_patches], ratio: 0.0 }
    }

    pub fn num_masked(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.grid[i]).collect()
    }
}

/// Samples exactly `round(ratio * num_patches)` masked positions uniformly
/// without replacement.  `ratio` must lie in `[0, 1]`.
pub fn sample_mask(num_patches: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig {
            field: "mask_ratio",
            message: format!("must be in [0, 1], got {ratio}"),
        });
    }
    let count = (ratio * num_patches as f64).round() as usize;
    let mut grid = vec![false; num_patches];
    for pos in rand::seq::index::sample(rng, num_patches, count) {
        grid[pos] = true;
    }
    Ok(PatchMask { grid, ratio })
}

/// Replaces (or blends) the masked rows of an `(N, D)` embedding matrix with
/// the mask token.  Unmasked rows are untouched in all modes.
pub fn apply_mask(
    embeddings: &mut Array2<f32>,
    mask: &PatchMask,
    token: &[f32],
    mode: MaskMode,
) -> Result<()> {
    mode.validate()?;
    let (n, d) = embeddings.dim();
    if mask.grid.len() != n {
        return Err(Error::ShapeMismatch {
            context: "apply_mask patches",
            expected: format!("{n} mask flags"),
            actual: format!("{}", mask.grid.len()),
        });
    }
    if token.len() != d {
        return Err(Error::ShapeMismatch {
            context: "apply_mask token",
            expected: format!("dim {d}"),
            actual: format!("{}", token.len()),
        });
    }
    let a = mode.token_weight();
    for (i, &masked) in mask.grid.iter().enumerate() {
        if masked {
            for (j, &t) in token.iter().enumerate() {
                let e = embeddings[(i, j)];
                embeddings[(i, j)] = a * t + (1.0 - a) * e;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        stream_rng(seed, Stream::PatchMask, &[])
    }

    #[test]
    fn sample_mask_count_is_exact_round() {
        for &n in &[64usize, 196, 784] {
            for &ratio in &[0.0, 0.15, 0.3, 0.45, 0.6, 1.0] {
                let mask = sample_mask(n, ratio, &mut rng(5)).unwrap();
                assert_eq!(
                    mask.num_masked(),
                    (ratio * n as f64).round() as usize,
                    "n = {n}, ratio = {ratio}"
                );
                assert_eq!(mask.grid.len(), n);
            }
        }
    }

    #[test]
    fn sample_mask_rejects_out_of_range_ratio() {
        assert!(sample_mask(16, -0.1, &mut rng(0)).is_err());
        assert!(sample_mask(16, 1.1, &mut rng(0)).is_err());
        assert!(sample_mask(16, f64::NAN, &mut rng(0)).is_err());
    }

    #[test]
    fn sample_mask_is_deterministic_and_covers_all_positions() {
        let a = sample_mask(64, 0.6, &mut rng(3)).unwrap();
        let b = sample_mask(64, 0.6, &mut rng(3)).unwrap();
        assert_eq!(a, b);

        let mut ever = vec![false; 32];
        let mut r = rng(4);
        for _ in 0..200 {
            let m = sample_mask(32, 0.5, &mut r).unwrap();
            for (e, &g) in ever.iter_mut().zip(&m.grid) {
                *e |= g;
            }
        }
        assert!(ever.iter().all(|&e| e), "every position should get masked eventually");
    }

    #[test]
    fn hard_and_soft_extremes_agree() {
        let mut r = rng(7);
        let token: Vec<f32> = (0..8).map(|_| r.random::<f32>() - 0.5).collect();
        let base = Array2::from_shape_fn((10, 8), |_| r.random::<f32>());
        let mask = sample_mask(10, 0.4, &mut r).unwrap();

        let mut hard = base.clone();
        apply_mask(&mut hard, &mask, &token, MaskMode::Hard).unwrap();
        let mut soft_full = base.clone();
        apply_mask(&mut soft_full, &mask, &token, MaskMode::Soft { y: 100.0 }).unwrap();
        assert_eq!(hard, soft_full, "soft y=100 must equal hard");

        let mut soft_zero = base.clone();
        apply_mask(&mut soft_zero, &mask, &token, MaskMode::Soft { y: 0.0 }).unwrap();
        assert_eq!(soft_zero, base, "soft y=0 must be the identity");

        for &i in &mask.masked_indices() {
            for j in 0..8 {
                assert_eq!(hard[(i, j)], token[j], "hard replaces the full row");
            }
        }
        for i in 0..10 {
            if !mask.grid[i] {
                for j in 0..8 {
                    assert_eq!(hard[(i, j)], base[(i, j)], "unmasked rows untouched");
                }
            }
        }
    }

    #[test]
    fn soft_blend_interpolates() {
        let token = vec![1.0f32; 4];
        let mut emb = Array2::zeros((2, 4));
        let mask = PatchMask { grid: vec![true, false], ratio: 0.5 };
        apply_mask(&mut emb, &mask, &token, MaskMode::Soft { y: 60.0 }).unwrap();
        for j in 0..4 {
            assert!((emb[(0, j)] - 0.6).abs() < 1e-7, "60% token + 40% zero embedding");
            assert_eq!(emb[(1, j)], 0.0);
        }
    }

    #[test]
    fn apply_mask_validates_shapes_and_mode() {
        let token = vec![0.0f32; 4];
        let mut emb = Array2::<f32>::zeros((2, 4));
        let mask = PatchMask { grid: vec![true; 3], ratio: 1.0 };
        assert!(apply_mask(&mut emb, &mask, &token, MaskMode::Hard).is_err(), "grid len");
        let mask = PatchMask { grid: vec![true; 2], ratio: 1.0 };
        assert!(apply_mask(&mut emb, &mask, &[0.0; 3], MaskMode::Hard).is_err(), "token dim");
        assert!(
            apply_mask(&mut emb, &mask, &token, MaskMode::Soft { y: 101.0 }).is_err(),
            "y out of range"
        );
    }
}
