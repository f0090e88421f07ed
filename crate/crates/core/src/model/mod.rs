//! The inpainting model: ViT encoder, per-patch linear decoder.
//!
//! A canvas enters as a grid of flattened patches, each linearly embedded.
//! Masked patches have their embeddings replaced by a learned token *before*
//! position embeddings are added; the transformer then mixes visible context
//! into the masked positions, and a single linear head (equivalent to a 1x1
//! convolution over the token grid) decodes every position straight back to
//! pixels.  Outputs are unconstrained; consumers clamp to `[0, 1]` before
//! thresholding at inference.
//!
//! Submodules: [`config`] (shapes), [`params`] (storage + visitor), [`net`]
//! (batched forward/backward, exact gradients), [`checkpoint`] (archive I/O).

pub mod checkpoint;
pub mod config;
pub mod net;
pub mod params;

use ndarray::Array2;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Objective};
pub use config::ModelConfig;
pub use net::{
    add_scaled, forward_batch, loss_batch, loss_grad_batch, patchify, unpatchify, LossScope,
};
pub use params::{ModelParams, ParamKind};

use crate::error::{Error, Result};
use crate::masking::{MaskMode, PatchMask};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// A freshly initialized model; the same `(cfg, seed)` always yields the
    /// same parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::ParamInit, &[]);
        Ok(Model { cfg, params: ModelParams::init(&cfg, &mut rng) })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Patch embedding of a canvas: linear projection plus position table,
    /// without any masking — `(num_patches, embed)`.
    pub fn patch_embed(&self, canvas: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_canvas(canvas)?;
        let patches = patchify(canvas, self.cfg.patch)?;
        let mut e = patches.dot(&self.params.patch_w);
        e += &self.params.patch_b;
        e += &self.params.pos;
        Ok(e)
    }

    /// Full forward pass over one canvas: embeddings of `mask`ed patches are
    /// replaced per `mode`, and the decoded pixels come back canvas-shaped.
    pub fn forward_canvas(
        &self,
        canvas: &Array2<f32>,
        mask: &PatchMask,
        mode: MaskMode,
    ) -> Result<Array2<f32>> {
        self.check_canvas(canvas)?;
        let patches = patchify(canvas, self.cfg.patch)?;
        let (out, _) = forward_batch(
            &self.params,
            &self.cfg,
            &patches,
            std::slice::from_ref(mask),
            mode,
            false,
        )?;
        unpatchify(&out, self.cfg.patch)
    }

    fn check_canvas(&self, canvas: &Array2<f32>) -> Result<()> {
        let want = self.cfg.canvas;
        if canvas.dim() != (want, want) {
            return Err(Error::ShapeMismatch {
                context: "model canvas",
                expected: format!("{want}x{want}"),
                actual: format!("{:?}", canvas.dim()),
            });
        }
        Ok(())
    }
}

/// Mean absolute error between prediction and target over the masked patches
/// only (the masked-image-modeling objective at canvas level).  The patch
/// side is inferred from the mask length; an empty mask yields 0.
pub fn reconstruction_loss(
    prediction: &Array2<f32>,
    target: &Array2<f32>,
    mask: &PatchMask,
) -> Result<f64> {
    if prediction.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            context: "reconstruction_loss",
            expected: format!("{:?}", prediction.dim()),
            actual: format!("{:?}", target.dim()),
        });
    }
    let (s, sw) = prediction.dim();
    let n = mask.grid.len();
    let g = (n as f64).sqrt().round() as usize;
    if s != sw || g * g != n || g == 0 || s % g != 0 {
        return Err(Error::ShapeMismatch {
            context: "reconstruction_loss mask",
            expected: format!("square patch grid tiling a {s}x{sw} canvas"),
            actual: format!("{n} patches"),
        });
    }
    let patch = s / g;
    let pred_rows = patchify(prediction, patch)?;
    let tgt_rows = patchify(target, patch)?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, &flag) in mask.grid.iter().enumerate() {
        if flag {
            let (p, t) = (pred_rows.row(i), tgt_rows.row(i));
            for j in 0..patch * patch {
                sum += (p[j] - t[j]).abs() as f64;
            }
            count += patch * patch;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}
