//! Parameter storage for the encoder/decoder stack.
//!
//! Tensors are held as `ndarray` arrays in standard (row-major, contiguous)
//! layout — an invariant the visitor relies on to hand out flat slices.  The
//! visitor enumerates tensors in one fixed order shared by initialization,
//! the optimizer, and checkpoints, so all three agree without bookkeeping.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;

/// What role a tensor plays; the trainer uses this to decide weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Multiplicative weight matrix of a linear map.
    Weight,
    /// Additive bias vector.
    Bias,
    /// LayerNorm gain or shift.
    Norm,
    /// Learned position embedding table.
    Pos,
    /// Learned mask token.
    Token,
}

impl ParamKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Pos => "pos",
            ParamKind::Token => "token",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Array1<f32>,
    pub ln1_b: Array1<f32>,
    /// `(embed, 3 * embed)`: fused query/key/value projection.
    pub qkv_w: Array2<f32>,
    pub qkv_b: Array1<f32>,
    /// `(embed, embed)`: attention output projection.
    pub proj_w: Array2<f32>,
    pub proj_b: Array1<f32>,
    pub ln2_g: Array1<f32>,
    pub ln2_b: Array1<f32>,
    /// `(embed, 4 * embed)` and `(4 * embed, embed)`: the MLP.
    pub fc1_w: Array2<f32>,
    pub fc1_b: Array1<f32>,
    pub fc2_w: Array2<f32>,
    pub fc2_b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    /// `(patch_dim, embed)`: per-patch linear embedding.
    pub patch_w: Array2<f32>,
    pub patch_b: Array1<f32>,
    /// `(num_patches, embed)`: learned position table for the whole canvas.
    pub pos: Array2<f32>,
    /// `(embed,)`: the token substituted for masked patches.
    pub mask_token: Array1<f32>,
    pub blocks: Vec<BlockParams>,
    pub ln_f_g: Array1<f32>,
    pub ln_f_b: Array1<f32>,
    /// `(embed, patch_dim)`: per-patch linear decoder (a 1x1 conv over the
    /// token grid), mapping each encoded patch straight back to pixels.
    pub dec_w: Array2<f32>,
    pub dec_b: Array1<f32>,
}

/// One tensor of the fixed enumeration.
pub struct TensorRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a [f32],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [f32],
}

/// Emits every tensor in the canonical order.  One body serves both the
/// shared and mutable visitors; `$slice`/`$iter` select the access mode.
macro_rules! collect_tensors {
    ($self:ident, $out:ident, $entry:ident, $slice:ident, $iter:ident) => {{
        use ParamKind::*;
        let e = |name: String, kind, data| $entry { name, kind, data };
        $out.push(e("patch_w".into(), Weight, $self.patch_w.$slice().unwrap()));
        $out.push(e("patch_b".into(), Bias, $self.patch_b.$slice().unwrap()));
        $out.push(e("pos".into(), Pos, $self.pos.$slice().unwrap()));
        $out.push(e("mask_token".into(), Token, $self.mask_token.$slice().unwrap()));
        for (i, b) in $self.blocks.$iter().enumerate() {
            $out.push(e(format!("blocks.{i}.ln1_g"), Norm, b.ln1_g.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.ln1_b"), Norm, b.ln1_b.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.qkv_w"), Weight, b.qkv_w.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.qkv_b"), Bias, b.qkv_b.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.proj_w"), Weight, b.proj_w.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.proj_b"), Bias, b.proj_b.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.ln2_g"), Norm, b.ln2_g.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.ln2_b"), Norm, b.ln2_b.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.fc1_w"), Weight, b.fc1_w.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.fc1_b"), Bias, b.fc1_b.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.fc2_w"), Weight, b.fc2_w.$slice().unwrap()));
            $out.push(e(format!("blocks.{i}.fc2_b"), Bias, b.fc2_b.$slice().unwrap()));
        }
        $out.push(e("ln_f_g".into(), Norm, $self.ln_f_g.$slice().unwrap()));
        $out.push(e("ln_f_b".into(), Norm, $self.ln_f_b.$slice().unwrap()));
        $out.push(e("dec_w".into(), Weight, $self.dec_w.$slice().unwrap()));
        $out.push(e("dec_b".into(), Bias, $self.dec_b.$slice().unwrap()));
    }};
}

impl ModelParams {
    /// All tensors, zero-filled, with the shapes `cfg` dictates.
    pub fn zeros(cfg: &ModelConfig) -> ModelParams {
        let (d, f, m, n) = (cfg.embed, cfg.patch_dim(), cfg.mlp_dim(), cfg.num_patches());
        let block = || BlockParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            qkv_w: Array2::zeros((d, 3 * d)),
            qkv_b: Array1::zeros(3 * d),
            proj_w: Array2::zeros((d, d)),
            proj_b: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            fc1_w: Array2::zeros((d, m)),
            fc1_b: Array1::zeros(m),
            fc2_w: Array2::zeros((m, d)),
            fc2_b: Array1::zeros(d),
        };
        ModelParams {
            patch_w: Array2::zeros((f, d)),
            patch_b: Array1::zeros(d),
            pos: Array2::zeros((n, d)),
            mask_token: Array1::zeros(d),
            blocks: (0..cfg.depth).map(|_| block()).collect(),
            ln_f_g: Array1::zeros(d),
            ln_f_b: Array1::zeros(d),
            dec_w: Array2::zeros((d, f)),
            dec_b: Array1::zeros(f),
        }
    }

    /// Fresh trainable state: weights, position table and mask token drawn
    /// from a truncated normal (sigma 0.02, resampled beyond two sigma);
    /// biases zero; LayerNorm at identity (gain 1, shift 0).
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
        let mut p = ModelParams::zeros(cfg);
        let normal = Normal::new(0.0f32, 0.02).expect("valid sigma");
        let mut trunc = || loop {
            let v: f32 = normal.sample(rng);
            if v.abs() <= 0.04 {
                return v;
            }
        };
        for t in p.tensors_mut() {
            match t.kind {
                ParamKind::Weight | ParamKind::Pos | ParamKind::Token => {
                    t.data.iter_mut().for_each(|v| *v = trunc());
                }
                ParamKind::Bias => {}
                ParamKind::Norm => {
                    // Gains are the norm tensors whose names end in `_g`.
                    let fill = if t.name.ends_with("_g") { 1.0 } else { 0.0 };
                    t.data.iter_mut().for_each(|v| *v = fill);
                }
            }
        }
        p
    }

    /// Tensors in the canonical enumeration order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(8 + 12 * self.blocks.len());
        collect_tensors!(self, out, TensorRef, as_slice, iter);
        out
    }

    /// Mutable view of the same enumeration.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::with_capacity(8 + 12 * self.blocks.len());
        collect_tensors!(self, out, TensorMut, as_slice_mut, iter_mut);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn toy_and_base_param_counts() {
        let toy = ModelParams::zeros(&ModelConfig::toy());
        assert_eq!(toy.num_params(), 818_240);

        let base = ModelParams::zeros(&ModelConfig::default());
        let n = base.num_params();
        // Standard 12-layer / 768-dim encoder plus embedding, position
        // table, mask token, and the per-patch decoder head.
        assert_eq!(n, 85_601_536);
        let nominal = 86_000_000.0f64;
        assert!(
            (n as f64 - nominal).abs() / nominal < 0.05,
            "encoder should sit within 5% of the nominal 86M: {n}"
        );
    }

    #[test]
    fn visitor_orders_match_and_cover_everything() {
        let cfg = ModelConfig::toy();
        let mut p = ModelParams::zeros(&cfg);
        let names: Vec<String> = p.tensors().iter().map(|t| t.name.clone()).collect();
        let names_mut: Vec<String> = p.tensors_mut().iter().map(|t| t.name.clone()).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 8 + 12 * cfg.depth);
        assert_eq!(names[0], "patch_w");
        assert!(names.contains(&"blocks.3.fc2_w".to_string()));
        let total: usize = p.tensors().iter().map(|t| t.data.len()).sum();
        assert_eq!(total, p.num_params());
    }

    #[test]
    fn init_is_deterministic_truncated_and_identity_norms() {
        let cfg = ModelConfig::toy();
        let a = ModelParams::init(&cfg, &mut stream_rng(3, Stream::ParamInit, &[]));
        let b = ModelParams::init(&cfg, &mut stream_rng(3, Stream::ParamInit, &[]));
        let c = ModelParams::init(&cfg, &mut stream_rng(4, Stream::ParamInit, &[]));
        for (ta, tb) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(ta.data, tb.data, "{}: same seed must reproduce", ta.name);
        }
        assert!(
            a.tensors()
                .iter()
                .zip(c.tensors().iter())
                .any(|(ta, tc)| ta.data != tc.data),
            "different seeds must differ"
        );
        for t in a.tensors() {
            match t.kind {
                ParamKind::Weight | ParamKind::Pos | ParamKind::Token => {
                    assert!(t.data.iter().all(|v| v.abs() <= 0.04), "{} truncation", t.name);
                    assert!(t.data.iter().any(|&v| v != 0.0), "{} must be drawn", t.name);
                }
                ParamKind::Bias => {
                    assert!(t.data.iter().all(|&v| v == 0.0), "{} zero bias", t.name);
                }
                ParamKind::Norm => {
                    let expect = if t.name.ends_with("_g") { 1.0 } else { 0.0 };
                    assert!(t.data.iter().all(|&v| v == expect), "{} identity norm", t.name);
                }
            }
        }
    }
}
