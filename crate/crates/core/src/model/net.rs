//! Batched forward and backward passes.
//!
//! Everything here works on flat batches: a canvas is `N` patches of `F`
//! pixels, a batch of `B` canvases is one `(B*N, F)` matrix, and all heavy
//! lifting is 2-D matrix multiplication (single-threaded, so results are
//! bitwise reproducible for a given batch partition).
//!
//! The forward pass embeds patches, substitutes the mask token *before*
//! adding position embeddings, and runs pre-norm transformer blocks; a
//! per-patch linear head maps encoded tokens straight back to pixels.
//! Replacing embeddings before the position add is what keeps masked
//! patches distinguishable: they all share the token value, so only the
//! position term lets the model tell them apart (and with sequence-equivariant
//! attention, identical inputs would otherwise decode identically).
//!
//! The backward pass is hand-derived and exact for the functions as
//! implemented (tanh-approximated GELU included), which is what makes
//! finite-difference validation meaningful.

use ndarray::{s, Array1, Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::masking::{MaskMode, PatchMask};

use super::config::ModelConfig;
use super::params::{BlockParams, ModelParams};

const LN_EPS: f32 = 1e-6;

// ── patch <-> canvas layout ─────────────────────────────────────────────────

/// Splits a square canvas into non-overlapping `patch x patch` tiles, one row
/// per tile: grid row-major, pixels row-major within each tile.
pub fn patchify(canvas: &Array2<f32>, patch: usize) -> Result<Array2<f32>> {
    let (h, w) = canvas.dim();
    if h != w || patch == 0 || h % patch != 0 {
        return Err(Error::ShapeMismatch {
            context: "patchify",
            expected: format!("square canvas divisible by patch {patch}"),
            actual: format!("{h}x{w}"),
        });
    }
    let g = h / patch;
    let mut out = Array2::zeros((g * g, patch * patch));
    for gi in 0..g {
        for gj in 0..g {
            let tile = canvas.slice(s![gi * patch..(gi + 1) * patch, gj * patch..(gj + 1) * patch]);
            let mut row = out.row_mut(gi * g + gj);
            for (k, &v) in tile.iter().enumerate() {
                row[k] = v;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]: `(N, patch^2)` rows back to the square canvas.
pub fn unpatchify(rows: &Array2<f32>, patch: usize) -> Result<Array2<f32>> {
    let (n, f) = rows.dim();
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || f != patch * patch {
        return Err(Error::ShapeMismatch {
            context: "unpatchify",
            expected: format!("square patch count and {patch}x{patch} pixels"),
            actual: format!("{n} patches of {f}"),
        });
    }
    let side = g * patch;
    let mut out = Array2::zeros((side, side));
    for gi in 0..g {
        for gj in 0..g {
            let row = rows.row(gi * g + gj);
            let mut tile =
                out.slice_mut(s![gi * patch..(gi + 1) * patch, gj * patch..(gj + 1) * patch]);
            for (k, v) in tile.iter_mut().enumerate() {
                *v = row[k];
            }
        }
    }
    Ok(out)
}

// ── elementwise pieces ──────────────────────────────────────────────────────

const GELU_K: f32 = 0.797_884_56; // sqrt(2 / pi)
const GELU_C: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

/// Derivative of [`gelu`] — of the tanh approximation itself, so analytic and
/// finite-difference gradients agree to rounding error.
fn gelu_prime(x: f32) -> f32 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(m: &mut Array2<f32>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-wise LayerNorm.  Returns `(out, xhat, rstd)`; `xhat` and `rstd` are
/// exactly what the backward pass needs.
fn layernorm(x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
    let (rows, d) = x.dim();
    let mut out = Array2::zeros((rows, d));
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    let inv_d = 1.0 / d as f32;
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.sum() * inv_d;
        let mut var = 0.0;
        for &v in &xr {
            let c = v - mean;
            var += c * c;
        }
        let rs = 1.0 / (var * inv_d + LN_EPS).sqrt();
        rstd[r] = rs;
        let mut hr = xhat.row_mut(r);
        let mut or = out.row_mut(r);
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            hr[j] = h;
            or[j] = g[j] * h + b[j];
        }
    }
    (out, xhat, rstd)
}

/// Backward of [`layernorm`]: `(dx, dgain, dshift)` from upstream `dout`.
fn layernorm_bwd(
    dout: &Array2<f32>,
    xhat: &Array2<f32>,
    rstd: &Array1<f32>,
    g: &Array1<f32>,
) -> (Array2<f32>, Array1<f32>, Array1<f32>) {
    let (rows, d) = dout.dim();
    let mut dx = Array2::zeros((rows, d));
    let mut dg = Array1::zeros(d);
    let mut db = Array1::zeros(d);
    let inv_d = 1.0 / d as f32;
    for r in 0..rows {
        let dor = dout.row(r);
        let hr = xhat.row(r);
        let (mut m1, mut m2) = (0.0f32, 0.0f32);
        for j in 0..d {
            let dh = dor[j] * g[j];
            m1 += dh;
            m2 += dh * hr[j];
            dg[j] += dor[j] * hr[j];
            db[j] += dor[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = rstd[r];
        let mut dxr = dx.row_mut(r);
        for j in 0..d {
            let dh = dor[j] * g[j];
            dxr[j] = (dh - m1 - hr[j] * m2) * rs;
        }
    }
    (dx, dg, db)
}

/// `xhat * gain + shift`, recomputing a LayerNorm output from its cache
/// (cheaper than storing it).
fn affine(xhat: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>) -> Array2<f32> {
    let mut out = xhat * g;
    out += b;
    out
}

fn colsum(m: &Array2<f32>) -> Array1<f32> {
    m.sum_axis(Axis(0))
}

// ── forward ─────────────────────────────────────────────────────────────────

struct BlockCache {
    xhat1: Array2<f32>,
    rstd1: Array1<f32>,
    qkv: Array2<f32>,
    /// `(B, heads, N, N)` post-softmax attention.
    attn: Array4<f32>,
    /// Concatenated head outputs, before the output projection.
    o: Array2<f32>,
    xhat2: Array2<f32>,
    rstd2: Array1<f32>,
    h1: Array2<f32>,
    g: Array2<f32>,
}

/// Everything the backward pass needs, captured during a cached forward.
pub struct ForwardCache {
    batch: usize,
    x_patches: Array2<f32>,
    mask_rows: Vec<bool>,
    token_w: f32,
    blocks: Vec<BlockCache>,
    xhat_f: Array2<f32>,
    rstd_f: Array1<f32>,
}

fn block_forward(
    x: &Array2<f32>,
    p: &BlockParams,
    cfg: &ModelConfig,
    batch: usize,
    want_cache: bool,
) -> (Array2<f32>, Option<BlockCache>) {
    let (n, d, heads, dh) = (cfg.num_patches(), cfg.embed, cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f32).sqrt();

    let (u, xhat1, rstd1) = layernorm(x, &p.ln1_g, &p.ln1_b);
    let mut qkv = u.dot(&p.qkv_w);
    qkv += &p.qkv_b;

    let mut o = Array2::zeros((batch * n, d));
    let mut attn_cache = if want_cache {
        Some(Array4::zeros((batch, heads, n, n)))
    } else {
        None
    };
    for b in 0..batch {
        for h in 0..heads {
            let q = qkv.slice(s![b * n..(b + 1) * n, h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![b * n..(b + 1) * n, d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![b * n..(b + 1) * n, 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut sc = q.dot(&k.t());
            sc.mapv_inplace(|x| x * scale);
            softmax_rows(&mut sc);
            let oh = sc.dot(&v);
            o.slice_mut(s![b * n..(b + 1) * n, h * dh..(h + 1) * dh]).assign(&oh);
            if let Some(a) = attn_cache.as_mut() {
                a.slice_mut(s![b, h, .., ..]).assign(&sc);
            }
        }
    }

    let mut attn_out = o.dot(&p.proj_w);
    attn_out += &p.proj_b;
    let x_mid = x + &attn_out;

    let (v2, xhat2, rstd2) = layernorm(&x_mid, &p.ln2_g, &p.ln2_b);
    let mut h1 = v2.dot(&p.fc1_w);
    h1 += &p.fc1_b;
    let g = h1.mapv(gelu);
    let mut h2 = g.dot(&p.fc2_w);
    h2 += &p.fc2_b;
    let x_out = &x_mid + &h2;

    let cache = want_cache.then(|| BlockCache {
        xhat1,
        rstd1,
        qkv,
        attn: attn_cache.unwrap(),
        o,
        xhat2,
        rstd2,
        h1,
        g,
    });
    (x_out, cache)
}

/// Runs the full stack over a flat batch of patch rows.  `masks` selects
/// which patch embeddings are replaced by the mask token (per sample) in
/// `mode`; position embeddings are added after the substitution.  Returns
/// per-patch pixel predictions with the same `(B*N, F)` layout, plus the
/// activation cache when `want_cache` is set.
pub fn forward_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    patches: &Array2<f32>,
    masks: &[PatchMask],
    mode: MaskMode,
    want_cache: bool,
) -> Result<(Array2<f32>, Option<ForwardCache>)> {
    mode.validate()?;
    let (n, f) = (cfg.num_patches(), cfg.patch_dim());
    let (rows, fw) = patches.dim();
    if fw != f || rows != masks.len() * n || masks.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "forward_batch",
            expected: format!("(B*{n}, {f}) patches with B = {} masks", masks.len()),
            actual: format!("({rows}, {fw})"),
        });
    }
    for m in masks {
        if m.grid.len() != n {
            return Err(Error::ShapeMismatch {
                context: "forward_batch mask",
                expected: format!("{n} flags"),
                actual: format!("{}", m.grid.len()),
            });
        }
    }
    let batch = masks.len();
    let a = mode.token_weight();

    let mut x = patches.dot(&params.patch_w);
    x += &params.patch_b;

    let mut mask_rows = vec![false; rows];
    for (b, m) in masks.iter().enumerate() {
        for (i, &flag) in m.grid.iter().enumerate() {
            if flag {
                mask_rows[b * n + i] = true;
                let mut row = x.row_mut(b * n + i);
                if a == 1.0 {
                    row.assign(&params.mask_token);
                } else {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = a * params.mask_token[j] + (1.0 - a) * *v;
                    }
                }
            }
        }
    }
    for b in 0..batch {
        let mut rowsb = x.slice_mut(s![b * n..(b + 1) * n, ..]);
        rowsb += &params.pos;
    }

    let mut block_caches = Vec::with_capacity(if want_cache { cfg.depth } else { 0 });
    for bp in &params.blocks {
        let (x_next, cache) = block_forward(&x, bp, cfg, batch, want_cache);
        if let Some(c) = cache {
            block_caches.push(c);
        }
        x = x_next;
    }

    let (y, xhat_f, rstd_f) = layernorm(&x, &params.ln_f_g, &params.ln_f_b);
    let mut out = y.dot(&params.dec_w);
    out += &params.dec_b;

    let cache = want_cache.then(|| ForwardCache {
        batch,
        x_patches: patches.clone(),
        mask_rows,
        token_w: a,
        blocks: block_caches,
        xhat_f,
        rstd_f,
    });
    Ok((out, cache))
}

// ── backward ────────────────────────────────────────────────────────────────

fn block_backward(
    dx_out: &Array2<f32>,
    p: &BlockParams,
    g: &mut BlockParams,
    cache: &BlockCache,
    cfg: &ModelConfig,
    batch: usize,
) -> Array2<f32> {
    let (n, d, heads, dh) = (cfg.num_patches(), cfg.embed, cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f32).sqrt();

    // MLP path: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
    let dh2 = dx_out;
    g.fc2_w += &cache.g.t().dot(dh2);
    g.fc2_b += &colsum(dh2);
    let dg_act = dh2.dot(&p.fc2_w.t());
    let mut dh1 = dg_act;
    ndarray::Zip::from(&mut dh1).and(&cache.h1).for_each(|dv, &h| *dv *= gelu_prime(h));
    let v2 = affine(&cache.xhat2, &p.ln2_g, &p.ln2_b);
    g.fc1_w += &v2.t().dot(&dh1);
    g.fc1_b += &colsum(&dh1);
    let dv2 = dh1.dot(&p.fc1_w.t());
    let (dx_ln2, dg2, db2) = layernorm_bwd(&dv2, &cache.xhat2, &cache.rstd2, &p.ln2_g);
    g.ln2_g += &dg2;
    g.ln2_b += &db2;
    let dx_mid = dx_out + &dx_ln2;

    // Attention path: x_mid = x_in + proj(concat_heads(attn)).
    let dattn_out = &dx_mid;
    g.proj_w += &cache.o.t().dot(dattn_out);
    g.proj_b += &colsum(dattn_out);
    let d_o = dattn_out.dot(&p.proj_w.t());

    let mut dqkv = Array2::zeros((batch * n, 3 * d));
    for b in 0..batch {
        for h in 0..heads {
            let a = cache.attn.slice(s![b, h, .., ..]);
            let do_h = d_o.slice(s![b * n..(b + 1) * n, h * dh..(h + 1) * dh]);
            let q = cache.qkv.slice(s![b * n..(b + 1) * n, h * dh..(h + 1) * dh]);
            let k = cache
                .qkv
                .slice(s![b * n..(b + 1) * n, d + h * dh..d + (h + 1) * dh]);
            let v = cache
                .qkv
                .slice(s![b * n..(b + 1) * n, 2 * d + h * dh..2 * d + (h + 1) * dh]);

            let da = do_h.dot(&v.t());
            let dv = a.t().dot(&do_h);
            // Softmax backward: dS = A ⊙ (dA - rowsum(dA ⊙ A)).
            let rowdot = (&da * &a).sum_axis(Axis(1));
            let mut ds = da;
            for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                let c = rowdot[r];
                for (j, val) in row.iter_mut().enumerate() {
                    *val = (*val - c) * a[(r, j)];
                }
            }
            let mut dq = ds.dot(&k);
            dq.mapv_inplace(|x| x * scale);
            let mut dk = ds.t().dot(&q);
            dk.mapv_inplace(|x| x * scale);

            dqkv.slice_mut(s![b * n..(b + 1) * n, h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![b * n..(b + 1) * n, d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![b * n..(b + 1) * n, 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
    }

    let u = affine(&cache.xhat1, &p.ln1_g, &p.ln1_b);
    g.qkv_w += &u.t().dot(&dqkv);
    g.qkv_b += &colsum(&dqkv);
    let du = dqkv.dot(&p.qkv_w.t());
    let (dx_ln1, dg1, db1) = layernorm_bwd(&du, &cache.xhat1, &cache.rstd1, &p.ln1_g);
    g.ln1_g += &dg1;
    g.ln1_b += &db1;

    dx_mid + &dx_ln1
}

/// Exact gradients of whatever scalar produced `dout` (gradient w.r.t. the
/// forward output), for every parameter.  `cache` must come from the
/// matching [`forward_batch`] call.
pub fn backward_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    dout: &Array2<f32>,
) -> ModelParams {
    let n = cfg.num_patches();
    let mut grads = ModelParams::zeros(cfg);

    // Decoder head: out = ln_f(x) . dec_w + dec_b.
    let y = affine(&cache.xhat_f, &params.ln_f_g, &params.ln_f_b);
    grads.dec_w += &y.t().dot(dout);
    grads.dec_b += &colsum(dout);
    let dy = dout.dot(&params.dec_w.t());
    let (mut dx, dgf, dbf) = layernorm_bwd(&dy, &cache.xhat_f, &cache.rstd_f, &params.ln_f_g);
    grads.ln_f_g += &dgf;
    grads.ln_f_b += &dbf;

    for (i, bp) in params.blocks.iter().enumerate().rev() {
        dx = block_backward(&dx, bp, &mut grads.blocks[i], &cache.blocks[i], cfg, cache.batch);
    }

    // Position table: shared across the batch.
    for b in 0..cache.batch {
        grads.pos += &dx.slice(s![b * n..(b + 1) * n, ..]);
    }

    // Mask substitution: masked rows route `token_w` of the gradient into the
    // token and pass `1 - token_w` back to the patch embedding.
    let a = cache.token_w;
    let mut de = dx;
    for (r, &masked) in cache.mask_rows.iter().enumerate() {
        if masked {
            let mut row = de.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                grads.mask_token[j] += a * *v;
                *v *= 1.0 - a;
            }
        }
    }
    grads.patch_w += &cache.x_patches.t().dot(&de);
    grads.patch_b += &colsum(&de);
    grads
}

// ── loss ────────────────────────────────────────────────────────────────────

/// Which pixels the reconstruction loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScope {
    /// Mean absolute error over masked patches only (per sample), the
    /// masked-image-modeling objective.
    Masked,
    /// Mean absolute error over every pixel, used by the no-context
    /// supervised head where input and target are different images.
    All,
}

/// Sum over samples of the per-sample mean absolute error (see
/// [`LossScope`]).  Callers divide by their batch size.
pub fn output_loss(
    out: &Array2<f32>,
    targets: &Array2<f32>,
    masks: &[PatchMask],
    scope: LossScope,
) -> f64 {
    let n = masks[0].grid.len();
    let f = out.ncols();
    let mut total = 0.0f64;
    for (b, m) in masks.iter().enumerate() {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (i, &flag) in m.grid.iter().enumerate() {
            if scope == LossScope::All || flag {
                let r = b * n + i;
                let (orow, trow) = (out.row(r), targets.row(r));
                for j in 0..f {
                    sum += (orow[j] - trow[j]).abs() as f64;
                }
                count += f;
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    total
}

/// Gradient of `output_loss / (1 / inv_batch)` w.r.t. the forward output:
/// `sign(out - target) * inv_batch / (pixels counted for that sample)`.
/// Returns the loss sum (as [`output_loss`]) alongside.
pub fn output_loss_grad(
    out: &Array2<f32>,
    targets: &Array2<f32>,
    masks: &[PatchMask],
    scope: LossScope,
    inv_batch: f32,
) -> (f64, Array2<f32>) {
    let n = masks[0].grid.len();
    let f = out.ncols();
    let mut dout = Array2::zeros(out.dim());
    let mut total = 0.0f64;
    for (b, m) in masks.iter().enumerate() {
        let counted = match scope {
            LossScope::All => n * f,
            LossScope::Masked => m.num_masked() * f,
        };
        if counted == 0 {
            continue;
        }
        let w = inv_batch / counted as f32;
        let mut sum = 0.0f64;
        for (i, &flag) in m.grid.iter().enumerate() {
            if scope == LossScope::All || flag {
                let r = b * n + i;
                let (orow, trow) = (out.row(r), targets.row(r));
                let mut drow = dout.row_mut(r);
                for j in 0..f {
                    let e = orow[j] - trow[j];
                    sum += e.abs() as f64;
                    drow[j] = if e > 0.0 {
                        w
                    } else if e < 0.0 {
                        -w
                    } else {
                        0.0
                    };
                }
            }
        }
        total += sum / counted as f64;
    }
    (total, dout)
}

/// Forward + loss + full backward in one call.  Returns the *sum* of
/// per-sample losses (divide by the logical batch size) and gradients of
/// `loss_sum * inv_batch`; passing `inv_batch = 1 / B_total` makes gradient
/// accumulation across micro-batches exactly equal to full-batch math.
pub fn loss_grad_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    patches: &Array2<f32>,
    targets: &Array2<f32>,
    masks: &[PatchMask],
    mode: MaskMode,
    scope: LossScope,
    inv_batch: f32,
) -> Result<(f64, ModelParams)> {
    if targets.dim() != patches.dim() {
        return Err(Error::ShapeMismatch {
            context: "loss_grad_batch targets",
            expected: format!("{:?}", patches.dim()),
            actual: format!("{:?}", targets.dim()),
        });
    }
    let (out, cache) = forward_batch(params, cfg, patches, masks, mode, true)?;
    let (loss_sum, dout) = output_loss_grad(&out, targets, masks, scope, inv_batch);
    let grads = backward_batch(params, cfg, cache.as_ref().unwrap(), &dout);
    Ok((loss_sum, grads))
}

/// Forward + loss only (validation, finite-difference probes).
pub fn loss_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    patches: &Array2<f32>,
    targets: &Array2<f32>,
    masks: &[PatchMask],
    mode: MaskMode,
    scope: LossScope,
) -> Result<f64> {
    if targets.dim() != patches.dim() {
        return Err(Error::ShapeMismatch {
            context: "loss_batch targets",
            expected: format!("{:?}", patches.dim()),
            actual: format!("{:?}", targets.dim()),
        });
    }
    let (out, _) = forward_batch(params, cfg, patches, masks, mode, false)?;
    Ok(output_loss(&out, targets, masks, scope))
}

/// Element-wise `dst += scale * src` across all tensors (gradient
/// accumulation, optimizer support).
pub fn add_scaled(dst: &mut ModelParams, src: &ModelParams, scale: f32) {
    let srcs = src.tensors();
    for (d, s) in dst.tensors_mut().iter_mut().zip(srcs.iter()) {
        debug_assert_eq!(d.name, s.name);
        for (dv, &sv) in d.data.iter_mut().zip(s.data.iter()) {
            *dv += scale * sv;
        }
    }
}
