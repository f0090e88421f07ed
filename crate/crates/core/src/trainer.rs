//! Training loops: the in-context inpainting objective and the no-context
//! baseline, both driven by AdamW over exact gradients.
//!
//! Reproducibility is structural.  Every random decision — pairing rounds,
//! augmentation draws, patch masks, batch order — comes from its own named
//! stream keyed by `(base_seed, purpose, video, epoch, ordinal)`, never from
//! a shared sequential RNG.  Together with single-threaded matrix math and a
//! fixed micro-batch partition (gradients are accumulated across micro
//! batches and stepped once per batch, numerically identical to full-batch),
//! the same config on the same machine reproduces the same loss sequence
//! bit for bit.
//!
//! Model selection differs by objective: the in-context model keeps its
//! last-epoch weights (there is no validation pool under a tiny annotation
//! budget), while the baseline holds out a validation slice of its training
//! frames and keeps the best-validation-loss weights.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{compose_canvas, imagewise_augment, pairwise_expand, AugmentConfig};
use crate::dataset::{preprocess_frame, save_gray_png, Corpus, SplitManifest};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskMode, PatchMask};
use crate::model::{
    add_scaled, loss_batch, loss_grad_batch, patchify, save_checkpoint, CheckpointMeta, LossScope,
    Model, ModelConfig, ModelParams, Objective,
};
use crate::rng::{hash_str, stream_rng, Stream};

// ── configuration ───────────────────────────────────────────────────────────

/// Learning-rate schedule, applied per epoch as a factor on `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup then cosine decay to zero.
    Cosine { warmup_epochs: usize },
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { warmup_epochs } => {
                if epoch < warmup_epochs {
                    (epoch + 1) as f64 / warmup_epochs as f64
                } else {
                    let span = total_epochs.saturating_sub(warmup_epochs).max(1);
                    let p = (epoch - warmup_epochs) as f64 / span as f64;
                    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples processed per forward/backward slice.  Gradients accumulate
    /// across slices before each optimizer step, so this only trades memory
    /// for speed; a fixed value keeps runs reproducible.
    pub micro_batch: usize,
    /// Fraction of canvas patches masked during training.
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub augment: AugmentConfig,
    pub base_seed: u64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Parameter kinds excluded from weight decay (by
    /// [`crate::model::ParamKind`] name).
    pub weight_decay_exclude: Vec<String>,
    /// Save an intermediate checkpoint every so many epochs (needs a
    /// checkpoint directory in [`TrainOptions`]).
    pub checkpoint_every: Option<usize>,
    /// Validation share of the baseline's training frames.
    pub baseline_val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0005,
            weight_decay: 0.05,
            epochs: 1200,
            batch_size: 64,
            micro_batch: 16,
            mask_ratio: 0.6,
            mask_mode: MaskMode::Hard,
            augment: AugmentConfig::default(),
            base_seed: 42,
            lr_schedule: LrSchedule::Constant,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay_exclude: vec![
                "bias".into(),
                "norm".into(),
                "pos".into(),
                "token".into(),
            ],
            checkpoint_every: None,
            baseline_val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field, message: String| Err(Error::InvalidConfig { field, message });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("train.lr", format!("must be positive and finite, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("train.weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return err("train.epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return err("train.batch_size", "batch and micro batch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return err("train.mask_ratio", format!("must be in [0, 1], got {}", self.mask_ratio));
        }
        self.mask_mode.validate()?;
        self.augment.validate()?;
        for (field, b) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(field, format!("must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return err("train.adam_eps", format!("must be positive, got {}", self.adam_eps));
        }
        let known = ["weight", "bias", "norm", "pos", "token"];
        if let Some(bad) = self.weight_decay_exclude.iter().find(|k| !known.contains(&k.as_str())) {
            return err(
                "train.weight_decay_exclude",
                format!("unknown parameter kind {bad:?}, expected one of {known:?}"),
            );
        }
        if let Some(k) = self.checkpoint_every {
            if k == 0 {
                return err("train.checkpoint_every", "must be >= 1 when set".into());
            }
        }
        if !(self.baseline_val_fraction > 0.0 && self.baseline_val_fraction < 1.0) {
            return err(
                "train.baseline_val_fraction",
                format!("must be in (0, 1), got {}", self.baseline_val_fraction),
            );
        }
        Ok(())
    }
}

/// Side-effect knobs that don't alter the math.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Save the first micro-batch of composed canvases as PNGs (debugging).
    pub dump_canvas_dir: Option<PathBuf>,
    /// Where `checkpoint_every` snapshots go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Print a progress line to stderr every so many epochs.
    pub progress_every: Option<usize>,
}

// ── training log ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogMeta {
    pub objective: Objective,
    pub base_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub samples_per_epoch: usize,
    /// Tensors excluded from weight decay, resolved from config.
    pub no_decay_tensors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub samples: usize,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Meta(Box<LogMeta>),
    Epoch(EpochRecord),
}

/// Line-delimited training log: one meta line, then one line per epoch.
#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub meta: LogMeta,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let meta = LogLine::Meta(Box::new(self.meta.clone()));
        out.push_str(&serde_json::to_string(&meta).map_err(|e| Error::json(path, e))?);
        out.push('\n');
        for rec in &self.epochs {
            let line = LogLine::Epoch(rec.clone());
            out.push_str(&serde_json::to_string(&line).map_err(|e| Error::json(path, e))?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_ndjson(path: &Path) -> Result<TrainingLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut meta = None;
        let mut epochs = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<LogLine>(line).map_err(|e| Error::json(path, e))? {
                LogLine::Meta(m) => meta = Some(*m),
                LogLine::Epoch(e) => epochs.push(e),
            }
        }
        let meta = meta.ok_or_else(|| {
            Error::Dataset(format!("{}: training log has no meta line", path.display()))
        })?;
        Ok(TrainingLog { meta, epochs })
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
}

// ── optimizer ───────────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay; decay applies only to tensor kinds not
/// listed in `weight_decay_exclude`.
struct AdamW {
    m: ModelParams,
    v: ModelParams,
    t: i32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    decay: Vec<bool>,
}

impl AdamW {
    fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> AdamW {
        let zeros = ModelParams::zeros(model_cfg);
        let decay = zeros
            .tensors()
            .iter()
            .map(|t| !cfg.weight_decay_exclude.iter().any(|k| k == t.kind.as_str()))
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.adam_beta1 as f32,
            beta2: cfg.adam_beta2 as f32,
            eps: cfg.adam_eps as f32,
            decay,
        }
    }

    /// Tensor names that will not be decayed (for the log).
    fn no_decay_names(&self) -> Vec<String> {
        self.m
            .tensors()
            .iter()
            .zip(&self.decay)
            .filter(|(_, &d)| !d)
            .map(|(t, _)| t.name.clone())
            .collect()
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f32, wd: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let gs = grads.tensors();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for (ti, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = &gs[ti];
            debug_assert_eq!(p.name, g.name);
            let decay = if self.decay[ti] { wd } else { 0.0 };
            let m = &mut ms[ti];
            let v = &mut vs[ti];
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let p_old = p.data[i];
                p.data[i] = p_old - lr * (mhat / (vhat.sqrt() + eps) + decay * p_old);
            }
        }
    }
}

// ── preprocessed pools ──────────────────────────────────────────────────────

struct CellFrame {
    image: Array2<f32>,
    mask: Array2<f32>,
}

struct VideoPool {
    id_hash: u64,
    support_idx: Vec<usize>,
    query_idx: Vec<usize>,
    frames: BTreeMap<usize, CellFrame>,
}

/// Preprocesses every annotated frame of every video to `side x side` cells.
fn build_pools(corpus: &Corpus, split: &SplitManifest, side: usize) -> Result<Vec<VideoPool>> {
    split.validate(corpus)?;
    let mut pools = Vec::with_capacity(corpus.videos.len());
    for video in &corpus.videos {
        let vsplit = &split.videos[&video.video_id];
        let mut frames = BTreeMap::new();
        for &fi in vsplit.train.iter() {
            let frame = video.frame_by_index(fi).ok_or_else(|| {
                Error::Dataset(format!("video {:?}: frame {fi} missing", video.video_id))
            })?;
            let (image, mask, _) = preprocess_frame(frame, side);
            frames.insert(fi, CellFrame { image, mask });
        }
        pools.push(VideoPool {
            id_hash: hash_str(&video.video_id),
            support_idx: vsplit.support.clone(),
            query_idx: vsplit.query.clone(),
            frames,
        });
    }
    Ok(pools)
}

// ── shared epoch engine ─────────────────────────────────────────────────────

/// One training example, already at patch resolution.
struct Prepared {
    patches: Array2<f32>,
    target: Array2<f32>,
    mask: PatchMask,
}

/// Runs batches over prepared samples, accumulating micro-batch gradients
/// into one optimizer step per batch.  Returns the epoch's summed
/// per-sample loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch<I>(
    model: &mut Model,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    epoch: usize,
    order: &[I],
    prepare: &(dyn Fn(&I) -> Result<Prepared> + Sync),
    scope: LossScope,
    dump_dir: Option<&Path>,
) -> Result<f64>
where
    I: Sync,
{
    let n = model.cfg.num_patches();
    let f = model.cfg.patch_dim();
    let lr = (cfg.lr * cfg.lr_schedule.factor(epoch, cfg.epochs)) as f32;
    let wd = cfg.weight_decay as f32;
    let mut epoch_loss = 0.0f64;
    let mut first_dump = epoch == 0;

    for batch in order.chunks(cfg.batch_size) {
        let inv_b = 1.0 / batch.len() as f32;
        let mut grads = ModelParams::zeros(&model.cfg);
        let mut batch_loss = 0.0f64;
        for micro in batch.chunks(cfg.micro_batch) {
            let prepared: Vec<Prepared> = micro.par_iter().map(prepare).collect::<Result<_>>()?;
            if first_dump {
                if let Some(dir) = dump_dir {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    for (i, p) in prepared.iter().enumerate() {
                        let canvas = crate::model::unpatchify(&p.patches, model.cfg.patch)?;
                        save_gray_png(&dir.join(format!("canvas_{i:03}.png")), &canvas)?;
                    }
                }
                first_dump = false;
            }
            let mut patches = Array2::zeros((prepared.len() * n, f));
            let mut targets = Array2::zeros((prepared.len() * n, f));
            let mut masks = Vec::with_capacity(prepared.len());
            for (i, p) in prepared.into_iter().enumerate() {
                patches.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]).assign(&p.patches);
                targets.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]).assign(&p.target);
                masks.push(p.mask);
            }
            let (lsum, g) = loss_grad_batch(
                &model.params,
                &model.cfg,
                &patches,
                &targets,
                &masks,
                cfg.mask_mode,
                scope,
                inv_b,
            )?;
            batch_loss += lsum;
            add_scaled(&mut grads, &g, 1.0);
        }
        let mean = batch_loss / batch.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        opt.step(&mut model.params, &grads, lr, wd);
        epoch_loss += batch_loss;
    }
    Ok(epoch_loss)
}

fn maybe_checkpoint(
    model: &Model,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    objective: Objective,
    epoch: usize,
) -> Result<()> {
    if let (Some(every), Some(dir)) = (cfg.checkpoint_every, opts.checkpoint_dir.as_deref()) {
        if (epoch + 1) % every == 0 {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let meta = CheckpointMeta { epoch: epoch + 1, base_seed: cfg.base_seed, objective };
            save_checkpoint(&dir.join(format!("epoch_{:05}.ckpt", epoch + 1)), model, &meta)?;
        }
    }
    Ok(())
}

fn progress(opts: &TrainOptions, epoch: usize, total: usize, loss: f64) {
    if let Some(every) = opts.progress_every {
        if epoch % every == 0 || epoch + 1 == total {
            eprintln!("epoch {epoch:>5}/{total}  loss {loss:.6}");
        }
    }
}

// ── in-context objective ────────────────────────────────────────────────────

/// Reference to one pairwise-expanded sample within an epoch.
#[derive(Debug, PartialEq)]
struct IclSample {
    pool: usize,
    pair_ordinal: u64,
    support_frame: usize,
    query_frame: usize,
}

/// Derives an epoch's sample stream: per-video pairings drawn from the
/// epoch-keyed pairing stream, assembled in (video, pair index) order.  The
/// order is canonical — batches are carved from it as-is — so parallel
/// preparation cannot perturb results.
fn epoch_samples(
    pools: &[VideoPool],
    cfg: &TrainConfig,
    seed: u64,
    epoch_tag: u64,
) -> Result<Vec<IclSample>> {
    let mut samples = Vec::new();
    for (pi, pool) in pools.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Pairing, &[pool.id_hash, epoch_tag]);
        let pairs =
            pairwise_expand(&pool.support_idx, &pool.query_idx, cfg.augment.pairwise_n, &mut rng)?;
        for (p, (s, q)) in pairs.into_iter().enumerate() {
            samples.push(IclSample {
                pool: pi,
                pair_ordinal: p as u64,
                support_frame: s,
                query_frame: q,
            });
        }
    }
    Ok(samples)
}

/// Trains the canvas-inpainting model on a split corpus.  The returned model
/// carries the last epoch's weights.
pub fn train_icl(
    corpus: &Corpus,
    split: &SplitManifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    let pools = build_pools(corpus, split, model_cfg.cell())?;
    let mut model = Model::new(*model_cfg, cfg.base_seed)?;
    let mut opt = AdamW::new(model_cfg, cfg);
    let seed = cfg.base_seed;
    let n_patches = model_cfg.num_patches();

    let samples_per_epoch: usize =
        pools.iter().map(|p| cfg.augment.pairwise_n * p.query_idx.len()).sum();
    let meta = LogMeta {
        objective: Objective::CanvasInpainting,
        base_seed: seed,
        model: *model_cfg,
        train: cfg.clone(),
        samples_per_epoch,
        no_decay_tensors: opt.no_decay_names(),
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let epoch_tag = if cfg.augment.epochwise { epoch as u64 } else { 0 };
        let samples = epoch_samples(&pools, cfg, seed, epoch_tag)?;

        let prepare = |sref: &IclSample| -> Result<Prepared> {
            let pool = &pools[sref.pool];
            let s = &pool.frames[&sref.support_frame];
            let q = &pool.frames[&sref.query_frame];
            // Both sides key the same stream, so a draw (flip, crop window)
            // transforms support and query identically and the geometric
            // correspondence between the worked example and the query
            // survives augmentation.
            let key = [pool.id_hash, epoch_tag, sref.pair_ordinal];
            let mut rng_s = stream_rng(seed, Stream::Augment, &key);
            let mut rng_q = stream_rng(seed, Stream::Augment, &key);
            let (si, sm) = imagewise_augment(&s.image, &s.mask, &cfg.augment, &mut rng_s)?;
            let (qi, qm) = imagewise_augment(&q.image, &q.mask, &cfg.augment, &mut rng_q)?;
            let canvas = compose_canvas(&si, &sm, &qi, Some(&qm))?;
            let patches = patchify(&canvas, model_cfg.patch)?;
            // Patch masks refresh every epoch regardless of `epochwise`:
            // they are objective noise, not dataset augmentation.
            let mut rng_m = stream_rng(
                seed,
                Stream::PatchMask,
                &[pool.id_hash, sref.pair_ordinal, epoch as u64],
            );
            let mask = sample_mask(n_patches, cfg.mask_ratio, &mut rng_m)?;
            Ok(Prepared { target: patches.clone(), patches, mask })
        };

        let loss_sum = run_epoch(
            &mut model,
            &mut opt,
            cfg,
            epoch,
            &samples,
            &prepare,
            LossScope::Masked,
            opts.dump_canvas_dir.as_deref(),
        )?;
        let mean_loss = loss_sum / samples.len() as f64;
        progress(opts, epoch, cfg.epochs, mean_loss);
        epochs.push(EpochRecord {
            epoch,
            mean_loss,
            lr: cfg.lr * cfg.lr_schedule.factor(epoch, cfg.epochs),
            samples: samples.len(),
            wall_ms: t0.elapsed().as_millis() as u64,
            val_loss: None,
        });
        maybe_checkpoint(&model, cfg, opts, Objective::CanvasInpainting, epoch)?;
    }

    Ok(TrainOutcome { model, log: TrainingLog { meta, epochs } })
}

// ── no-context baseline ─────────────────────────────────────────────────────

struct BaselineSample {
    /// Position in the canonical (video_id, frame_index) ordering.
    ord: usize,
    id_hash: u64,
    frame_index: usize,
    /// Image and mask at full canvas resolution.
    image: Array2<f32>,
    mask: Array2<f32>,
}

/// Trains the query-only baseline: the same backbone regresses a frame's
/// mask from the frame alone (no support context, no patch masking, MAE over
/// all pixels).  Its annotated frames are split 80/20 into train/validation
/// and the best-validation-loss weights are returned.
pub fn train_baseline(
    corpus: &Corpus,
    split: &SplitManifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    split.validate(corpus)?;
    let seed = cfg.base_seed;
    let n_patches = model_cfg.num_patches();

    // The baseline consumes frames at canvas resolution (one image fills
    // what would otherwise be a four-cell canvas).
    let mut all = Vec::new();
    for video in &corpus.videos {
        let vsplit = &split.videos[&video.video_id];
        let id_hash = hash_str(&video.video_id);
        for &fi in &vsplit.train {
            let frame = video.frame_by_index(fi).ok_or_else(|| {
                Error::Dataset(format!("video {:?}: frame {fi} missing", video.video_id))
            })?;
            let (image, mask, _) = preprocess_frame(frame, model_cfg.canvas);
            let ord = all.len();
            all.push(BaselineSample { ord, id_hash, frame_index: fi, image, mask });
        }
    }
    if all.len() < 2 {
        return Err(Error::Dataset(format!(
            "baseline needs at least 2 annotated frames, got {}",
            all.len()
        )));
    }
    all.shuffle(&mut stream_rng(seed, Stream::Baseline, &[]));
    let val_count = ((cfg.baseline_val_fraction * all.len() as f64).round() as usize)
        .clamp(1, all.len() - 1);
    let val: Vec<BaselineSample> = all.drain(..val_count).collect();
    let mut train = all;
    train.sort_by_key(|s| s.ord);

    let mut model = Model::new(*model_cfg, seed)?;
    let mut opt = AdamW::new(model_cfg, cfg);
    let meta = LogMeta {
        objective: Objective::QueryOnly,
        base_seed: seed,
        model: *model_cfg,
        train: cfg.clone(),
        samples_per_epoch: train.len(),
        no_decay_tensors: opt.no_decay_names(),
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);

    // Validation set at patch resolution, fixed across epochs (no
    // augmentation: selection should measure the task, not the noise).
    let f = model_cfg.patch_dim();
    let mut val_patches = Array2::zeros((val.len() * n_patches, f));
    let mut val_targets = Array2::zeros((val.len() * n_patches, f));
    let val_masks: Vec<PatchMask> = val.iter().map(|_| PatchMask::none(n_patches)).collect();
    for (i, s) in val.iter().enumerate() {
        let rows = ndarray::s![i * n_patches..(i + 1) * n_patches, ..];
        val_patches.slice_mut(rows).assign(&patchify(&s.image, model_cfg.patch)?);
        val_targets.slice_mut(rows).assign(&patchify(&s.mask, model_cfg.patch)?);
    }

    let mut best: Option<(f64, ModelParams)> = None;
    // Canonical batch order: by (video_id, frame_index), same every epoch.
    let order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let epoch_tag = if cfg.augment.epochwise { epoch as u64 } else { 0 };

        let prepare = |idx: &usize| -> Result<Prepared> {
            let s = &train[*idx];
            let mut rng = stream_rng(
                seed,
                Stream::Augment,
                &[s.id_hash, s.frame_index as u64, epoch_tag],
            );
            let (img, msk) = imagewise_augment(&s.image, &s.mask, &cfg.augment, &mut rng)?;
            Ok(Prepared {
                patches: patchify(&img, model_cfg.patch)?,
                target: patchify(&msk, model_cfg.patch)?,
                mask: PatchMask::none(n_patches),
            })
        };

        let loss_sum = run_epoch(
            &mut model,
            &mut opt,
            cfg,
            epoch,
            &order,
            &prepare,
            LossScope::All,
            opts.dump_canvas_dir.as_deref(),
        )?;
        let mean_loss = loss_sum / train.len() as f64;

        let val_sum = loss_batch(
            &model.params,
            &model.cfg,
            &val_patches,
            &val_targets,
            &val_masks,
            cfg.mask_mode,
            LossScope::All,
        )?;
        let val_loss = val_sum / val.len() as f64;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone()));
        }

        progress(opts, epoch, cfg.epochs, mean_loss);
        epochs.push(EpochRecord {
            epoch,
            mean_loss,
            lr: cfg.lr * cfg.lr_schedule.factor(epoch, cfg.epochs),
            samples: train.len(),
            wall_ms: t0.elapsed().as_millis() as u64,
            val_loss: Some(val_loss),
        });
        maybe_checkpoint(&model, cfg, opts, Objective::QueryOnly, epoch)?;
    }

    let (_, best_params) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainOutcome { model, log: TrainingLog { meta, epochs } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_corpus;
    use crate::synthgen::{generate, SynthConfig};

    fn tiny_corpus() -> Corpus {
        let cfg = SynthConfig {
            num_videos: 2,
            frames_per_video: 8,
            frame_size: 32,
            thickness_min: 5.0,
            thickness_max: 7.0,
            amplitude_min: 0.5,
            amplitude_max: 1.0,
            ..SynthConfig::default()
        };
        generate(&cfg, 1234).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig { canvas: 32, patch: 8, embed: 32, depth: 2, heads: 2, channels: 1 }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            micro_batch: 4,
            augment: AugmentConfig { pairwise_n: 2, ..AugmentConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_factors() {
        let c = LrSchedule::Constant;
        assert_eq!(c.factor(0, 100), 1.0);
        assert_eq!(c.factor(99, 100), 1.0);
        let w = LrSchedule::Cosine { warmup_epochs: 10 };
        assert!((w.factor(0, 100) - 0.1).abs() < 1e-12, "warmup ramps from 1/10");
        assert_eq!(w.factor(9, 100), 1.0, "warmup ends at full rate");
        assert!(w.factor(99, 100) < 0.01, "cosine decays toward zero");
    }

    #[test]
    fn epochwise_pairings_differ_across_epochs() {
        // Larger pools so a pairing collision across all epochs is
        // vanishingly unlikely.
        let cfg = SynthConfig {
            num_videos: 1,
            frames_per_video: 24,
            frame_size: 32,
            thickness_min: 5.0,
            thickness_max: 7.0,
            amplitude_min: 0.5,
            amplitude_max: 1.0,
            ..SynthConfig::default()
        };
        let corpus = generate(&cfg, 3).unwrap();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let pools = build_pools(&corpus, &split, 16).unwrap();
        let tcfg = tiny_train(1);
        let per_epoch: Vec<Vec<IclSample>> = (0..5)
            .map(|e| epoch_samples(&pools, &tcfg, 42, e).unwrap())
            .collect();
        assert!(
            per_epoch.windows(2).any(|w| w[0] != w[1]),
            "epoch-keyed pairing streams must re-pair across epochs"
        );
        // Query frames and their order are fixed; only supports change.
        for s in &per_epoch {
            let queries: Vec<usize> = s.iter().map(|x| x.query_frame).collect();
            let first: Vec<usize> = per_epoch[0].iter().map(|x| x.query_frame).collect();
            assert_eq!(queries, first);
        }
    }

    #[test]
    fn disabled_augmentation_freezes_the_sample_stream() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let pools = build_pools(&corpus, &split, 16).unwrap();
        let tcfg = TrainConfig {
            augment: AugmentConfig {
                pairwise_n: 1,
                imagewise_ratio: 0.0,
                epochwise: false,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        };
        // With epochwise off, every epoch derives its samples from tag 0:
        // the stream collapses to the fixed m pairs.
        let tag = 0;
        let a = epoch_samples(&pools, &tcfg, 42, tag).unwrap();
        let b = epoch_samples(&pools, &tcfg, 42, tag).unwrap();
        assert_eq!(a, b);
        let m: usize = split.videos.values().map(|v| v.query.len()).sum();
        assert_eq!(a.len(), m, "pairwise_n=1 yields exactly one pair per query");
    }

    #[test]
    fn icl_training_decreases_loss_and_logs() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let out = train_icl(&corpus, &split, &tiny_model(), &tiny_train(12), &TrainOptions::default())
            .unwrap();
        assert_eq!(out.log.epochs.len(), 12);
        // 2 videos, |train| = 4 each => 2 query frames, times pairwise 2.
        assert_eq!(out.log.meta.samples_per_epoch, 8);
        let first = out.log.epochs.first().unwrap().mean_loss;
        let last = out.log.epochs.last().unwrap().mean_loss;
        assert!(last < first, "loss should fall: {first} -> {last}");
        assert!(out.log.epochs.iter().all(|e| e.mean_loss.is_finite()));
        assert!(
            out.log.meta.no_decay_tensors.iter().any(|n| n == "mask_token"),
            "default exclusions must cover the mask token"
        );
    }

    #[test]
    fn icl_training_is_bitwise_reproducible() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let cfg = tiny_train(3);
        let a = train_icl(&corpus, &split, &tiny_model(), &cfg, &TrainOptions::default()).unwrap();
        let b = train_icl(&corpus, &split, &tiny_model(), &cfg, &TrainOptions::default()).unwrap();
        for (ea, eb) in a.log.epochs.iter().zip(&b.log.epochs) {
            assert_eq!(
                ea.mean_loss.to_bits(),
                eb.mean_loss.to_bits(),
                "epoch {} loss must be bit-identical",
                ea.epoch
            );
        }
        let pa = a.model.params.tensors();
        let pb = b.model.params.tensors();
        for (ta, tb) in pa.iter().zip(pb.iter()) {
            assert_eq!(ta.data, tb.data, "{} must be bit-identical", ta.name);
        }
    }

    #[test]
    fn micro_batch_partition_does_not_change_results() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let base = tiny_train(2);
        let whole = TrainConfig { micro_batch: 64, ..base.clone() };
        let a = train_icl(&corpus, &split, &tiny_model(), &base, &TrainOptions::default()).unwrap();
        let b = train_icl(&corpus, &split, &tiny_model(), &whole, &TrainOptions::default()).unwrap();
        // Same batches, same math; only the accumulation grouping differs.
        // f32 summation order within a batch is unchanged because each
        // sample's gradient contribution is computed per-sample and added
        // tensor-wise in order.
        for (ea, eb) in a.log.epochs.iter().zip(&b.log.epochs) {
            assert!(
                (ea.mean_loss - eb.mean_loss).abs() < 1e-6,
                "micro batching changed the loss: {} vs {}",
                ea.mean_loss,
                eb.mean_loss
            );
        }
    }

    #[test]
    fn baseline_trains_selects_on_validation_and_logs() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let out = train_baseline(
            &corpus,
            &split,
            &tiny_model(),
            &tiny_train(10),
            &TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(out.log.meta.objective, Objective::QueryOnly);
        // 8 annotated frames total, 20% val => 2 val, 6 train.
        assert_eq!(out.log.meta.samples_per_epoch, 6);
        assert!(out.log.epochs.iter().all(|e| e.val_loss.is_some()));
        let first = out.log.epochs.first().unwrap().mean_loss;
        let last = out.log.epochs.last().unwrap().mean_loss;
        assert!(last < first, "baseline loss should fall: {first} -> {last}");
    }

    #[test]
    fn training_log_round_trips_ndjson() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let out = train_icl(&corpus, &split, &tiny_model(), &tiny_train(2), &TrainOptions::default())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train_log.ndjson");
        out.log.write_ndjson(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3, "meta line + one line per epoch");
        assert!(text.lines().next().unwrap().contains("\"meta\""));
        let loaded = TrainingLog::read_ndjson(&path).unwrap();
        assert_eq!(loaded.epochs.len(), 2);
        assert_eq!(loaded.meta.samples_per_epoch, out.log.meta.samples_per_epoch);
        assert_eq!(
            loaded.epochs[1].mean_loss.to_bits(),
            out.log.epochs[1].mean_loss.to_bits()
        );
    }

    #[test]
    fn dump_canvas_writes_first_micro_batch() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            dump_canvas_dir: Some(dir.path().join("canvases")),
            ..TrainOptions::default()
        };
        train_icl(&corpus, &split, &tiny_model(), &tiny_train(1), &opts).unwrap();
        let count = std::fs::read_dir(dir.path().join("canvases")).unwrap().count();
        assert_eq!(count, 4, "one PNG per sample of the first micro batch");
    }

    #[test]
    fn checkpoint_every_writes_snapshots() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.5, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: Some(2), ..tiny_train(4) };
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        train_icl(&corpus, &split, &tiny_model(), &cfg, &opts).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, vec!["epoch_00002.ckpt", "epoch_00004.ckpt"]);
        let (m, meta) = crate::model::load_checkpoint(&dir.path().join("epoch_00004.ckpt")).unwrap();
        assert_eq!(meta.epoch, 4);
        assert_eq!(m.cfg, tiny_model());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { mask_ratio: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { adam_beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(
            TrainConfig { weight_decay_exclude: vec!["blah".into()], ..TrainConfig::default() }
                .validate()
                .is_err()
        );
        assert!(TrainConfig { checkpoint_every: Some(0), ..TrainConfig::default() }
            .validate()
            .is_err());
    }
}
