//! Prediction and evaluation: inpaint the blank query-output quadrant for an
//! unlabeled frame and score predictions against ground truth.
//!
//! A prediction composes the support pair with the query image (query-output
//! quadrant all zeros), optionally replaces a fraction of input patches at
//! `test_mask_ratio` (zero by default — the model performs best with little
//! or no test-time masking), runs the forward pass, extracts the
//! bottom-right quadrant, clamps it to `[0, 1]`, thresholds it, and inverts
//! the resize/padding so the binary mask lands in the query frame's original
//! coordinates.
//!
//! Evaluation pairs every held-out frame of a video with its nearest
//! annotated support frame, batches the forward passes, and aggregates DSC
//! and IoU per frame, per video, and corpus-wide (frame-weighted mean).
//! Per-frame failures are recorded with their frame identity and evaluation
//! continues.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{compose_canvas, extract_query_output};
use crate::dataset::{
    invert_preprocess, nearest_support, preprocess_frame, Corpus, Frame, PadRecord, SplitManifest,
    VideoSweep,
};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskMode, PatchMask};
use crate::metrics::{dsc, iou};
use crate::model::{forward_batch, patchify, unpatchify, Model};
use crate::rng::{hash_str, stream_rng, Stream};

// ── options ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Fraction of canvas patches replaced by the mask token at test time.
    pub test_mask_ratio: f64,
    /// Foreground cutoff applied to the clamped raw quadrant.
    pub threshold: f64,
    /// How masked patches are substituted when `test_mask_ratio > 0`.
    pub mask_mode: MaskMode,
    /// Seeds the test-time mask draw (unused at ratio 0).
    pub seed: u64,
    /// Score predictions in original frame coordinates (inverting padding
    /// and resize); when false, score at cell resolution instead.
    pub original_resolution: bool,
    /// Frames per batched forward pass during evaluation.
    pub micro_batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            test_mask_ratio: 0.0,
            threshold: 0.5,
            mask_mode: MaskMode::Hard,
            seed: 42,
            original_resolution: true,
            micro_batch: 16,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        let err = |field, message: String| Err(Error::InvalidConfig { field, message });
        if !(0.0..=1.0).contains(&self.test_mask_ratio) {
            return err(
                "eval.test_mask_ratio",
                format!("must be in [0, 1], got {}", self.test_mask_ratio),
            );
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return err("eval.threshold", format!("must be in [0, 1], got {}", self.threshold));
        }
        self.mask_mode.validate()?;
        if self.micro_batch == 0 {
            return err("eval.micro_batch", "must be >= 1".into());
        }
        Ok(())
    }
}

// ── single-frame prediction ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PredictionResult {
    /// Binary mask in the query frame's original coordinates.
    pub mask: Array2<f32>,
    /// Clamped, unthresholded query-output quadrant (cell resolution).
    pub raw_quadrant: Array2<f32>,
    /// Support frame paired with the query.
    pub support_frame: usize,
    pub test_mask_ratio: f64,
}

fn check_nonempty(name: &'static str, a: &Array2<f32>) -> Result<()> {
    if a.dim().0 == 0 || a.dim().1 == 0 {
        return Err(Error::ShapeMismatch {
            context: name,
            expected: "non-empty 2-d image".into(),
            actual: format!("{}x{}", a.dim().0, a.dim().1),
        });
    }
    Ok(())
}

/// Forward a batch of composed canvases and return each clamped
/// query-output quadrant.
fn predict_quadrants(
    model: &Model,
    canvases: &[Array2<f32>],
    masks: &[PatchMask],
    mode: MaskMode,
) -> Result<Vec<Array2<f32>>> {
    let n = model.cfg.num_patches();
    let f = model.cfg.patch_dim();
    let mut patches = Array2::zeros((canvases.len() * n, f));
    for (i, canvas) in canvases.iter().enumerate() {
        patches
            .slice_mut(ndarray::s![i * n..(i + 1) * n, ..])
            .assign(&patchify(canvas, model.cfg.patch)?);
    }
    let (out, _) = forward_batch(&model.params, &model.cfg, &patches, masks, mode, false)?;
    let mut quadrants = Vec::with_capacity(canvases.len());
    for i in 0..canvases.len() {
        let rows = out.slice(ndarray::s![i * n..(i + 1) * n, ..]).to_owned();
        let canvas = unpatchify(&rows, model.cfg.patch)?;
        let mut q = extract_query_output(&canvas)?;
        q.mapv_inplace(|v| v.clamp(0.0, 1.0));
        quadrants.push(q);
    }
    Ok(quadrants)
}

/// Binarizes a raw prediction: values at or above `threshold` become 1.
pub fn threshold_mask(raw: &Array2<f32>, threshold: f64) -> Array2<f32> {
    raw.mapv(|v| if v as f64 >= threshold { 1.0 } else { 0.0 })
}

/// Restore a cell-resolution binary mask to original frame coordinates.
fn to_original(
    cell_mask: &Array2<f32>,
    record: &PadRecord,
    orig_h: usize,
    orig_w: usize,
) -> Result<Array2<f32>> {
    invert_preprocess(cell_mask, record, orig_h, orig_w)
}

/// Segments one unlabeled query image given an annotated support frame.
///
/// The test-time mask draw (when `test_mask_ratio > 0`) is keyed by
/// `(opts.seed, support frame index)`, so identical inputs always produce
/// identical results.
pub fn predict_frame(
    model: &Model,
    support: &Frame,
    query_image: &Array2<f32>,
    opts: &EvalOptions,
) -> Result<PredictionResult> {
    opts.validate()?;
    check_nonempty("predict_frame support image", &support.image)?;
    check_nonempty("predict_frame query image", query_image)?;
    let cell = model.cfg.cell();
    let (s_img, s_mask, _) = preprocess_frame(support, cell);
    let query = Frame {
        frame_index: 0,
        image: query_image.clone(),
        mask: Array2::zeros(query_image.dim()),
    };
    let (q_img, _, record) = preprocess_frame(&query, cell);
    let canvas = compose_canvas(&s_img, &s_mask, &q_img, None)?;

    let n = model.cfg.num_patches();
    let mask = if opts.test_mask_ratio > 0.0 {
        let mut rng = stream_rng(opts.seed, Stream::Eval, &[support.frame_index as u64]);
        sample_mask(n, opts.test_mask_ratio, &mut rng)?
    } else {
        PatchMask::none(n)
    };

    let raw = predict_quadrants(model, &[canvas], &[mask], opts.mask_mode)?.pop().unwrap();
    let cell_mask = threshold_mask(&raw, opts.threshold);
    let (h, w) = query_image.dim();
    let mask = to_original(&cell_mask, &record, h, w)?;
    Ok(PredictionResult {
        mask,
        raw_quadrant: raw,
        support_frame: support.frame_index,
        test_mask_ratio: opts.test_mask_ratio,
    })
}

// ── evaluation report ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEval {
    pub video_id: String,
    pub frame_index: usize,
    /// Paired support frame; absent for the no-context baseline.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub support_index: Option<usize>,
    pub dsc: f64,
    pub iou: f64,
    pub gt_empty: bool,
    pub pred_empty: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEval {
    pub video_id: String,
    pub frames: usize,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub empty_gt_frames: usize,
    pub empty_pred_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalFailure {
    pub video_id: String,
    pub frame_index: usize,
    pub message: String,
}

/// Scores for one evaluation run.  The corpus means weight every frame
/// equally (frame-weighted, not video-weighted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_mask_ratio: f64,
    pub threshold: f64,
    pub original_resolution: bool,
    pub total_frames: usize,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub empty_gt_frames: usize,
    pub empty_pred_frames: usize,
    pub videos: Vec<VideoEval>,
    pub frames: Vec<FrameEval>,
    pub failures: Vec<EvalFailure>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

// ── evaluation ──────────────────────────────────────────────────────────────

struct FrameJob<'a> {
    video: &'a VideoSweep,
    id_hash: u64,
    support: &'a Frame,
    query: &'a Frame,
}

fn build_jobs<'a>(corpus: &'a Corpus, split: &SplitManifest) -> Result<Vec<FrameJob<'a>>> {
    split.validate(corpus)?;
    let mut jobs = Vec::new();
    for video in &corpus.videos {
        let vsplit = &split.videos[&video.video_id];
        let id_hash = hash_str(&video.video_id);
        for &t in &vsplit.test {
            let s = nearest_support(t, &vsplit.support)?;
            let support = video.frame_by_index(s).ok_or_else(|| {
                Error::Dataset(format!("video {:?}: support frame {s} missing", video.video_id))
            })?;
            let query = video.frame_by_index(t).ok_or_else(|| {
                Error::Dataset(format!("video {:?}: test frame {t} missing", video.video_id))
            })?;
            jobs.push(FrameJob { video, id_hash, support, query });
        }
    }
    if jobs.is_empty() {
        return Err(Error::Dataset("no test frames to evaluate".into()));
    }
    Ok(jobs)
}

fn score(
    job: &FrameJob,
    support_index: Option<usize>,
    pred: &Array2<f32>,
    gt: &Array2<f32>,
) -> Result<FrameEval> {
    Ok(FrameEval {
        video_id: job.video.video_id.clone(),
        frame_index: job.query.frame_index,
        support_index,
        dsc: dsc(pred, gt)?,
        iou: iou(pred, gt)?,
        gt_empty: gt.iter().all(|&v| v < 0.5),
        pred_empty: pred.iter().all(|&v| v < 0.5),
    })
}

fn aggregate(
    opts: &EvalOptions,
    mut frames: Vec<FrameEval>,
    mut failures: Vec<EvalFailure>,
) -> EvalReport {
    frames.sort_by(|a, b| (&a.video_id, a.frame_index).cmp(&(&b.video_id, b.frame_index)));
    failures.sort_by(|a, b| (&a.video_id, a.frame_index).cmp(&(&b.video_id, b.frame_index)));
    let mut by_video: BTreeMap<&str, Vec<&FrameEval>> = BTreeMap::new();
    for f in &frames {
        by_video.entry(&f.video_id).or_default().push(f);
    }
    let videos = by_video
        .into_iter()
        .map(|(vid, fs)| VideoEval {
            video_id: vid.to_string(),
            frames: fs.len(),
            mean_dsc: fs.iter().map(|f| f.dsc).sum::<f64>() / fs.len() as f64,
            mean_iou: fs.iter().map(|f| f.iou).sum::<f64>() / fs.len() as f64,
            empty_gt_frames: fs.iter().filter(|f| f.gt_empty).count(),
            empty_pred_frames: fs.iter().filter(|f| f.pred_empty).count(),
        })
        .collect();
    let total = frames.len();
    let denom = total.max(1) as f64;
    EvalReport {
        test_mask_ratio: opts.test_mask_ratio,
        threshold: opts.threshold,
        original_resolution: opts.original_resolution,
        total_frames: total,
        mean_dsc: frames.iter().map(|f| f.dsc).sum::<f64>() / denom,
        mean_iou: frames.iter().map(|f| f.iou).sum::<f64>() / denom,
        empty_gt_frames: frames.iter().filter(|f| f.gt_empty).count(),
        empty_pred_frames: frames.iter().filter(|f| f.pred_empty).count(),
        videos,
        frames,
        failures,
    }
}

/// Evaluates the model over every held-out frame of the split: each test
/// frame is paired with its nearest support frame, predicted in micro
/// batches, and scored against ground truth.
///
/// Test-time mask draws are keyed per frame by
/// `(opts.seed, video id hash, frame index)`.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    split: &SplitManifest,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.validate()?;
    let jobs = build_jobs(corpus, split)?;
    let cell = model.cfg.cell();
    let n = model.cfg.num_patches();

    let mut frames = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    for chunk in jobs.chunks(opts.micro_batch) {
        // Composition can fail per frame; keep the good ones and record the
        // rest so one bad frame does not abort the run.
        let prepared: Vec<(usize, Result<(Array2<f32>, PatchMask, Array2<f32>, PadRecord)>)> =
            chunk
                .par_iter()
                .enumerate()
                .map(|(i, job)| {
                    let built = (|| {
                        let (s_img, s_mask, _) = preprocess_frame(job.support, cell);
                        let (q_img, q_mask, record) = preprocess_frame(job.query, cell);
                        let canvas = compose_canvas(&s_img, &s_mask, &q_img, None)?;
                        let mask = if opts.test_mask_ratio > 0.0 {
                            let mut rng = stream_rng(
                                opts.seed,
                                Stream::Eval,
                                &[job.id_hash, job.query.frame_index as u64],
                            );
                            sample_mask(n, opts.test_mask_ratio, &mut rng)?
                        } else {
                            PatchMask::none(n)
                        };
                        Ok((canvas, mask, q_mask, record))
                    })();
                    (i, built)
                })
                .collect();

        let mut canvases = Vec::new();
        let mut masks = Vec::new();
        let mut kept = Vec::new();
        for (i, built) in prepared {
            match built {
                Ok((canvas, mask, q_mask, record)) => {
                    canvases.push(canvas);
                    masks.push(mask);
                    kept.push((i, q_mask, record));
                }
                Err(e) => failures.push(EvalFailure {
                    video_id: chunk[i].video.video_id.clone(),
                    frame_index: chunk[i].query.frame_index,
                    message: e.to_string(),
                }),
            }
        }
        if canvases.is_empty() {
            continue;
        }
        let quadrants = predict_quadrants(model, &canvases, &masks, opts.mask_mode)?;
        for ((i, q_mask, record), raw) in kept.into_iter().zip(quadrants) {
            let job = &chunk[i];
            let support = Some(job.support.frame_index);
            let cell_mask = threshold_mask(&raw, opts.threshold);
            let scored = if opts.original_resolution {
                let (h, w) = job.query.image.dim();
                to_original(&cell_mask, &record, h, w)
                    .and_then(|pred| score(job, support, &pred, &job.query.mask))
            } else {
                score(job, support, &cell_mask, &q_mask)
            };
            match scored {
                Ok(fe) => frames.push(fe),
                Err(e) => failures.push(EvalFailure {
                    video_id: job.video.video_id.clone(),
                    frame_index: job.query.frame_index,
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(aggregate(opts, frames, failures))
}

/// Evaluation seam for testing the aggregation plumbing: `predict` maps a
/// (support, query) pair to a binary mask in the query frame's original
/// coordinates.
pub fn evaluate_with<F>(
    predict: F,
    corpus: &Corpus,
    split: &SplitManifest,
    opts: &EvalOptions,
) -> Result<EvalReport>
where
    F: Fn(&Frame, &Frame) -> Result<Array2<f32>> + Sync,
{
    opts.validate()?;
    let jobs = build_jobs(corpus, split)?;
    let results: Vec<std::result::Result<FrameEval, EvalFailure>> = jobs
        .par_iter()
        .map(|job| {
            predict(job.support, job.query)
                .and_then(|pred| score(job, Some(job.support.frame_index), &pred, &job.query.mask))
                .map_err(|e| EvalFailure {
                    video_id: job.video.video_id.clone(),
                    frame_index: job.query.frame_index,
                    message: e.to_string(),
                })
        })
        .collect();
    let mut frames = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(f) => frames.push(f),
            Err(f) => failures.push(f),
        }
    }
    Ok(aggregate(opts, frames, failures))
}

/// Evaluates a no-context model over the same held-out frames: the query
/// image alone, preprocessed to full canvas resolution, is the input and the
/// whole output canvas is read as the predicted mask.  No patches are ever
/// masked and no support frame is involved, so `test_mask_ratio` is ignored.
pub fn evaluate_query_only(
    model: &Model,
    corpus: &Corpus,
    split: &SplitManifest,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.validate()?;
    let jobs = build_jobs(corpus, split)?;
    let side = model.cfg.canvas;
    let n = model.cfg.num_patches();
    let f = model.cfg.patch_dim();

    let mut frames = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    for chunk in jobs.chunks(opts.micro_batch) {
        let mut patches = Array2::zeros((chunk.len() * n, f));
        let mut records = Vec::with_capacity(chunk.len());
        for (i, job) in chunk.iter().enumerate() {
            let (q_img, q_mask, record) = preprocess_frame(job.query, side);
            patches
                .slice_mut(ndarray::s![i * n..(i + 1) * n, ..])
                .assign(&patchify(&q_img, model.cfg.patch)?);
            records.push((q_mask, record));
        }
        let masks: Vec<PatchMask> = (0..chunk.len()).map(|_| PatchMask::none(n)).collect();
        let (out, _) =
            forward_batch(&model.params, &model.cfg, &patches, &masks, opts.mask_mode, false)?;
        for (i, (q_mask, record)) in records.into_iter().enumerate() {
            let job = &chunk[i];
            let rows = out.slice(ndarray::s![i * n..(i + 1) * n, ..]).to_owned();
            let scored = unpatchify(&rows, model.cfg.patch).and_then(|mut raw| {
                raw.mapv_inplace(|v| v.clamp(0.0, 1.0));
                let pred_side = threshold_mask(&raw, opts.threshold);
                if opts.original_resolution {
                    let (h, w) = job.query.image.dim();
                    let pred = to_original(&pred_side, &record, h, w)?;
                    score(job, None, &pred, &job.query.mask)
                } else {
                    score(job, None, &pred_side, &q_mask)
                }
            });
            match scored {
                Ok(fe) => frames.push(fe),
                Err(e) => failures.push(EvalFailure {
                    video_id: job.video.video_id.clone(),
                    frame_index: job.query.frame_index,
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(aggregate(opts, frames, failures))
}

// ── overlays ────────────────────────────────────────────────────────────────

/// Writes the query image with the predicted mask's contour burned in as
/// white pixels (a contour pixel is a foreground pixel with a background
/// 4-neighbor or at the border).
pub fn save_overlay_png(path: &Path, image: &Array2<f32>, mask: &Array2<f32>) -> Result<()> {
    if image.dim() != mask.dim() {
        return Err(Error::ShapeMismatch {
            context: "save_overlay_png",
            expected: format!("{:?}", image.dim()),
            actual: format!("{:?}", mask.dim()),
        });
    }
    let (h, w) = image.dim();
    let fg = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            return false;
        }
        mask[(y as usize, x as usize)] >= 0.5
    };
    let mut out = image.clone();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let contour = fg(y, x)
                && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1));
            if contour {
                out[(y as usize, x as usize)] = 1.0;
            }
        }
    }
    crate::dataset::save_gray_png(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_corpus;
    use crate::model::ModelConfig;
    use crate::synthgen::{generate, SynthConfig};

    fn tiny_corpus() -> Corpus {
        let cfg = SynthConfig {
            num_videos: 2,
            frames_per_video: 10,
            frame_size: 32,
            thickness_min: 5.0,
            thickness_max: 7.0,
            amplitude_min: 0.5,
            amplitude_max: 1.0,
            ..SynthConfig::default()
        };
        generate(&cfg, 99).unwrap()
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig { canvas: 32, patch: 8, embed: 32, depth: 2, heads: 2, channels: 1 };
        Model::new(cfg, 5).unwrap()
    }

    #[test]
    fn predict_frame_matches_query_shape_for_any_geometry() {
        let model = tiny_model();
        let opts = EvalOptions::default();
        for (h, w) in [(32, 32), (17, 40), (40, 17), (9, 9)] {
            let support = Frame {
                frame_index: 3,
                image: Array2::from_elem((h, w), 0.4),
                mask: Array2::zeros((h, w)),
            };
            let query = Array2::from_elem((h, w), 0.6);
            let pred = predict_frame(&model, &support, &query, &opts).unwrap();
            assert_eq!(pred.mask.dim(), (h, w));
            assert_eq!(pred.raw_quadrant.dim(), (16, 16));
            assert!(pred.mask.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(pred.raw_quadrant.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn predict_frame_is_deterministic() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let video = &corpus.videos[0];
        let opts = EvalOptions { test_mask_ratio: 0.4, ..EvalOptions::default() };
        let a = predict_frame(&model, &video.frames[0], &video.frames[5].image, &opts).unwrap();
        let b = predict_frame(&model, &video.frames[0], &video.frames[5].image, &opts).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.raw_quadrant, b.raw_quadrant);
        assert_eq!(a.support_frame, 0);
        assert_eq!(a.test_mask_ratio, 0.4);
    }

    #[test]
    fn ratio_zero_leaves_input_patches_unmasked() {
        // At ratio 0 the mask mode cannot matter: no token is substituted.
        let model = tiny_model();
        let corpus = tiny_corpus();
        let video = &corpus.videos[0];
        let hard = EvalOptions::default();
        let soft = EvalOptions {
            mask_mode: crate::masking::MaskMode::Soft { y: 30.0 },
            ..EvalOptions::default()
        };
        let a = predict_frame(&model, &video.frames[0], &video.frames[5].image, &hard).unwrap();
        let b = predict_frame(&model, &video.frames[0], &video.frames[5].image, &soft).unwrap();
        assert_eq!(a.raw_quadrant, b.raw_quadrant);
    }

    #[test]
    fn thresholding_splits_at_cutoff() {
        let raw = ndarray::array![[0.9f32, 0.49], [0.5, 0.0]];
        let t = threshold_mask(&raw, 0.5);
        assert_eq!(t, ndarray::array![[1.0f32, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.3, 11).unwrap();
        let report = evaluate_with(
            |_support, query| Ok(query.mask.clone()),
            &corpus,
            &split,
            &EvalOptions::default(),
        )
        .unwrap();
        let expected: usize = split.videos.values().map(|v| v.test.len()).sum();
        assert_eq!(report.total_frames, expected);
        assert_eq!(report.mean_dsc, 1.0);
        assert_eq!(report.mean_iou, 1.0);
        assert!(report.failures.is_empty());
        for v in &report.videos {
            assert_eq!(v.mean_dsc, 1.0);
        }
        // Every frame satisfies the DSC–IoU identity.
        for f in &report.frames {
            assert!((f.dsc - 2.0 * f.iou / (1.0 + f.iou)).abs() < 1e-12);
        }
    }

    #[test]
    fn failures_are_recorded_and_evaluation_continues() {
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.3, 11).unwrap();
        let bad_frame = split.videos[&corpus.videos[0].video_id].test[0];
        let bad_video = corpus.videos[0].video_id.clone();
        let report = evaluate_with(
            |_support, query| {
                if query.frame_index == bad_frame {
                    Err(Error::Dataset("injected failure".into()))
                } else {
                    Ok(query.mask.clone())
                }
            },
            &corpus,
            &split,
            &EvalOptions::default(),
        )
        .unwrap();
        let expected: usize = split.videos.values().map(|v| v.test.len()).sum();
        // The closure keys on frame index alone, so it fails once per video
        // whose test set contains that index.
        let expected_failures =
            split.videos.values().filter(|v| v.test.contains(&bad_frame)).count();
        assert_eq!(report.total_frames + report.failures.len(), expected);
        assert_eq!(report.failures.len(), expected_failures);
        assert!(report
            .failures
            .iter()
            .any(|f| f.video_id == bad_video && f.frame_index == bad_frame));
        assert!(report.failures[0].message.contains("injected failure"));
    }

    #[test]
    fn evaluate_runs_end_to_end_and_round_trips_json() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.3, 11).unwrap();
        let report = evaluate(&model, &corpus, &split, &EvalOptions::default()).unwrap();
        let expected: usize = split.videos.values().map(|v| v.test.len()).sum();
        assert_eq!(report.total_frames, expected);
        assert_eq!(report.frames.len(), expected);
        assert_eq!(report.videos.len(), 2);
        assert!(report.failures.is_empty());
        assert!((0.0..=1.0).contains(&report.mean_dsc));
        assert!((0.0..=1.0).contains(&report.mean_iou));
        for f in &report.frames {
            assert!((f.dsc - 2.0 * f.iou / (1.0 + f.iou)).abs() < 1e-12);
            let vsplit = &split.videos[&f.video_id];
            assert!(vsplit.support.contains(&f.support_index.unwrap()));
            assert!(vsplit.test.contains(&f.frame_index));
        }
        // Frame-weighted corpus mean.
        let mean: f64 =
            report.frames.iter().map(|f| f.dsc).sum::<f64>() / report.frames.len() as f64;
        assert!((report.mean_dsc - mean).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save_json(&path).unwrap();
        let loaded = EvalReport::load_json(&path).unwrap();
        assert_eq!(loaded.total_frames, report.total_frames);
        assert_eq!(loaded.mean_dsc, report.mean_dsc);
        assert_eq!(loaded.frames.len(), report.frames.len());
    }

    #[test]
    fn evaluate_is_deterministic_across_micro_batch_sizes() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.3, 11).unwrap();
        let a = evaluate(
            &model,
            &corpus,
            &split,
            &EvalOptions { micro_batch: 1, ..EvalOptions::default() },
        )
        .unwrap();
        let b = evaluate(
            &model,
            &corpus,
            &split,
            &EvalOptions { micro_batch: 7, ..EvalOptions::default() },
        )
        .unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.dsc.to_bits(), fb.dsc.to_bits(), "frame {} differs", fa.frame_index);
        }
    }

    #[test]
    fn query_only_evaluation_reads_full_canvas_as_mask() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.3, 11).unwrap();
        let report = evaluate_query_only(&model, &corpus, &split, &EvalOptions::default()).unwrap();
        let expected: usize = split.videos.values().map(|v| v.test.len()).sum();
        assert_eq!(report.total_frames, expected);
        assert!(report.failures.is_empty());
        assert!(report.frames.iter().all(|f| f.support_index.is_none()));
        assert!((0.0..=1.0).contains(&report.mean_dsc));
    }

    #[test]
    fn cell_resolution_evaluation_scores_preprocessed_masks() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let split = split_corpus(&corpus, 0.3, 11).unwrap();
        let opts = EvalOptions { original_resolution: false, ..EvalOptions::default() };
        let report = evaluate(&model, &corpus, &split, &opts).unwrap();
        assert!(!report.original_resolution);
        assert_eq!(report.total_frames, report.frames.len());
    }

    #[test]
    fn overlay_draws_contour_only() {
        let image = Array2::from_elem((8, 8), 0.2f32);
        let mut mask = Array2::zeros((8, 8));
        for y in 2..6 {
            for x in 2..6 {
                mask[(y, x)] = 1.0;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.png");
        save_overlay_png(&path, &image, &mask).unwrap();
        let loaded = image::open(&path).unwrap().to_luma8();
        // Border of the square is white, interior keeps the image value.
        assert_eq!(loaded.get_pixel(2, 2).0[0], 255);
        assert_eq!(loaded.get_pixel(3, 2).0[0], 255, "top edge");
        assert_eq!(loaded.get_pixel(3, 3).0[0], 51, "interior untouched");
        assert_eq!(loaded.get_pixel(0, 0).0[0], 51, "background untouched");
        let bad = Array2::zeros((4, 4));
        assert!(save_overlay_png(&path, &image, &bad).is_err());
    }
}
