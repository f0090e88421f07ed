//! Video corpora, geometric preprocessing, and annotation-budget splits.
//!
//! A corpus is a set of videos; each video is an ordered sweep of frames with
//! one binary mask per frame.  Frames are loaded from 8-bit single-channel
//! PNGs into `f32` arrays: images scaled to `[0, 1]`, masks mapped
//! `{0, 255} -> {0.0, 1.0}`.  Array layout is `(rows, cols)` = `(y, x)`.
//!
//! Splitting is intra-video: a small annotated budget (`train`, further
//! divided into `support` and `query` pools) is drawn per video, everything
//! else is held out as `test`.  All randomness is seed-derived per video, so
//! adding or removing a video never changes the split of another.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_str, stream_rng, Stream};

// ── frames and corpora ──────────────────────────────────────────────────────

/// One annotated frame: grayscale image in `[0, 1]` and binary mask in
/// `{0.0, 1.0}`, same dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_index: usize,
    pub image: Array2<f32>,
    pub mask: Array2<f32>,
}

/// An ordered sweep of frames from one video, sorted by `frame_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSweep {
    pub video_id: String,
    pub anatomy: String,
    pub frames: Vec<Frame>,
}

impl VideoSweep {
    /// All frame indices, ascending.
    pub fn frame_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.frame_index).collect()
    }

    /// Frame with the given `frame_index` (not positional).
    pub fn frame_by_index(&self, frame_index: usize) -> Option<&Frame> {
        self.frames
            .binary_search_by_key(&frame_index, |f| f.frame_index)
            .ok()
            .map(|pos| &self.frames[pos])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub videos: Vec<VideoSweep>,
}

impl Corpus {
    pub fn video(&self, video_id: &str) -> Option<&VideoSweep> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }
}

// ── manifest schema ─────────────────────────────────────────────────────────

/// On-disk corpus description.  Paths are resolved relative to the manifest
/// file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub videos: Vec<VideoManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoManifestEntry {
    pub video_id: String,
    pub anatomy: String,
    pub frames: Vec<FrameManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameManifestEntry {
    pub frame_index: usize,
    pub image_path: String,
    pub mask_path: String,
}

/// Loads a manifest and every frame it references.  An empty manifest yields
/// an empty corpus; malformed entries (duplicate ids or frame indices,
/// image/mask dimension disagreement, non-binary mask pixels) are rejected.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut seen_ids = BTreeSet::new();
    for vm in &manifest.videos {
        if !seen_ids.insert(vm.video_id.clone()) {
            return Err(Error::Dataset(format!(
                "duplicate video_id {:?} in manifest",
                vm.video_id
            )));
        }
        if vm.frames.is_empty() {
            return Err(Error::Dataset(format!(
                "video {:?} has no frames",
                vm.video_id
            )));
        }
        let mut frames = Vec::with_capacity(vm.frames.len());
        let mut seen_idx = BTreeSet::new();
        for fm in &vm.frames {
            if !seen_idx.insert(fm.frame_index) {
                return Err(Error::Dataset(format!(
                    "video {:?}: duplicate frame_index {}",
                    vm.video_id, fm.frame_index
                )));
            }
            let image = load_gray_png(&base.join(&fm.image_path))?;
            let mask = load_mask_png(&base.join(&fm.mask_path))?;
            if image.dim() != mask.dim() {
                return Err(Error::ShapeMismatch {
                    context: "frame image vs mask",
                    expected: format!("{:?}", image.dim()),
                    actual: format!(
                        "{:?} (video {:?}, frame {})",
                        mask.dim(),
                        vm.video_id,
                        fm.frame_index
                    ),
                });
            }
            frames.push(Frame { frame_index: fm.frame_index, image, mask });
        }
        frames.sort_by_key(|f| f.frame_index);
        videos.push(VideoSweep {
            video_id: vm.video_id.clone(),
            anatomy: vm.anatomy.clone(),
            frames,
        });
    }
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(Corpus { videos })
}

// ── PNG I/O ─────────────────────────────────────────────────────────────────

fn decode_luma8(path: &Path) -> Result<image::GrayImage> {
    let dynimg = image::open(path).map_err(|e| Error::image(path, e))?;
    match dynimg {
        image::DynamicImage::ImageLuma8(buf) => Ok(buf),
        other => Err(Error::Dataset(format!(
            "{}: expected 8-bit single-channel PNG, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Grayscale PNG -> `[0, 1]` array (pixel / 255).
pub fn load_gray_png(path: &Path) -> Result<Array2<f32>> {
    let buf = decode_luma8(path)?;
    let (w, h) = buf.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        buf.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
    }))
}

/// Binary-mask PNG -> `{0.0, 1.0}` array.  Any pixel other than 0 or 255 is
/// rejected: masks are annotations, not images, and in-between values would
/// silently corrupt metrics.
pub fn load_mask_png(path: &Path) -> Result<Array2<f32>> {
    let buf = decode_luma8(path)?;
    let (w, h) = buf.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let v = buf.get_pixel(x, y).0[0];
            out[(y as usize, x as usize)] = match v {
                0 => 0.0,
                255 => 1.0,
                other => {
                    return Err(Error::Dataset(format!(
                        "{}: mask pixel ({x}, {y}) = {other}, expected 0 or 255",
                        path.display()
                    )))
                }
            };
        }
    }
    Ok(out)
}

/// Writes a `[0, 1]` array as an 8-bit grayscale PNG (`round(v * 255)`,
/// clamped).  Values already on the 1/255 grid round-trip exactly.
pub fn save_gray_png(path: &Path, image: &Array2<f32>) -> Result<()> {
    let (h, w) = image.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (image[(y, x)].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Writes a binary mask as a `{0, 255}` PNG; values are thresholded at 0.5.
pub fn save_mask_png(path: &Path, mask: &Array2<f32>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask[(y, x)] >= 0.5 { 255u8 } else { 0u8 };
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

// ── geometric preprocessing ─────────────────────────────────────────────────

/// Record of the padding and scaling applied by [`preprocess_frame`], enough
/// to map cell-resolution predictions back to original pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadRecord {
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    /// Forward scale factors, cell size / padded size.
    pub scale_y: f64,
    pub scale_x: f64,
}

/// Zero-pads to a square of side `max(h, w)`, splitting the padding evenly
/// and giving the trailing side the extra pixel when the total is odd.
pub fn pad_to_square(input: &Array2<f32>) -> (Array2<f32>, PadRecord) {
    let (h, w) = input.dim();
    let side = h.max(w);
    let (pad_top, pad_left) = ((side - h) / 2, (side - w) / 2);
    let (pad_bottom, pad_right) = (side - h - pad_top, side - w - pad_left);
    let mut out = Array2::zeros((side, side));
    out.slice_mut(ndarray::s![pad_top..pad_top + h, pad_left..pad_left + w])
        .assign(input);
    let record = PadRecord {
        pad_top,
        pad_bottom,
        pad_left,
        pad_right,
        scale_y: 1.0,
        scale_x: 1.0,
    };
    (out, record)
}

/// Interpolation kind: bilinear for images, nearest-neighbor for masks
/// (nearest guarantees output values are a subset of input values, so binary
/// masks stay binary).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeKind {
    Image,
    Mask,
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // a + t (b - a): exact for t = 0 and for a == b, which makes identity
    // resizes and constant inputs bit-exact.
    a + t * (b - a)
}

/// Resizes with pixel-center alignment: output center `(ty + 0.5)` maps to
/// source coordinate `(ty + 0.5) * h / out_h - 0.5`, clamped to the source.
/// A same-size resize is the identity for both kinds.
pub fn resize(src: &Array2<f32>, out_h: usize, out_w: usize, kind: ResizeKind) -> Array2<f32> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "resize: empty input or output");
    let sy_of = |ty: usize| ((ty as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let sx_of = |tx: usize| ((tx as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    match kind {
        ResizeKind::Mask => Array2::from_shape_fn((out_h, out_w), |(ty, tx)| {
            let sy = sy_of(ty).round() as usize;
            let sx = sx_of(tx).round() as usize;
            src[(sy.min(h - 1), sx.min(w - 1))]
        }),
        ResizeKind::Image => Array2::from_shape_fn((out_h, out_w), |(ty, tx)| {
            let (sy, sx) = (sy_of(ty), sx_of(tx));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            let top = lerp(src[(y0, x0)], src[(y0, x1)], fx);
            let bot = lerp(src[(y1, x0)], src[(y1, x1)], fx);
            lerp(top, bot, fy)
        }),
    }
}

/// Pads a frame square and resizes image and mask to `cell x cell` (bilinear
/// and nearest respectively), returning the [`PadRecord`] needed to invert.
pub fn preprocess_frame(frame: &Frame, cell: usize) -> (Array2<f32>, Array2<f32>, PadRecord) {
    let (img_sq, mut record) = pad_to_square(&frame.image);
    let (mask_sq, _) = pad_to_square(&frame.mask);
    let side = img_sq.dim().0;
    record.scale_y = cell as f64 / side as f64;
    record.scale_x = cell as f64 / side as f64;
    let image = resize(&img_sq, cell, cell, ResizeKind::Image);
    let mask = resize(&mask_sq, cell, cell, ResizeKind::Mask);
    (image, mask, record)
}

/// Maps a cell-resolution binary mask back to original coordinates: nearest
/// upsample to the padded square, then crop the padding away.
pub fn invert_preprocess(
    mask_cell: &Array2<f32>,
    record: &PadRecord,
    orig_h: usize,
    orig_w: usize,
) -> Result<Array2<f32>> {
    let side_h = orig_h + record.pad_top + record.pad_bottom;
    let side_w = orig_w + record.pad_left + record.pad_right;
    if side_h != side_w {
        return Err(Error::ShapeMismatch {
            context: "invert_preprocess pad record",
            expected: "square padded frame".into(),
            actual: format!("{side_h}x{side_w}"),
        });
    }
    let full = resize(mask_cell, side_h, side_w, ResizeKind::Mask);
    Ok(full
        .slice(ndarray::s![
            record.pad_top..record.pad_top + orig_h,
            record.pad_left..record.pad_left + orig_w
        ])
        .to_owned())
}

// ── annotation-budget splits ────────────────────────────────────────────────

/// Per-video split of frame indices.  `support` and `query` partition
/// `train`; `test` is everything else.  All lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSplit {
    pub train: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub test: Vec<usize>,
}

/// A full corpus split, reproducible from `(seed, fraction)` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub fraction: f64,
    pub seed: u64,
    pub videos: BTreeMap<String, VideoSplit>,
}

/// Draws the annotated budget for one video: `max(2, round(fraction * n))`
/// frames (clipped to `n`) sampled without replacement, then shuffled once
/// and divided — first `ceil(k / 2)` to `support`, the rest to `query`.
/// Videos with fewer than two frames cannot form a support/query pair.
pub fn split_indices(
    frame_indices: &[usize],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VideoSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig {
            field: "fraction",
            message: format!("must be in (0, 1], got {fraction}"),
        });
    }
    let n = frame_indices.len();
    if n < 2 {
        return Err(Error::Dataset(format!(
            "cannot split a video with {n} frame(s); need at least 2"
        )));
    }
    let k = (((fraction * n as f64).round() as usize).max(2)).min(n);

    let positions = rand::seq::index::sample(rng, n, k);
    let mut train: Vec<usize> = positions.iter().map(|p| frame_indices[p]).collect();
    train.sort_unstable();

    let mut shuffled = train.clone();
    shuffled.shuffle(rng);
    let n_support = k.div_ceil(2);
    let mut support = shuffled[..n_support].to_vec();
    let mut query = shuffled[n_support..].to_vec();
    support.sort_unstable();
    query.sort_unstable();

    let train_set: BTreeSet<usize> = train.iter().copied().collect();
    let test: Vec<usize> = frame_indices
        .iter()
        .copied()
        .filter(|i| !train_set.contains(i))
        .collect();

    Ok(VideoSplit { train, support, query, test })
}

/// Splits every video in the corpus.  Each video draws from its own RNG
/// stream (keyed by seed and video id), so the split of one video is
/// unaffected by the presence of others.
pub fn split_corpus(corpus: &Corpus, fraction: f64, seed: u64) -> Result<SplitManifest> {
    let mut videos = BTreeMap::new();
    for video in &corpus.videos {
        let mut rng = stream_rng(seed, Stream::Split, &[hash_str(&video.video_id)]);
        let split = split_indices(&video.frame_indices(), fraction, &mut rng)
            .map_err(|e| match e {
                Error::Dataset(msg) => Error::Dataset(format!("video {:?}: {msg}", video.video_id)),
                other => other,
            })?;
        videos.insert(video.video_id.clone(), split);
    }
    Ok(SplitManifest { fraction, seed, videos })
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Checks every structural invariant against the corpus: videos match
    /// one-to-one, `train` and `test` partition the video's frame indices,
    /// `support` and `query` partition `train`, and the budget sizes are
    /// exactly as the sampling rule dictates.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        for video in &corpus.videos {
            let split = self.videos.get(&video.video_id).ok_or_else(|| {
                Error::Dataset(format!("split missing video {:?}", video.video_id))
            })?;
            validate_video_split(split, &video.frame_indices(), self.fraction)
                .map_err(|e| Error::Dataset(format!("video {:?}: {e}", video.video_id)))?;
        }
        if let Some(extra) = self.videos.keys().find(|id| corpus.video(id).is_none()) {
            return Err(Error::Dataset(format!(
                "split references video {extra:?} absent from corpus"
            )));
        }
        Ok(())
    }
}

/// Structural invariants for a single video's split; see
/// [`SplitManifest::validate`].
pub fn validate_video_split(
    split: &VideoSplit,
    frame_indices: &[usize],
    fraction: f64,
) -> Result<()> {
    let all: BTreeSet<usize> = frame_indices.iter().copied().collect();
    let train: BTreeSet<usize> = split.train.iter().copied().collect();
    let support: BTreeSet<usize> = split.support.iter().copied().collect();
    let query: BTreeSet<usize> = split.query.iter().copied().collect();
    let test: BTreeSet<usize> = split.test.iter().copied().collect();

    let fail = |msg: String| Err(Error::Dataset(msg));
    if train.len() != split.train.len() {
        return fail("train contains duplicates".into());
    }
    let n = all.len();
    let expected_k = (((fraction * n as f64).round() as usize).max(2)).min(n);
    if train.len() != expected_k {
        return fail(format!("|train| = {}, expected {expected_k}", train.len()));
    }
    if support.len() != expected_k.div_ceil(2) {
        return fail(format!(
            "|support| = {}, expected {}",
            support.len(),
            expected_k.div_ceil(2)
        ));
    }
    if !support.is_disjoint(&query) {
        return fail("support and query overlap".into());
    }
    if &support | &query != train {
        return fail("support + query != train".into());
    }
    if !train.is_disjoint(&test) {
        return fail("train and test overlap".into());
    }
    if &train | &test != all {
        return fail("train + test != all frames".into());
    }
    Ok(())
}

/// Index of the support frame temporally closest to `t` (smallest
/// `|t - s|`); ties resolve toward the smaller frame index.
pub fn nearest_support(t: usize, support_pool: &[usize]) -> Result<usize> {
    support_pool
        .iter()
        .copied()
        .min_by_key(|&s| (t.abs_diff(s), s))
        .ok_or_else(|| Error::Dataset("nearest_support: empty support pool".into()))
}
