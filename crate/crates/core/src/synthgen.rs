//! Synthetic video corpus: two look-alike curved bands sweeping through
//! speckle noise, with only one of them annotated.
//!
//! Each video renders two vertical bands, one confined to each lateral half
//! of the frame.  Both bands share the video's intensity recipe and draw
//! their geometry (thickness, sinusoidal wiggle, phase, drift velocity)
//! from the same ranges, so nothing in a frame's appearance distinguishes
//! them.  The mask annotates exactly one of the two, chosen per video in a
//! balanced pattern.  A model that only ever sees the query frame can at
//! best hedge between the two bands; resolving which band the video
//! annotates requires an annotated frame from the same video, which is
//! precisely the support context the in-context pipeline supplies.
//!
//! Within a video each band translates a bounded amount per frame and is
//! reflected back inside its lane, so consecutive masks overlap heavily and
//! a band can never wander into the other half of the frame — transferring
//! the annotated band from a nearby support frame stays unambiguous.
//!
//! Frames are validated at construction: foreground fraction must stay in a
//! sane range and consecutive-frame mask IoU must stay high.  Pixel values
//! are quantized to the 8-bit grid, so PNG round trips are bit-exact.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    save_gray_png, save_mask_png, Corpus, CorpusManifest, Frame, FrameManifestEntry,
    VideoManifestEntry, VideoSweep,
};
use crate::error::{Error, Result};
use crate::metrics::iou;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    /// Square frame side in pixels.
    pub frame_size: usize,
    /// Band thickness range (pixels), drawn per band.
    pub thickness_min: f64,
    pub thickness_max: f64,
    /// Amplitude range of the sinusoidal center line (pixels).
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Wavelength range of the center line (pixels along the sweep axis).
    pub wavelength_min: f64,
    pub wavelength_max: f64,
    /// Maximum horizontal translation per frame (pixels); each band is
    /// reflected back inside its own lane when it reaches the edge.
    pub drift: f64,
    /// Multiplicative speckle strength.
    pub noise_sigma: f64,
    /// Background / band intensity ranges (per video, shared by both bands
    /// so they stay indistinguishable); odd videos swap them when
    /// `alternate_polarity` is set.
    pub background_min: f64,
    pub background_max: f64,
    pub band_min: f64,
    pub band_max: f64,
    pub alternate_polarity: bool,
    /// Construction-time validation bounds.
    pub foreground_min: f64,
    pub foreground_max: f64,
    pub min_consecutive_iou: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 10,
            frames_per_video: 100,
            frame_size: 64,
            thickness_min: 14.0,
            thickness_max: 18.0,
            amplitude_min: 0.2,
            amplitude_max: 0.5,
            wavelength_min: 64.0,
            wavelength_max: 160.0,
            drift: 0.1,
            noise_sigma: 0.02,
            background_min: 0.03,
            background_max: 0.12,
            band_min: 0.88,
            band_max: 0.97,
            alternate_polarity: false,
            foreground_min: 0.02,
            foreground_max: 0.40,
            min_consecutive_iou: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field, message: String| Err(Error::InvalidConfig { field, message });
        if self.num_videos == 0 || self.frames_per_video == 0 {
            return err("synth.num_videos", "corpus must be non-empty".into());
        }
        if self.frame_size < 16 {
            return err("synth.frame_size", format!("too small: {}", self.frame_size));
        }
        if !(self.thickness_min > 0.0 && self.thickness_max >= self.thickness_min) {
            return err("synth.thickness", "need 0 < min <= max".into());
        }
        if !(self.amplitude_min >= 0.0 && self.amplitude_max >= self.amplitude_min) {
            return err("synth.amplitude", "need 0 <= min <= max".into());
        }
        if !(self.wavelength_min > 1.0 && self.wavelength_max >= self.wavelength_min) {
            return err("synth.wavelength", "need 1 < min <= max".into());
        }
        if !(self.drift >= 0.0) {
            return err("synth.drift", format!("must be >= 0, got {}", self.drift));
        }
        // Each half of the frame must hold one band's full extent (half
        // thickness plus wiggle) with outer and inner margins left over, or
        // the two lanes collapse and the bands could touch.
        let extent = self.thickness_max / 2.0 + self.amplitude_max;
        if 2.0 * extent + 3.0 >= self.frame_size as f64 / 2.0 {
            return err(
                "synth.frame_size",
                format!(
                    "frame {} cannot hold two bands of thickness {} + amplitude {}",
                    self.frame_size, self.thickness_max, self.amplitude_max
                ),
            );
        }
        // Conservative translation bound: IoU of a width-w band shifted by d
        // is at least (w - d) / (w + d) when d <= w.
        let worst = (self.thickness_min - 1.0 - self.drift) / (self.thickness_min + 1.0 + self.drift);
        if worst < self.min_consecutive_iou {
            return err(
                "synth.drift",
                format!(
                    "drift {} too large for thickness {}: worst-case consecutive IoU {worst:.3} < {}",
                    self.drift, self.thickness_min, self.min_consecutive_iou
                ),
            );
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma < 0.5) {
            return err("synth.noise_sigma", format!("must be in [0, 0.5), got {}", self.noise_sigma));
        }
        for (field, lo, hi) in [
            ("synth.background", self.background_min, self.background_max),
            ("synth.band", self.band_min, self.band_max),
        ] {
            if !(lo >= 0.0 && hi <= 1.0 && lo <= hi) {
                return err(field, format!("need 0 <= min <= max <= 1, got [{lo}, {hi}]"));
            }
        }
        if !(self.foreground_min >= 0.0
            && self.foreground_max <= 1.0
            && self.foreground_min < self.foreground_max)
        {
            return err("synth.foreground", "need 0 <= min < max <= 1".into());
        }
        Ok(())
    }
}

/// Quantize to the 8-bit grid so a save/load PNG round trip is the identity.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

struct BandRecipe {
    thickness: f64,
    amplitude: f64,
    wavelength: f64,
    phase: f64,
    center0: f64,
    velocity: f64,
    /// Lane the center line is reflected into.
    lane_lo: f64,
    lane_hi: f64,
}

struct VideoRecipe {
    bands: [BandRecipe; 2],
    /// Index of the band the mask annotates.
    target: usize,
    background: f64,
    band: f64,
}

/// Triangle-wave reflection of `x` into `[lo, hi]`.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let mut t = (x - lo).rem_euclid(2.0 * span);
    if t > span {
        t = 2.0 * span - t;
    }
    lo + t
}

/// Generates the whole corpus in memory.  Deterministic in `(cfg, seed)`;
/// every video draws from its own stream.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let size = cfg.frame_size;
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let mut rng = stream_rng(seed, Stream::Synth, &[v as u64]);
        let flip = cfg.alternate_polarity && v % 2 == 1;
        let (bg_lo, bg_hi, band_lo, band_hi) = if flip {
            (cfg.band_min, cfg.band_max, cfg.background_min, cfg.background_max)
        } else {
            (cfg.background_min, cfg.background_max, cfg.band_min, cfg.band_max)
        };
        let half = size as f64 / 2.0;
        let draw_band = |rng: &mut rand_chacha::ChaCha8Rng, lane: usize| {
            let thickness = rng.random_range(cfg.thickness_min..=cfg.thickness_max);
            let amplitude = rng.random_range(cfg.amplitude_min..=cfg.amplitude_max);
            let extent = thickness / 2.0 + amplitude;
            // One pixel of clearance at the shared inner edge, two at the
            // frame borders; `validate` guarantees lane_lo < lane_hi.
            let (lane_lo, lane_hi) = if lane == 0 {
                (extent + 2.0, half - extent - 1.0)
            } else {
                (half + extent + 1.0, size as f64 - extent - 2.0)
            };
            BandRecipe {
                thickness,
                amplitude,
                wavelength: rng.random_range(cfg.wavelength_min..=cfg.wavelength_max),
                phase: rng.random_range(0.0..TAU),
                center0: rng.random_range(lane_lo..=lane_hi),
                velocity: {
                    let speed = rng.random_range(0.5 * cfg.drift..=cfg.drift);
                    if rng.random_bool(0.5) {
                        speed
                    } else {
                        -speed
                    }
                },
                lane_lo,
                lane_hi,
            }
        };
        let recipe = VideoRecipe {
            bands: [draw_band(&mut rng, 0), draw_band(&mut rng, 1)],
            // Balanced and independent of the polarity parity, so neither
            // intensity nor video parity predicts the annotated side.
            target: usize::from(matches!(v % 4, 1 | 2)),
            background: rng.random_range(bg_lo..=bg_hi),
            band: rng.random_range(band_lo..=band_hi),
        };

        let video_id = format!("synth_{v:03}");
        let mut frames = Vec::with_capacity(cfg.frames_per_video);
        for t in 0..cfg.frames_per_video {
            let centers = recipe
                .bands
                .each_ref()
                .map(|b| reflect(b.center0 + b.velocity * t as f64, b.lane_lo, b.lane_hi));
            let mut image = Array2::zeros((size, size));
            let mut mask = Array2::zeros((size, size));
            let mut fg = 0usize;
            for y in 0..size {
                let cx = [0, 1].map(|i| {
                    let b = &recipe.bands[i];
                    centers[i] + b.amplitude * (TAU * y as f64 / b.wavelength + b.phase).sin()
                });
                for x in 0..size {
                    let inside =
                        [0, 1].map(|i| (x as f64 - cx[i]).abs() <= recipe.bands[i].thickness / 2.0);
                    let base =
                        if inside[0] || inside[1] { recipe.band } else { recipe.background };
                    let n: f64 = StandardNormal.sample(&mut rng);
                    image[(y, x)] = quantize(base * (1.0 + cfg.noise_sigma * n));
                    if inside[recipe.target] {
                        mask[(y, x)] = 1.0;
                        fg += 1;
                    }
                }
            }
            let frac = fg as f64 / (size * size) as f64;
            if frac < cfg.foreground_min || frac > cfg.foreground_max {
                return Err(Error::Dataset(format!(
                    "{video_id} frame {t}: foreground fraction {frac:.4} outside [{}, {}]",
                    cfg.foreground_min, cfg.foreground_max
                )));
            }
            if let Some(prev) = frames.last() {
                let prev: &Frame = prev;
                let overlap = iou(&mask, &prev.mask)?;
                if overlap < cfg.min_consecutive_iou {
                    return Err(Error::Dataset(format!(
                        "{video_id} frames {}..{t}: consecutive mask IoU {overlap:.3} < {}",
                        t - 1,
                        cfg.min_consecutive_iou
                    )));
                }
            }
            frames.push(Frame { frame_index: t, image, mask });
        }
        videos.push(VideoSweep { video_id, anatomy: "synthetic_band".into(), frames });
    }
    Ok(Corpus { videos })
}

/// Generates and writes the corpus as PNGs plus a manifest; returns the
/// manifest path.  `load_corpus` on that path reproduces [`generate`]'s
/// output bit-exactly (values are quantized to the PNG grid).
pub fn generate_to_dir(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<PathBuf> {
    let corpus = generate(cfg, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CorpusManifest { videos: Vec::new() };
    for video in &corpus.videos {
        let vdir = dir.join(&video.video_id);
        std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        let mut entries = Vec::with_capacity(video.frames.len());
        for frame in &video.frames {
            let image_rel = format!("{}/frame_{:04}.png", video.video_id, frame.frame_index);
            let mask_rel = format!("{}/mask_{:04}.png", video.video_id, frame.frame_index);
            save_gray_png(&dir.join(&image_rel), &frame.image)?;
            save_mask_png(&dir.join(&mask_rel), &frame.mask)?;
            entries.push(FrameManifestEntry {
                frame_index: frame.frame_index,
                image_path: image_rel,
                mask_path: mask_rel,
            });
        }
        manifest.videos.push(VideoManifestEntry {
            video_id: video.video_id.clone(),
            anatomy: video.anatomy.clone(),
            frames: entries,
        });
    }
    let path = dir.join("corpus.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_corpus;

    fn small_cfg() -> SynthConfig {
        SynthConfig { num_videos: 4, frames_per_video: 12, ..SynthConfig::default() }
    }

    #[test]
    fn generate_is_deterministic_and_validated() {
        let cfg = small_cfg();
        let a = generate(&cfg, 99).unwrap();
        let b = generate(&cfg, 99).unwrap();
        assert_eq!(a.videos.len(), 4);
        for (va, vb) in a.videos.iter().zip(&b.videos) {
            assert_eq!(va.video_id, vb.video_id);
            for (fa, fb) in va.frames.iter().zip(&vb.frames) {
                assert_eq!(fa.image, fb.image, "same seed, same pixels");
                assert_eq!(fa.mask, fb.mask);
            }
        }
        let c = generate(&cfg, 100).unwrap();
        assert!(
            a.videos[0].frames[0].image != c.videos[0].frames[0].image,
            "different seeds must differ"
        );

        for video in &a.videos {
            for (i, frame) in video.frames.iter().enumerate() {
                let frac = frame.mask.sum() as f64 / frame.mask.len() as f64;
                assert!((0.02..=0.40).contains(&frac), "fg fraction {frac}");
                assert!(frame.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
                if i > 0 {
                    let overlap = iou(&frame.mask, &video.frames[i - 1].mask).unwrap();
                    assert!(overlap >= 0.5, "consecutive IoU {overlap}");
                }
            }
        }
    }

    #[test]
    fn two_bands_one_annotated() {
        let corpus = generate(&small_cfg(), 11).unwrap();
        let size = 64usize;
        let mut left_targets = 0;
        for video in &corpus.videos {
            let f = &video.frames[0];
            // With the default intensities, pixels above 0.5 are exactly the
            // band pixels: 0.88 and 0.12 are both dozens of noise sigmas
            // away from the midpoint.
            let bright: Vec<(usize, usize)> = (0..size)
                .flat_map(|y| (0..size).map(move |x| (y, x)))
                .filter(|&(y, x)| f.image[(y, x)] > 0.5)
                .collect();
            let annotated = f.mask.sum() as f64;
            assert!(
                bright.len() as f64 >= 1.6 * annotated,
                "both bands must be rendered, not just the annotated one"
            );
            for (y, x) in (0..size).flat_map(|y| (0..size).map(move |x| (y, x))) {
                if f.mask[(y, x)] > 0.5 {
                    assert!(f.image[(y, x)] > 0.5, "mask must lie on a band");
                }
            }
            // The annotated band stays in one lateral half; the decoy fills
            // the other, so appearance alone cannot reveal the target.
            let sides: Vec<bool> = bright
                .iter()
                .filter(|&&(y, x)| f.mask[(y, x)] > 0.5)
                .map(|&(_, x)| x < size / 2)
                .collect();
            assert!(sides.windows(2).all(|w| w[0] == w[1]), "one band annotated");
            let left = sides[0];
            let decoy = bright.iter().filter(|&&(_, x)| (x < size / 2) != left).count();
            assert!(decoy > 100, "decoy band missing: {decoy} pixels");
            left_targets += usize::from(left);
        }
        assert_eq!(left_targets, 2, "4 videos annotate 2 left and 2 right bands");
    }

    #[test]
    fn polarity_alternates_between_videos() {
        let cfg = SynthConfig { alternate_polarity: true, ..small_cfg() };
        let corpus = generate(&cfg, 7).unwrap();
        let mean_fg_intensity = |v: &VideoSweep| {
            let f = &v.frames[0];
            let mut sum = 0.0;
            let mut n = 0usize;
            for (i, m) in f.image.iter().zip(f.mask.iter()) {
                if *m > 0.5 {
                    sum += *i as f64;
                    n += 1;
                }
            }
            sum / n as f64
        };
        let mean_bg_intensity = |v: &VideoSweep| {
            let f = &v.frames[0];
            let mut sum = 0.0;
            let mut n = 0usize;
            for (i, m) in f.image.iter().zip(f.mask.iter()) {
                if *m < 0.5 {
                    sum += *i as f64;
                    n += 1;
                }
            }
            sum / n as f64
        };
        let even = &corpus.videos[0];
        let odd = &corpus.videos[1];
        assert!(
            mean_fg_intensity(even) > mean_bg_intensity(even),
            "even videos: bright band on dark background"
        );
        assert!(
            mean_fg_intensity(odd) < mean_bg_intensity(odd),
            "odd videos: dark band on bright background"
        );
    }

    #[test]
    fn png_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { num_videos: 2, frames_per_video: 3, ..SynthConfig::default() };
        let manifest = generate_to_dir(&cfg, 5, dir.path()).unwrap();
        let loaded = load_corpus(&manifest).unwrap();
        let direct = generate(&cfg, 5).unwrap();
        assert_eq!(loaded.videos.len(), direct.videos.len());
        for (lv, dv) in loaded.videos.iter().zip(&direct.videos) {
            assert_eq!(lv.video_id, dv.video_id);
            assert_eq!(lv.anatomy, "synthetic_band");
            for (lf, df) in lv.frames.iter().zip(&dv.frames) {
                assert_eq!(lf.image, df.image, "quantized pixels survive PNG");
                assert_eq!(lf.mask, df.mask);
            }
        }
    }

    #[test]
    fn validate_rejects_impossible_geometry() {
        let bad = SynthConfig { frame_size: 16, thickness_max: 14.0, ..SynthConfig::default() };
        assert!(bad.validate().is_err(), "band cannot fit");
        let bad = SynthConfig { drift: 8.0, ..SynthConfig::default() };
        assert!(bad.validate().is_err(), "drift breaks the consecutive-IoU bound");
        let bad = SynthConfig { num_videos: 0, ..SynthConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SynthConfig { band_min: 0.9, band_max: 0.8, ..SynthConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reflect_stays_in_bounds_and_preserves_steps() {
        for i in 0..200 {
            let x = -30.0 + i as f64 * 0.7;
            let r = reflect(x, 10.0, 20.0);
            assert!((10.0..=20.0).contains(&r), "reflect({x}) = {r}");
        }
        // Within a monotone stretch, consecutive reflected steps keep size.
        let a = reflect(12.0, 10.0, 20.0);
        let b = reflect(13.0, 10.0, 20.0);
        assert!((b - a - 1.0).abs() < 1e-12);
    }
}
