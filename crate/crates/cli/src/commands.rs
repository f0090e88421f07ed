//! Subcommand implementations.
//!
//! Every command follows the same shape: load the experiment config (file
//! plus flag overrides), validate it, do the work through the library, and
//! write the resolved config next to the outputs so the run is reproducible
//! from its artifacts alone.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use iclseg::dataset::{
    invert_preprocess, load_corpus, nearest_support, preprocess_frame, split_corpus, Corpus,
    SplitManifest,
};
use iclseg::inference::{
    evaluate, evaluate_query_only, predict_frame, save_overlay_png, threshold_mask, EvalOptions,
    EvalReport,
};
use iclseg::masking::{MaskMode, PatchMask};
use iclseg::model::{
    forward_batch, load_checkpoint, patchify, save_checkpoint, unpatchify, CheckpointMeta, Model,
    Objective,
};
use iclseg::synthgen::generate_to_dir;
use iclseg::trainer::{train_baseline, train_icl, TrainOptions, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::config::{parse_json, sibling_config_path, ExperimentConfig};
use crate::{AblateArgs, CliError, EvalArgs, SplitArgs, SynthArgs, TrainArgs};

const RESOLVED_CONFIG: &str = "resolved_config.json";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn validated(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate().map_err(CliError::from)
}

// ── synth ───────────────────────────────────────────────────────────────────

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synth_seed = seed;
    }
    validated(&cfg)?;
    ensure_dir(&args.out)?;
    let manifest = generate_to_dir(&cfg.synth, cfg.synth_seed, &args.out)?;
    cfg.write_resolved(&args.out.join(RESOLVED_CONFIG))?;
    println!(
        "synthesized {} videos x {} frames ({}x{} px, seed {}) -> {}",
        cfg.synth.num_videos,
        cfg.synth.frames_per_video,
        cfg.synth.frame_size,
        cfg.synth.frame_size,
        cfg.synth_seed,
        manifest.display()
    );
    Ok(())
}

// ── split ───────────────────────────────────────────────────────────────────

pub fn cmd_split(args: &SplitArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref())?;
    if let Some(f) = args.fraction {
        cfg.split.fraction = f;
    }
    if let Some(seed) = args.seed {
        cfg.split.seed = seed;
    }
    validated(&cfg)?;
    let corpus = load_corpus(&args.corpus)?;
    let manifest = split_corpus(&corpus, cfg.split.fraction, cfg.split.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    manifest.save(&args.out)?;
    cfg.write_resolved(&sibling_config_path(&args.out))?;
    let annotated: usize = manifest.videos.values().map(|v| v.train.len()).sum();
    let held_out: usize = manifest.videos.values().map(|v| v.test.len()).sum();
    println!(
        "split {} videos at fraction {} (seed {}): {annotated} annotated / {held_out} held-out frames -> {}",
        manifest.videos.len(),
        cfg.split.fraction,
        cfg.split.seed,
        args.out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────────

fn load_pair(corpus: &Path, split: &Path) -> Result<(Corpus, SplitManifest), CliError> {
    let corpus = load_corpus(corpus)?;
    let manifest = SplitManifest::load(split)?;
    Ok((corpus, manifest))
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.base_seed = seed;
    }
    if args.toy {
        cfg.model = iclseg::model::ModelConfig::toy();
    }
    validated(&cfg)?;
    let (corpus, manifest) = load_pair(&args.corpus, &args.split)?;
    ensure_dir(&args.out)?;

    let opts = TrainOptions {
        dump_canvas_dir: args.dump_canvas.then(|| args.out.join("canvases")),
        checkpoint_dir: Some(args.out.join("checkpoints")),
        progress_every: Some(10),
    };
    let objective = if args.baseline { Objective::QueryOnly } else { Objective::CanvasInpainting };
    let started = Instant::now();
    let TrainOutcome { model, log } = match objective {
        Objective::CanvasInpainting => train_icl(&corpus, &manifest, &cfg.model, &cfg.train, &opts),
        Objective::QueryOnly => train_baseline(&corpus, &manifest, &cfg.model, &cfg.train, &opts),
    }?;

    let ckpt_path = args.out.join("checkpoint.ckpt");
    let meta =
        CheckpointMeta { epoch: cfg.train.epochs, base_seed: cfg.train.base_seed, objective };
    save_checkpoint(&ckpt_path, &model, &meta)?;
    log.write_ndjson(&args.out.join("train_log.ndjson"))?;
    cfg.write_resolved(&args.out.join(RESOLVED_CONFIG))?;

    let last = log.epochs.last();
    let final_loss = last.map(|e| e.mean_loss).unwrap_or(f64::NAN);
    match last.and_then(|e| e.val_loss) {
        Some(v) => println!(
            "trained {:?} for {} epochs in {:.1}s: final loss {final_loss:.6}, val loss {v:.6} -> {}",
            objective,
            cfg.train.epochs,
            started.elapsed().as_secs_f64(),
            ckpt_path.display()
        ),
        None => println!(
            "trained {:?} for {} epochs in {:.1}s: final loss {final_loss:.6} -> {}",
            objective,
            cfg.train.epochs,
            started.elapsed().as_secs_f64(),
            ckpt_path.display()
        ),
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────────

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref())?;
    if let Some(r) = args.test_mask_ratio {
        cfg.eval.test_mask_ratio = r;
    }
    if let Some(t) = args.threshold {
        cfg.eval.threshold = t;
    }
    if let Some(seed) = args.seed {
        cfg.eval.seed = seed;
    }
    validated(&cfg)?;
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let (corpus, manifest) = load_pair(&args.corpus, &args.split)?;
    ensure_dir(&args.out)?;

    let report = match meta.objective {
        Objective::CanvasInpainting => evaluate(&model, &corpus, &manifest, &cfg.eval),
        Objective::QueryOnly => evaluate_query_only(&model, &corpus, &manifest, &cfg.eval),
    }?;
    let report_path = args.out.join("report.json");
    report.save_json(&report_path)?;
    cfg.write_resolved(&args.out.join(RESOLVED_CONFIG))?;

    if let Some(dir) = &args.overlays {
        let (written, skipped) =
            write_overlays(dir, &model, meta.objective, &corpus, &manifest, &cfg.eval)?;
        println!("wrote {written} overlays to {} ({skipped} skipped)", dir.display());
    }
    print_report(&report, meta.objective, &report_path);
    Ok(())
}

fn print_report(report: &EvalReport, objective: Objective, path: &Path) {
    println!(
        "evaluated {:?} on {} frames (mask ratio {}, threshold {}): mean DSC {:.4}, mean IoU {:.4}, {} failures -> {}",
        objective,
        report.total_frames,
        report.test_mask_ratio,
        report.threshold,
        report.mean_dsc,
        report.mean_iou,
        report.failures.len(),
        path.display()
    );
}

/// Burns predicted contours into each held-out frame.  Frames whose
/// prediction fails are skipped so one bad frame cannot abort the pass.
fn write_overlays(
    dir: &Path,
    model: &Model,
    objective: Objective,
    corpus: &Corpus,
    manifest: &SplitManifest,
    opts: &EvalOptions,
) -> Result<(usize, usize), CliError> {
    ensure_dir(dir)?;
    let (mut written, mut skipped) = (0usize, 0usize);
    for video in &corpus.videos {
        let Some(vsplit) = manifest.videos.get(&video.video_id) else {
            skipped += video.frames.len();
            continue;
        };
        for &t in &vsplit.test {
            let Some(query) = video.frame_by_index(t) else {
                skipped += 1;
                continue;
            };
            let predicted = match objective {
                Objective::CanvasInpainting => nearest_support(t, &vsplit.train)
                    .and_then(|s| {
                        video.frame_by_index(s).ok_or_else(|| {
                            iclseg::Error::Dataset(format!(
                                "video {:?}: support frame {s} missing",
                                video.video_id
                            ))
                        })
                    })
                    .and_then(|support| predict_frame(model, support, &query.image, opts))
                    .map(|p| p.mask),
                Objective::QueryOnly => predict_query_only(model, query, opts),
            };
            match predicted {
                Ok(mask) => {
                    let name = format!("{}_frame_{:04}.png", video.video_id, t);
                    save_overlay_png(&dir.join(name), &query.image, &mask)?;
                    written += 1;
                }
                Err(_) => skipped += 1,
            }
        }
    }
    Ok((written, skipped))
}

/// Single-frame prediction for the no-context objective: the query image
/// fills the whole input and the whole output is read as the mask.
fn predict_query_only(
    model: &Model,
    query: &iclseg::dataset::Frame,
    opts: &EvalOptions,
) -> iclseg::Result<iclseg::ndarray::Array2<f32>> {
    let side = model.cfg.canvas;
    let (q_img, _, record) = preprocess_frame(query, side);
    let patches = patchify(&q_img, model.cfg.patch)?;
    let masks = [PatchMask::none(model.cfg.num_patches())];
    let (out, _) = forward_batch(&model.params, &model.cfg, &patches, &masks, opts.mask_mode, false)?;
    let mut raw = unpatchify(&out, model.cfg.patch)?;
    raw.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let pred = threshold_mask(&raw, opts.threshold);
    let (h, w) = query.image.dim();
    invert_preprocess(&pred, &record, h, w)
}

// ── ablate ──────────────────────────────────────────────────────────────────

/// Axes of the sweep; an absent axis stays at the base config's value.
/// Soft-mask blend strengths are swept through `mask_mode` entries such as
/// `{"soft": {"y": 60.0}}`.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateGrid {
    pairwise_n: Option<Vec<usize>>,
    imagewise_ratio: Option<Vec<f64>>,
    mask_mode: Option<Vec<MaskMode>>,
    test_mask_ratio: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub run: usize,
    pub config_sha256: String,
    pub pairwise_n: usize,
    pub imagewise_ratio: f64,
    pub mask_mode: String,
    pub test_mask_ratio: f64,
    pub final_loss: f64,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub total_frames: usize,
    pub failures: usize,
    pub wall_s: f64,
}

fn mode_label(mode: MaskMode) -> String {
    match mode {
        MaskMode::Hard => "hard".into(),
        MaskMode::Soft { y } if y.fract() == 0.0 => format!("soft_{}", y as i64),
        MaskMode::Soft { y } => format!("soft_{y}"),
    }
}

struct Combo {
    run: usize,
    cfg: ExperimentConfig,
}

/// One training shares its checkpoint across all combos that differ only in
/// evaluation settings.
struct TrainGroup {
    key: String,
    combos: Vec<usize>,
}

fn build_combos(base: &ExperimentConfig, grid: &AblateGrid) -> Vec<Combo> {
    let pairwise = grid.pairwise_n.clone().unwrap_or_else(|| vec![base.train.augment.pairwise_n]);
    let ratios =
        grid.imagewise_ratio.clone().unwrap_or_else(|| vec![base.train.augment.imagewise_ratio]);
    let modes = grid.mask_mode.clone().unwrap_or_else(|| vec![base.train.mask_mode]);
    let test_ratios =
        grid.test_mask_ratio.clone().unwrap_or_else(|| vec![base.eval.test_mask_ratio]);

    let mut combos = Vec::new();
    for &n in &pairwise {
        for &r in &ratios {
            for &m in &modes {
                for &t in &test_ratios {
                    let mut cfg = base.clone();
                    cfg.train.augment.pairwise_n = n;
                    cfg.train.augment.imagewise_ratio = r;
                    cfg.train.mask_mode = m;
                    cfg.eval.mask_mode = m;
                    cfg.eval.test_mask_ratio = t;
                    combos.push(Combo { run: combos.len(), cfg });
                }
            }
        }
    }
    combos
}

fn train_key(cfg: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(&(&cfg.model, &cfg.train))
        .expect("config serialization cannot fail");
    hex::encode(&Sha256::digest(&bytes)[..6])
}

fn group_by_training(combos: &[Combo]) -> Vec<TrainGroup> {
    let mut groups: Vec<TrainGroup> = Vec::new();
    for combo in combos {
        let key = train_key(&combo.cfg);
        match groups.iter_mut().find(|g| g.key == key) {
            Some(g) => g.combos.push(combo.run),
            None => groups.push(TrainGroup { key, combos: vec![combo.run] }),
        }
    }
    groups
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let mut base = ExperimentConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        base.train.base_seed = seed;
    }
    if args.toy {
        base.model = iclseg::model::ModelConfig::toy();
    }
    validated(&base)?;
    let grid_text = fs::read_to_string(&args.grid)
        .map_err(|e| CliError::usage(format!("cannot read grid {}: {e}", args.grid.display())))?;
    let grid: AblateGrid = parse_json(&grid_text, &args.grid)?;
    let combos = build_combos(&base, &grid);
    for combo in &combos {
        validated(&combo.cfg)?;
    }
    let groups = group_by_training(&combos);
    let (corpus, manifest) = load_pair(&args.corpus, &args.split)?;
    ensure_dir(&args.out)?;
    let models_dir = args.out.join("models");
    let runs_dir = args.out.join("runs");
    ensure_dir(&models_dir)?;
    ensure_dir(&runs_dir)?;

    println!(
        "ablation: {} runs in {} training groups, {} worker(s)",
        combos.len(),
        groups.len(),
        args.parallel.max(1)
    );

    let rows: Mutex<Vec<AblateRow>> = Mutex::new(Vec::with_capacity(combos.len()));
    let next_group = AtomicUsize::new(0);
    let workers = args.parallel.max(1).min(groups.len().max(1));
    let run_group = |gi: usize| -> Result<(), CliError> {
        let group = &groups[gi];
        let first = &combos[group.combos[0]];
        let t0 = Instant::now();
        let opts = TrainOptions {
            dump_canvas_dir: None,
            checkpoint_dir: None,
            progress_every: None,
        };
        let TrainOutcome { model, log } =
            train_icl(&corpus, &manifest, &first.cfg.model, &first.cfg.train, &opts)?;
        let group_dir = models_dir.join(format!("train_{}", group.key));
        ensure_dir(&group_dir)?;
        let meta = CheckpointMeta {
            epoch: first.cfg.train.epochs,
            base_seed: first.cfg.train.base_seed,
            objective: Objective::CanvasInpainting,
        };
        save_checkpoint(&group_dir.join("checkpoint.ckpt"), &model, &meta)?;
        log.write_ndjson(&group_dir.join("train_log.ndjson"))?;
        let train_wall = t0.elapsed().as_secs_f64();
        let final_loss = log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);

        for &run in &group.combos {
            let combo = &combos[run];
            let te = Instant::now();
            let report = evaluate(&model, &corpus, &manifest, &combo.cfg.eval)?;
            let run_dir = runs_dir.join(format!("run_{run:02}"));
            ensure_dir(&run_dir)?;
            report.save_json(&run_dir.join("report.json"))?;
            combo.cfg.write_resolved(&run_dir.join(RESOLVED_CONFIG))?;
            let row = AblateRow {
                run,
                config_sha256: combo.cfg.sha256_hex(),
                pairwise_n: combo.cfg.train.augment.pairwise_n,
                imagewise_ratio: combo.cfg.train.augment.imagewise_ratio,
                mask_mode: mode_label(combo.cfg.train.mask_mode),
                test_mask_ratio: combo.cfg.eval.test_mask_ratio,
                final_loss,
                mean_dsc: report.mean_dsc,
                mean_iou: report.mean_iou,
                total_frames: report.total_frames,
                failures: report.failures.len(),
                wall_s: train_wall + te.elapsed().as_secs_f64(),
            };
            rows.lock().expect("row sink poisoned").push(row);
        }
        Ok(())
    };

    let worker_errors: Vec<CliError> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    loop {
                        let gi = next_group.fetch_add(1, Ordering::Relaxed);
                        if gi >= groups.len() {
                            return Ok(());
                        }
                        run_group(gi)?;
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .filter_map(|h| h.join().expect("ablation worker panicked").err())
            .collect()
    });
    if let Some(err) = worker_errors.into_iter().next() {
        return Err(err);
    }

    let mut rows = rows.into_inner().expect("row sink poisoned");
    rows.sort_by_key(|r| r.run);
    write_results(&args.out, &base, &rows)?;
    for row in &rows {
        println!(
            "run {:02}: pairwise_n={} imagewise_ratio={} mask={} test_ratio={} loss={:.6} dsc={:.4} iou={:.4} ({:.1}s)",
            row.run,
            row.pairwise_n,
            row.imagewise_ratio,
            row.mask_mode,
            row.test_mask_ratio,
            row.final_loss,
            row.mean_dsc,
            row.mean_iou,
            row.wall_s
        );
    }
    println!("wrote {} and {}", args.out.join("results.json").display(), args.out.join("results.csv").display());
    Ok(())
}

fn write_results(out: &Path, base: &ExperimentConfig, rows: &[AblateRow]) -> Result<(), CliError> {
    let json_path = out.join("results.json");
    let text = serde_json::to_string_pretty(rows).expect("row serialization cannot fail");
    fs::write(&json_path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", json_path.display())))?;

    let csv_path = out.join("results.csv");
    let mut csv = String::from(
        "run,config_sha256,pairwise_n,imagewise_ratio,mask_mode,test_mask_ratio,final_loss,mean_dsc,mean_iou,total_frames,failures,wall_s\n",
    );
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}\n",
            r.run,
            r.config_sha256,
            r.pairwise_n,
            r.imagewise_ratio,
            r.mask_mode,
            r.test_mask_ratio,
            r.final_loss,
            r.mean_dsc,
            r.mean_iou,
            r.total_frames,
            r.failures,
            r.wall_s
        ));
    }
    fs::write(&csv_path, csv)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    base.write_resolved(&out.join(RESOLVED_CONFIG))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn absent_axes_fall_back_to_base_values() {
        let combos = build_combos(&base(), &AblateGrid::default());
        assert_eq!(combos.len(), 1);
        assert_eq!(combos[0].cfg.train.augment.pairwise_n, 5);
        assert_eq!(combos[0].cfg.eval.test_mask_ratio, 0.0);
    }

    #[test]
    fn grid_is_a_cartesian_product_in_axis_order() {
        let grid = AblateGrid {
            pairwise_n: Some(vec![1, 5]),
            test_mask_ratio: Some(vec![0.0, 0.6]),
            ..AblateGrid::default()
        };
        let combos = build_combos(&base(), &grid);
        assert_eq!(combos.len(), 4);
        let key = |c: &Combo| (c.cfg.train.augment.pairwise_n, c.cfg.eval.test_mask_ratio);
        assert_eq!(key(&combos[0]), (1, 0.0));
        assert_eq!(key(&combos[1]), (1, 0.6));
        assert_eq!(key(&combos[2]), (5, 0.0));
        assert_eq!(key(&combos[3]), (5, 0.6));
        assert_eq!(combos[3].run, 3);
    }

    #[test]
    fn eval_only_axes_share_one_training_group() {
        let grid = AblateGrid {
            test_mask_ratio: Some(vec![0.0, 0.15, 0.3, 0.45, 0.6]),
            ..AblateGrid::default()
        };
        let combos = build_combos(&base(), &grid);
        let groups = group_by_training(&combos);
        assert_eq!(combos.len(), 5);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].combos, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mask_mode_axis_forks_training_and_syncs_eval() {
        let grid = AblateGrid {
            mask_mode: Some(vec![MaskMode::Hard, MaskMode::Soft { y: 60.0 }]),
            ..AblateGrid::default()
        };
        let combos = build_combos(&base(), &grid);
        let groups = group_by_training(&combos);
        assert_eq!(groups.len(), 2);
        assert_eq!(combos[1].cfg.eval.mask_mode, MaskMode::Soft { y: 60.0 });
        assert_eq!(mode_label(combos[1].cfg.train.mask_mode), "soft_60");
    }

    #[test]
    fn grid_rejects_unknown_axes() {
        let err = parse_json::<AblateGrid>(r#"{"learning_rate": [0.1]}"#, Path::new("grid.json"))
            .unwrap_err();
        assert!(err.usage);
        assert!(err.message.contains("learning_rate"));
    }
}
