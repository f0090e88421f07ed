//! Cross-module integration: a miniature corpus flows through synthesis,
//! PNG round-trip, splitting, training (both objectives), checkpointing,
//! and evaluation — fast enough to run on every test invocation.

use iclseg::composer::AugmentConfig;
use iclseg::dataset::{load_corpus, split_corpus};
use iclseg::inference::{evaluate, evaluate_query_only, predict_frame, EvalOptions, EvalReport};
use iclseg::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, Objective};
use iclseg::synthgen::{generate, generate_to_dir, SynthConfig};
use iclseg::trainer::{train_baseline, train_icl, TrainConfig, TrainOptions, TrainingLog};
use tempfile::TempDir;

fn tiny_synth() -> SynthConfig {
    SynthConfig { num_videos: 2, frames_per_video: 12, ..SynthConfig::default() }
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
fn corpus_to_report_via_disk_artifacts() {
    let tmp = TempDir::new().unwrap();
    let manifest_path = generate_to_dir(&tiny_synth(), 9, tmp.path().join("data").as_path())
        .expect("corpus writes");
    let corpus = load_corpus(&manifest_path).expect("corpus reloads");
    let in_memory = generate(&tiny_synth(), 9).expect("corpus generates");
    assert_eq!(corpus, in_memory, "PNG round trip is bit-exact");

    let split = split_corpus(&corpus, 0.25, 3).expect("corpus splits");
    let outcome = train_icl(
        &corpus,
        &split,
        &ModelConfig::toy(),
        &tiny_train(3),
        &TrainOptions::default(),
    )
    .expect("training completes");

    // Log survives the NDJSON round trip.
    let log_path = tmp.path().join("log.ndjson");
    outcome.log.write_ndjson(&log_path).expect("log writes");
    let log = TrainingLog::read_ndjson(&log_path).expect("log reloads");
    assert_eq!(log.epochs.len(), 3);
    // 25% of 12 frames = 3 annotated: 2 support + 1 query per video.
    assert_eq!(log.meta.samples_per_epoch, 2 * 2 * 1, "videos x rounds x queries");

    // Weights survive the checkpoint round trip and evaluate identically.
    let ckpt = tmp.path().join("model.ckpt");
    let meta = CheckpointMeta { epoch: 3, base_seed: 42, objective: Objective::CanvasInpainting };
    save_checkpoint(&ckpt, &outcome.model, &meta).expect("checkpoint writes");
    let (reloaded, meta2) = load_checkpoint(&ckpt).expect("checkpoint reloads");
    assert_eq!(meta2.objective, Objective::CanvasInpainting);

    let opts = EvalOptions::default();
    let a = evaluate(&outcome.model, &corpus, &split, &opts).expect("evaluation completes");
    let b = evaluate(&reloaded, &corpus, &split, &opts).expect("evaluation completes");
    assert_eq!(a.total_frames, 2 * 9, "all held-out frames scored");
    assert!(a.failures.is_empty(), "no frame fails: {:?}", a.failures);
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(x.dsc.to_bits(), y.dsc.to_bits(), "reloaded weights score identically");
    }

    // The report survives its own JSON round trip.
    let report_path = tmp.path().join("report.json");
    a.save_json(&report_path).expect("report writes");
    let a2 = EvalReport::load_json(&report_path).expect("report reloads");
    assert_eq!(a2.frames.len(), a.frames.len());
    assert_eq!(a2.mean_dsc, a.mean_dsc);

    // Single-frame prediction agrees with the batched evaluator's pairing
    // contract: it reports the support frame it used.
    let video = &corpus.videos[0];
    let vsplit = &split.videos[&video.video_id];
    let t = vsplit.test[0];
    let s = iclseg::dataset::nearest_support(t, &vsplit.train).unwrap();
    let support = video.frame_by_index(s).unwrap();
    let query = video.frame_by_index(t).unwrap();
    let pred = predict_frame(&outcome.model, support, &query.image, &opts).expect("predicts");
    assert_eq!(pred.support_frame, s);
    assert_eq!(pred.mask.dim(), query.image.dim(), "original-resolution output");
}

#[test]
fn baseline_objective_round_trips_and_reports_no_support() {
    let corpus = generate(&tiny_synth(), 11).expect("corpus generates");
    let split = split_corpus(&corpus, 0.25, 3).expect("corpus splits");
    let outcome = train_baseline(
        &corpus,
        &split,
        &ModelConfig::toy(),
        &tiny_train(3),
        &TrainOptions::default(),
    )
    .expect("baseline trains");
    assert!(
        outcome.log.epochs.iter().all(|e| e.val_loss.is_some()),
        "baseline logs validation loss each epoch"
    );
    let report = evaluate_query_only(&outcome.model, &corpus, &split, &EvalOptions::default())
        .expect("evaluation completes");
    assert_eq!(report.total_frames, 18);
    assert!(report.frames.iter().all(|f| f.support_index.is_none()));
}
