//! One-off diagnostic: parameterized training arm taking `key=value` args,
//! e.g. `arm epochs=300 noise=0.03 band_min=0.85 th_min=16 ckpt_every=50`.
//! Saves periodic snapshots and prints a DSC-vs-epoch curve at ratio 0.
//! Temporary development tool.

use std::collections::HashMap;
use std::time::Instant;

use iclseg::composer::AugmentConfig;
use iclseg::dataset::split_corpus;
use iclseg::inference::{evaluate, EvalOptions};
use iclseg::model::{load_checkpoint, ModelConfig};
use iclseg::synthgen::{generate, SynthConfig};
use iclseg::trainer::{train_icl, TrainConfig, TrainOptions};

fn main() {
    let kv: HashMap<String, f64> = std::env::args()
        .skip(1)
        .filter_map(|a| {
            let (k, v) = a.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect();
    let g = |k: &str, d: f64| kv.get(k).copied().unwrap_or(d);

    let d = SynthConfig::default();
    let synth = SynthConfig {
        noise_sigma: g("noise", d.noise_sigma),
        band_min: g("band_min", d.band_min),
        band_max: g("band_max", d.band_max),
        background_min: g("bg_min", d.background_min),
        background_max: g("bg_max", d.background_max),
        thickness_min: g("th_min", d.thickness_min),
        thickness_max: g("th_max", d.thickness_max),
        amplitude_min: g("amp_min", d.amplitude_min),
        amplitude_max: g("amp_max", d.amplitude_max),
        wavelength_min: g("wl_min", d.wavelength_min),
        wavelength_max: g("wl_max", d.wavelength_max),
        drift: g("drift", d.drift),
        ..d
    };
    eprintln!("synth: {synth:?}");
    let corpus = generate(&synth, 42).unwrap();
    let split = split_corpus(&corpus, 0.05, 42).unwrap();
    let model_cfg = ModelConfig::toy();
    let epochs = g("epochs", 300.0) as usize;
    let ckpt_every = kv.get("ckpt_every").map(|&v| v as usize);
    let cfg = TrainConfig {
        epochs,
        batch_size: g("batch", 64.0) as usize,
        lr: g("lr", 5e-4),
        mask_ratio: g("mask_ratio", 0.6),
        checkpoint_every: ckpt_every,
        augment: AugmentConfig {
            pairwise_n: g("n", 5.0) as usize,
            imagewise_ratio: g("imagewise", 0.5),
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let ckpt_dir = std::env::temp_dir().join(format!("arm_ckpt_{}", std::process::id()));
    let opts = TrainOptions {
        progress_every: Some(25),
        checkpoint_dir: ckpt_every.map(|_| ckpt_dir.clone()),
        ..TrainOptions::default()
    };
    let t1 = Instant::now();
    let out = train_icl(&corpus, &split, &model_cfg, &cfg, &opts).unwrap();
    let mut args: Vec<String> = kv.iter().map(|(k, v)| format!("{k}={v}")).collect();
    args.sort();
    eprintln!(
        "arm({}): trained in {:.0?}, final loss {:.4}",
        args.join(","),
        t1.elapsed(),
        out.log.epochs.last().unwrap().mean_loss
    );

    if let Some(every) = ckpt_every {
        let mut e = every;
        while e < epochs {
            let path = ckpt_dir.join(format!("epoch_{e:05}.ckpt"));
            if let Ok((m, _)) = load_checkpoint(&path) {
                let r = evaluate(&m, &corpus, &split, &EvalOptions::default()).unwrap();
                eprintln!("  epoch {e:3}: ratio 0 DSC {:.4} (empty {}/{})", r.mean_dsc, r.empty_pred_frames, r.total_frames);
            }
            e += every;
        }
        let _ = std::fs::remove_dir_all(&ckpt_dir);
    }
    for ratio in [0.0, 0.6] {
        let r = evaluate(
            &out.model,
            &corpus,
            &split,
            &EvalOptions { test_mask_ratio: ratio, ..EvalOptions::default() },
        )
        .unwrap();
        eprintln!(
            "  final ratio {ratio:.2}: DSC {:.4} IoU {:.4} (empty preds {}/{})",
            r.mean_dsc, r.mean_iou, r.empty_pred_frames, r.total_frames
        );
    }
}
