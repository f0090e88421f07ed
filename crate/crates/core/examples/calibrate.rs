//! One-off calibration probe: trains the three models the learning criteria
//! need (five pairing rounds, one round, no-context baseline) on a candidate
//! corpus, snapshots every 25 epochs, and prints per-epoch criteria numbers
//! so the acceptance thresholds can be frozen with margin.
//! Args: `key=value` synth overrides as in `arm.rs`.
//! Temporary development tool.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use iclseg::composer::AugmentConfig;
use iclseg::dataset::split_corpus;
use iclseg::inference::{evaluate, evaluate_query_only, EvalOptions};
use iclseg::model::{load_checkpoint, ModelConfig, Objective};
use iclseg::synthgen::{generate, SynthConfig};
use iclseg::trainer::{train_baseline, train_icl, TrainConfig, TrainOptions};

const EVERY: usize = 25;
const EPOCHS: usize = 300;

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
    let dirs: Vec<PathBuf> = ["n5", "n1", "base"]
        .iter()
        .map(|t| std::env::temp_dir().join(format!("calib_{t}_{}", std::process::id())))
        .collect();

    let cfg = |n: usize| TrainConfig {
        epochs: EPOCHS,
        checkpoint_every: Some(EVERY),
        augment: AugmentConfig { pairwise_n: n, ..AugmentConfig::default() },
        ..TrainConfig::default()
    };
    let opts = |d: &PathBuf| TrainOptions {
        checkpoint_dir: Some(d.clone()),
        progress_every: Some(100),
        ..TrainOptions::default()
    };

    let t0 = Instant::now();
    let n5 = train_icl(&corpus, &split, &model_cfg, &cfg(5), &opts(&dirs[0])).unwrap();
    eprintln!("n5 trained ({:.0?})", t0.elapsed());
    let t1 = Instant::now();
    let n1 = train_icl(&corpus, &split, &model_cfg, &cfg(1), &opts(&dirs[1])).unwrap();
    eprintln!("n1 trained ({:.0?})", t1.elapsed());
    let t2 = Instant::now();
    let base = train_baseline(&corpus, &split, &model_cfg, &cfg(5), &opts(&dirs[2])).unwrap();
    eprintln!("baseline trained ({:.0?})", t2.elapsed());

    let ev = |ratio: f64| EvalOptions { test_mask_ratio: ratio, ..EvalOptions::default() };
    eprintln!("epoch | n5@0    n5@.6   n1@0    base  | c6(dsc) c7(n5-n1) c8(0-.6) c9(n5>base)");
    let mut e = EVERY;
    while e <= EPOCHS {
        let load = |d: &PathBuf| load_checkpoint(&d.join(format!("epoch_{e:05}.ckpt")));
        let (m5, _) = load(&dirs[0]).unwrap();
        let (m1, _) = load(&dirs[1]).unwrap();
        let (mb, meta_b) = load(&dirs[2]).unwrap();
        assert_eq!(meta_b.objective, Objective::QueryOnly);
        let a = evaluate(&m5, &corpus, &split, &ev(0.0)).unwrap().mean_dsc;
        let b = evaluate(&m5, &corpus, &split, &ev(0.6)).unwrap().mean_dsc;
        let c = evaluate(&m1, &corpus, &split, &ev(0.0)).unwrap().mean_dsc;
        let d = evaluate_query_only(&mb, &corpus, &split, &ev(0.0)).unwrap().mean_dsc;
        eprintln!(
            "{e:5} | {a:.4}  {b:.4}  {c:.4}  {d:.4} | {:7.4} {:+9.4} {:+8.4} {}",
            a,
            a - c,
            a - b,
            if a > d { "yes" } else { "NO" }
        );
        e += EVERY;
    }
    // True final selections: last epoch for the paired models, best-val for
    // the baseline.
    let a = evaluate(&n5.model, &corpus, &split, &ev(0.0)).unwrap().mean_dsc;
    let b = evaluate(&n5.model, &corpus, &split, &ev(0.6)).unwrap().mean_dsc;
    let c = evaluate(&n1.model, &corpus, &split, &ev(0.0)).unwrap().mean_dsc;
    let d = evaluate_query_only(&base.model, &corpus, &split, &ev(0.0)).unwrap().mean_dsc;
    eprintln!("final | n5@0 {a:.4}  n5@.6 {b:.4}  n1@0 {c:.4}  best-val base {d:.4}");
    for dir in dirs {
        let _ = std::fs::remove_dir_all(dir);
    }
}
