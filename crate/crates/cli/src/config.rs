//! One JSON document drives every command.
//!
//! Corpus synthesis, split, model, training, and evaluation settings live
//! side by side in [`ExperimentConfig`] so a single file pins an entire
//! experiment.  Every field is optional in the file (library defaults
//! apply), subcommand flags override fields, and each command writes the
//! fully resolved result next to its outputs together with a SHA-256
//! fingerprint so runs can be compared by hash.

use std::fs;
use std::path::{Path, PathBuf};

use iclseg::inference::EvalOptions;
use iclseg::model::ModelConfig;
use iclseg::synthgen::SynthConfig;
use iclseg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Annotation-budget split settings; the remaining sections are the library
/// config types re-used verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    /// Fraction of each video's frames that receive annotations.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams { fraction: 0.05, seed: 42 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    /// Seed for corpus synthesis; split, training, and evaluation carry
    /// their own seeds inside their sections.
    pub synth_seed: u64,
    pub split: SplitParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            synth_seed: 42,
            split: SplitParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file, or returns the defaults when no path is given.
    /// Parse errors carry the JSON path of the offending field.
    pub fn load(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        parse_json(&text, path)
    }

    /// Checks every section eagerly so bad values are reported before any
    /// expensive work starts.
    pub fn validate(&self) -> iclseg::Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if !(self.split.fraction > 0.0 && self.split.fraction <= 1.0) {
            return Err(iclseg::Error::InvalidConfig {
                field: "split.fraction",
                message: format!("must be in (0, 1], got {}", self.split.fraction),
            });
        }
        Ok(())
    }

    /// Fingerprint of the resolved config: SHA-256 over its compact JSON
    /// serialization (field order is fixed by the struct definitions).
    pub fn sha256_hex(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialization cannot fail");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Writes `{"config_sha256": ..., "config": {...}}` to `path`.
    pub fn write_resolved(&self, path: &Path) -> Result<(), CliError> {
        let doc = ResolvedConfig { config_sha256: self.sha256_hex(), config: self.clone() };
        let text = serde_json::to_string_pretty(&doc)
            .expect("config serialization cannot fail");
        fs::write(path, text)
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

/// The on-disk shape of a resolved config artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config_sha256: String,
    pub config: ExperimentConfig,
}

/// Deserializes with field-path error reporting: a typo in a nested section
/// surfaces as e.g. `synth.noise_sigm: unknown field`.
pub fn parse_json<T: serde::de::DeserializeOwned>(
    text: &str,
    origin: &Path,
) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let loc = if path == "." { String::new() } else { format!(" at `{path}`") };
        CliError::usage(format!("invalid config {}{loc}: {}", origin.display(), e.inner()))
    })
}

/// Sibling path for a resolved-config artifact when the command's output is
/// a file rather than a directory: `split.json` -> `split.config.json`.
pub fn sibling_config_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}.config.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = parse_json(&json, Path::new("mem")).unwrap();
        assert_eq!(back.sha256_hex(), cfg.sha256_hex());
        assert_eq!(back.split.fraction, 0.05);
        assert_eq!(back.synth_seed, 42);
    }

    #[test]
    fn empty_object_yields_defaults() {
        let cfg: ExperimentConfig = parse_json("{}", Path::new("mem")).unwrap();
        assert_eq!(cfg.sha256_hex(), ExperimentConfig::default().sha256_hex());
    }

    #[test]
    fn unknown_nested_field_reports_its_path() {
        let err = parse_json::<ExperimentConfig>(
            r#"{"train": {"learning_rate": 0.1}}"#,
            Path::new("exp.json"),
        )
        .unwrap_err();
        assert!(err.usage);
        assert!(err.message.contains("train"), "message: {}", err.message);
        assert!(err.message.contains("learning_rate"), "message: {}", err.message);
    }

    #[test]
    fn wrong_type_reports_field_path() {
        let err = parse_json::<ExperimentConfig>(
            r#"{"synth": {"noise_sigma": "high"}}"#,
            Path::new("exp.json"),
        )
        .unwrap_err();
        assert!(err.usage);
        assert!(err.message.contains("synth.noise_sigma"), "message: {}", err.message);
    }

    #[test]
    fn different_configs_hash_differently() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        b.train.lr += 1e-6;
        assert_ne!(a.sha256_hex(), b.sha256_hex());
    }

    #[test]
    fn out_of_range_fraction_is_invalid() {
        let mut cfg = ExperimentConfig::default();
        cfg.split.fraction = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sibling_path_keeps_directory() {
        let p = sibling_config_path(Path::new("/tmp/x/split.json"));
        assert_eq!(p, Path::new("/tmp/x/split.config.json"));
    }
}
