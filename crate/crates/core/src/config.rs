//! The run configuration document shared by every CLI command.
//!
//! A document is JSON. Missing fields take their defaults, unknown fields are
//! rejected, and any leaf can be overridden by a dotted `key=value` pair.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::SceneConfig;
use crate::error::{Error, Result};
use crate::probe::ProbeConfig;
use crate::rng::{self, stream};
use crate::trainer::PretrainConfig;

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "FVP_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_trajectories: usize,
    /// Trajectories in the held-out corpus, generated from a disjoint seed.
    pub held_out_trajectories: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_trajectories: 50,
            held_out_trajectories: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_pairs: 32 }
    }
}

/// Default locations used when a command gets no explicit path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub held_out: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "data/train".into(),
            held_out: "data/held_out".into(),
            checkpoint: "runs/fvp.ckpt".into(),
            out: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub scene: SceneConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            seed: 0,
            scene: SceneConfig::default(),
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a document and applies `overrides` (`a.b.c=value`) on top.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !doc.is_object() {
            return Err(Error::Config("config document must be a JSON object".into()));
        }
        Self::from_value(doc, overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: path.into() },
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults plus `overrides`, for runs without a config file.
    pub fn with_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_value(Value::Object(Default::default()), overrides)
    }

    fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self> {
        let base = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        for item in overrides {
            apply_override(&mut doc, &base, item)?;
        }
        if let Some(v) = doc.get("schema_version") {
            let found = v.as_u64().ok_or_else(|| Error::Config("schema_version must be an integer".into()))?;
            if found != u64::from(RUN_CONFIG_SCHEMA_VERSION) {
                return Err(Error::Config(format!(
                    "schema_version {found} unsupported (expected {RUN_CONFIG_SCHEMA_VERSION})"
                )));
            }
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed with `FVP_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(s) => self.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer")))?,
            Err(std::env::VarError::NotPresent) => {}
            Err(e) => return Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.scene.validate().map_err(wrap)?;
        self.pretrain.validate().map_err(wrap)?;
        self.probe.validate().map_err(wrap)?;
        if self.corpus.n_trajectories == 0 || self.corpus.held_out_trajectories == 0 || self.eval.n_pairs == 0 {
            return Err(Error::Config("corpus sizes and eval.n_pairs must be >= 1".into()));
        }
        Ok(())
    }

    /// Pre-training config with the run seed applied.
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    /// Generator seed of the held-out corpus, disjoint from the training seed.
    pub fn held_out_seed(&self) -> u64 {
        held_out_seed(self.seed)
    }
}

pub fn held_out_seed(seed: u64) -> u64 {
    rng::derive(seed, stream::HELD_OUT)
}

fn apply_override(doc: &mut Value, base: &Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    // Only paths that exist in the schema may be set.
    let mut probe = base;
    for p in &parts {
        probe = probe
            .get(p)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: parent is not an object")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("`{key}`: parent is not an object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips_through_json() {
        let text = serde_json::to_string_pretty(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&text, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"pretrain": {"epochz": 3}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = RunConfig::from_json("{}", &["scene.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("scene.bogus"), "{err}");
    }

    #[test]
    fn dotted_overrides_reach_leaves() {
        let cfg = RunConfig::from_json(
            r#"{"pretrain": {"epochs": 3}}"#,
            &[
                "pretrain.batch_size=4".into(),
                "pretrain.condition_mode=current_frame".into(),
                "probe.arms=[\"frozen\"]".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.pretrain.batch_size, 4);
        assert_eq!(cfg.pretrain.condition_mode, crate::trainer::ConditionMode::CurrentFrame);
        assert_eq!(cfg.probe.arms, vec![crate::probe::Arm::Frozen]);
        assert_eq!(cfg.pretrain_config().seed, 9);
    }

    #[test]
    fn wrong_schema_version_rejected() {
        assert!(RunConfig::from_json(r#"{"schema_version": 2}"#, &[]).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::from_json(r#"{"pretrain": {"epochs": 0}}"#, &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn held_out_seed_differs() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.held_out_seed(), cfg.seed);
    }
}
