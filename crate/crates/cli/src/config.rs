//! Run configuration: one JSON document layered over built-in defaults,
//! then `HYBRIDLM_SEED`, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use hybridlm::corpus::ScheduleConfig;
use hybridlm::model::ModelConfig;
use hybridlm::training::{OptimConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Failure;

pub const SEED_ENV: &str = "HYBRIDLM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: Vec<PathBuf>,
    pub vocab_size: usize,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    /// A model that trains in minutes on a laptop.
    fn default() -> Self {
        RunConfig {
            corpus: Vec::new(),
            vocab_size: 2048,
            model: ModelConfig {
                n_layers: 2,
                hidden_size: 128,
                ff_intermediate_size: 320,
                n_heads: 4,
                vocab_size: 0,
                max_seq_len: 128,
                ..ModelConfig::small()
            },
            schedule: ScheduleConfig {
                total_steps: 1000,
                batch_tokens_start: 4096,
                batch_tokens_end: 16384,
                seq_len_start: 64,
                seq_len_end: 128,
                ..ScheduleConfig::small()
            },
            optim: OptimConfig::small(),
            checkpoint_every: 250,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            optim: self.optim.clone(),
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// Corpus paths, which must be present and readable.
    pub fn corpus_files(&self) -> Result<&[PathBuf], Failure> {
        check_corpus(&self.corpus)?;
        Ok(&self.corpus)
    }
}

pub fn check_corpus(paths: &[PathBuf]) -> Result<(), Failure> {
    if paths.is_empty() {
        return Err(Failure::usage(
            "config key `corpus` is missing or empty; set it in the config file or pass --corpus",
        ));
    }
    for p in paths {
        if !p.is_file() {
            return Err(Failure::usage(format!(
                "config key `corpus`: no such file {}",
                p.display()
            )));
        }
    }
    Ok(())
}

/// Build the effective configuration. `sets` are `key.path=value` pairs;
/// values parse as JSON and fall back to plain strings.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, Failure> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let user: Value = serde_json::from_str(&text).map_err(|e| {
            Failure::usage(format!("config {} is not valid JSON: {e}", path.display()))
        })?;
        if !user.is_object() {
            return Err(Failure::usage(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        }
        merge(&mut value, user, "")?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed.trim().parse().map_err(|_| {
            Failure::usage(format!(
                "{SEED_ENV} must be an unsigned integer, got {seed:?}"
            ))
        })?;
        value["schedule"]["seed"] = seed.into();
    }
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {set:?}")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut patch = parsed;
        for part in key.trim().rsplit('.') {
            let mut m = Map::new();
            m.insert(part.to_string(), patch);
            patch = Value::Object(m);
        }
        merge(&mut value, patch, "")?;
    }
    serde_json::from_value(value).map_err(|e| Failure::usage(format!("invalid configuration: {e}")))
}

/// Overlay `patch` onto `base`, rejecting keys the defaults do not have.
fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<(), Failure> {
    let Value::Object(patch) = patch else {
        *base = patch;
        return Ok(());
    };
    let Value::Object(base) = base else {
        return Err(Failure::usage(format!(
            "config key `{prefix}` is not a section"
        )));
    };
    for (k, v) in patch {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match base.get_mut(&k) {
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
            Some(slot) => *slot = v,
            None => return Err(Failure::usage(format!("unknown config key `{key}`"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"corpus": ["a.txt"], "model": {"hidden_size": 64}}"#).unwrap();
        let c = load(Some(&p), &[]).unwrap();
        assert_eq!(c.model.hidden_size, 64);
        assert_eq!(c.model.n_heads, RunConfig::default().model.n_heads);
        assert_eq!(c.corpus, vec![PathBuf::from("a.txt")]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = load(None, &["model.hiden_size=3".into()]).unwrap_err();
        assert!(
            err.message().contains("model.hiden_size"),
            "{}",
            err.message()
        );
        assert_eq!(err.code(), 2);
    }

    #[test]
    fn sets_parse_json_or_strings() {
        let c = load(
            None,
            &["schedule.ratio=1:3".into(), "schedule.total_steps=7".into()],
        )
        .unwrap();
        assert_eq!(c.schedule.ratio.masked, 3);
        assert_eq!(c.schedule.total_steps, 7);
        let bad = load(None, &["schedule.ratio=1:".into()]).unwrap_err();
        assert_eq!(bad.code(), 2);
    }

    #[test]
    fn missing_corpus_names_the_key() {
        let err = RunConfig::default().corpus_files().unwrap_err();
        assert!(err.message().contains("`corpus`"));
    }
}
