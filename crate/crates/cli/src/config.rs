//! Run configuration: one JSON document, layered as defaults < file <
//! `ABOUND_SEED` < flags, and hashed to name the run directory.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use abound::bundle::SynthConfig;
use abound::infer::ScoreConfig;
use abound::trainer::TrainConfig;
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const SEED_ENV: &str = "ABOUND_SEED";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fpr_limit: f64,
    /// Evenly spaced PRO thresholds; `None` sweeps every distinct score.
    pub pro_thresholds: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            pro_thresholds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: String,
    pub bundle: Option<String>,
    pub checkpoint: Option<String>,
    pub scores: Option<String>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: "runs".into(),
            bundle: None,
            checkpoint: None,
            scores: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Also write every anomaly map as an ASCII PGM image.
    pub pgm: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    pub output: OutputConfig,
}

/// One `key.path=value` override. Values parse as JSON, falling back to a string.
pub fn parse_override(arg: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{arg}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("`{key}` is not a valid key")));
    }
    for (depth, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("{}: not a section", parts[..depth].join(".")))
        })?;
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

impl RunConfig {
    /// Layers the file, the seed variable and the overrides, then validates.
    pub fn resolve(
        file: Option<&Path>,
        env_seed: Option<&str>,
        overrides: &[(String, Value)],
    ) -> Result<Self, CliError> {
        let mut doc = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Map::new()),
        };
        if !doc.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        if let Some(raw) = env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}: `{raw}` is not an unsigned integer")))?;
            for key in ["synth.seed", "train.seed"] {
                set_path(&mut doc, key, seed.into())?;
            }
        }
        for (key, value) in overrides {
            set_path(&mut doc, key, value.clone())?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let section = |name: &'static str| move |e: abound::Error| CliError::Config(e.within(name).to_string());
        self.synth.validate().map_err(section("synth"))?;
        self.train.validate().map_err(section("train"))?;
        self.score.validate().map_err(section("score"))?;
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return Err(CliError::Config(format!(
                "eval.fpr_limit must lie in (0, 1], got {}",
                self.eval.fpr_limit
            )));
        }
        if self.eval.pro_thresholds.is_some_and(|n| n < 2) {
            return Err(CliError::Config("eval.pro_thresholds must be at least 2".into()));
        }
        if self.train.dcf.dim != self.synth.dim {
            return Err(CliError::Config(format!(
                "train.dcf.dim {} does not match synth.dim {}",
                self.train.dcf.dim, self.synth.dim
            )));
        }
        Ok(())
    }

    /// Input path for `key` (`bundle`, `checkpoint` or `scores`).
    pub fn input(&self, key: &str) -> Result<PathBuf, CliError> {
        let value = match key {
            "bundle" => &self.paths.bundle,
            "checkpoint" => &self.paths.checkpoint,
            "scores" => &self.paths.scores,
            _ => unreachable!("unknown input {key}"),
        };
        value
            .as_deref()
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Config(format!("paths.{key}: required by this command")))
    }

    /// Canonical JSON of the command and the resolved config.
    pub fn canonical(&self, command: &str) -> String {
        serde_json::to_string(&serde_json::json!({ "command": command, "config": self }))
            .expect("config serializes")
    }

    /// 64-bit FNV-1a of [`RunConfig::canonical`].
    pub fn hash(&self, command: &str) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.canonical(command).as_bytes());
        h.finish()
    }

    pub fn run_dir(&self, command: &str) -> PathBuf {
        Path::new(&self.paths.out).join(format!("{command}-{:016x}", self.hash(command)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn over(args: &[&str]) -> Vec<(String, Value)> {
        args.iter().map(|a| parse_override(a).unwrap()).collect()
    }

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = RunConfig::resolve(None, None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.lr, 1.5e-2);
        assert_eq!(cfg.synth.n_classes, 3);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::resolve(None, None, &over(&["train.attack.beta=0", "paths.bundle=data/b"])).unwrap();
        assert_eq!(cfg.train.attack.beta, 0.0);
        assert_eq!(cfg.paths.bundle.as_deref(), Some("data/b"));
    }

    #[test]
    fn env_seed_sets_both_seeds_and_flags_win() {
        let cfg = RunConfig::resolve(None, Some("7"), &[]).unwrap();
        assert_eq!((cfg.synth.seed, cfg.train.seed), (7, 7));
        let cfg = RunConfig::resolve(None, Some("7"), &over(&["train.seed=3"])).unwrap();
        assert_eq!((cfg.synth.seed, cfg.train.seed), (7, 3));
        assert!(matches!(RunConfig::resolve(None, Some("x"), &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::resolve(None, None, &over(&["train.attack.gamma=1"])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.attack") && msg.contains("gamma"), "{msg}");
    }

    #[test]
    fn invalid_values_are_named() {
        let msg = RunConfig::resolve(None, None, &over(&["train.attack.beta=-1"]))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("train.attack.beta"), "{msg}");
        let msg = RunConfig::resolve(None, None, &over(&["train.epochs=\"many\""]))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("train.epochs"), "{msg}");
    }

    #[test]
    fn hash_tracks_config_and_command() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.attack.beta = 0.0;
        assert_eq!(a.hash("train"), RunConfig::default().hash("train"));
        assert_ne!(a.hash("train"), b.hash("train"));
        assert_ne!(a.hash("train"), a.hash("score"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::resolve(None, Some("11"), &over(&["train.epochs=3"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), None, &[]).unwrap(), cfg);
    }
}
