//! Run configuration: a TOML file with `[train]`, `[tasks]`, `[eval]`,
//! `[grad_check]` and `[gen]` sections, plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use comln::embedding::Activation;
use comln::tasks::TaskGenConfig;
use comln::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out episodes scored after training; 0 skips evaluation.
    pub episodes: u64,
    /// Added to the task seed to draw held-out episodes.
    pub seed_offset: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 200, seed_offset: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub horizon: f64,
    pub fd_eps: f64,
    /// Unrolled steps for the BPTT comparison, run at step 0.01.
    pub bptt_steps: usize,
    pub fd_tolerance: f64,
    pub bptt_tolerance: f64,
    /// Embedding used for the checked instances, so the `Φ` gradient is exercised.
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub test_shots: usize,
    /// Scale of the random `W₀` drawn for each instance.
    pub w0_std: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            horizon: 0.5,
            fd_eps: 1e-5,
            bptt_steps: 20,
            fd_tolerance: 1e-4,
            bptt_tolerance: 1e-8,
            layers: vec![8],
            activation: Activation::Tanh,
            test_shots: 3,
            w0_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub count: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { count: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub tasks: TaskGenConfig,
    /// Pre-embedded episodes to train on instead of synthetic ones.
    pub episodes: Option<PathBuf>,
    pub eval: EvalConfig,
    pub grad_check: GradCheckConfig,
    pub gen: GenConfig,
}

#[derive(Debug)]
pub enum ConfigError {
    Missing(PathBuf),
    Unreadable(PathBuf, std::io::Error),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Missing(p) => write!(f, "config file not found: {}", p.display()),
            ConfigError::Unreadable(p, e) => write!(f, "cannot read config {}: {e}", p.display()),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to the table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Invalid(format!("bad override key {path:?}")));
    }
    let mut node = table;
    for key in &keys[..keys.len() - 1] {
        let entry = node.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("override {path:?} descends into a non-table")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Loads `path` (or defaults when `None`) and applies the overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table = match path {
        Some(p) => {
            if !p.exists() {
                return Err(ConfigError::Missing(p.to_path_buf()));
            }
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Unreadable(p.to_path_buf(), e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tasks.validate().map_err(ConfigError::Invalid)?;
        let g = &self.grad_check;
        if !(g.horizon > 0.0 && g.fd_eps > 0.0 && g.w0_std >= 0.0) || g.bptt_steps == 0 || g.test_shots == 0 {
            return Err(ConfigError::Invalid(
                "grad_check needs positive horizon, fd_eps, bptt_steps and test_shots".into(),
            ));
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load(None, &["train.lr=0.05".into(), "tasks.way=3".into(), "train.solver.method=euler".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.05);
        assert_eq!(cfg.tasks.way, 3);
        assert_eq!(cfg.train.solver.method, comln::solver::Method::Euler);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(load(None, &["train.learning_rate=0.1".into()]), Err(ConfigError::Invalid(_))));
        assert!(matches!(load(None, &["nonsense=1".into()]), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = load(None, &["train.iterations=7".into()]).unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load(Some(Path::new("/no/such/config.toml")), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Missing(_)));
        assert!(err.to_string().contains("/no/such/config.toml"));
    }
}
