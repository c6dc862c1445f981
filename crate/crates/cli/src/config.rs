use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use imcot_core::datagen::{DatagenConfig, RuleSet};
use imcot_core::rollout::RolloutConfig;
use imcot_core::{RewardWeights, Stage};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const ENV_ENDPOINT: &str = "IMCOT_EMBED_ENDPOINT";
pub const ENV_SEED: &str = "IMCOT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Template,
    Scripted,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    Canned,
    Http,
}

/// Fully resolved settings for one run. This is what a manifest records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub groups_out: Option<PathBuf>,
    pub rewards_out: Option<PathBuf>,
    pub images: Option<PathBuf>,

    pub stage: Stage,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub clamp_similarity: bool,
    pub max_tool_calls: usize,
    pub group_size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub policy: String,
    pub synthetic: Option<usize>,

    pub embedder: EmbedderKind,
    pub embed_endpoint: Option<String>,
    pub mock_seed: u64,
    pub mock_dim: usize,
    pub mock_noise: f64,
    pub timeout_ms: u64,
    pub retries: u32,

    pub threshold: f64,
    pub top_n: usize,
    pub k: usize,
    pub w_format: f64,
    pub w_consistency: f64,
    pub w_distinct: f64,
    pub overlap_threshold: f64,
    pub generator: GeneratorKind,
    pub generator_script: Option<PathBuf>,
    pub generator_endpoint: Option<String>,

    pub judge: JudgeKind,
    pub judge_endpoint: Option<String>,
    pub judge_score: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = RewardWeights::default();
        let r = RolloutConfig::default();
        let d = DatagenConfig::default();
        RunConfig {
            input: None,
            output: None,
            groups_out: None,
            rewards_out: None,
            images: None,
            stage: Stage::Stage1,
            lambda: w.lambda,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            clamp_similarity: w.clamp_similarity,
            max_tool_calls: r.max_tool_calls,
            group_size: r.group_size,
            seed: 0,
            epsilon: imcot_core::grpo::DEFAULT_EPSILON,
            policy: "grounded,hallucinating,random,spam".into(),
            synthetic: None,
            embedder: EmbedderKind::Mock,
            embed_endpoint: None,
            mock_seed: 7,
            mock_dim: imcot_core::embedding::DEFAULT_MOCK_DIM,
            mock_noise: imcot_core::embedding::DEFAULT_MOCK_NOISE,
            timeout_ms: 10_000,
            retries: 3,
            threshold: d.threshold,
            top_n: d.top_n,
            k: d.k,
            w_format: d.rules.w_format,
            w_consistency: d.rules.w_consistency,
            w_distinct: d.rules.w_distinct,
            overlap_threshold: d.rules.overlap_threshold,
            generator: GeneratorKind::Template,
            generator_script: None,
            generator_endpoint: None,
            judge: JudgeKind::Canned,
            judge_endpoint: None,
            judge_score: 5,
        }
    }
}

impl RunConfig {
    pub fn weights(&self) -> Result<RewardWeights, CliError> {
        let w = RewardWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            clamp_similarity: self.clamp_similarity,
        };
        w.validate().map_err(CliError::input)?;
        Ok(w)
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            max_tool_calls: self.max_tool_calls,
            group_size: self.group_size,
            stage: self.stage,
            seed: self.seed,
        }
    }

    pub fn datagen(&self) -> DatagenConfig {
        DatagenConfig {
            k: self.k,
            threshold: self.threshold,
            top_n: self.top_n,
            rules: RuleSet {
                w_format: self.w_format,
                w_consistency: self.w_consistency,
                w_distinct: self.w_distinct,
                overlap_threshold: self.overlap_threshold,
            },
            ..DatagenConfig::default()
        }
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input.as_deref().ok_or_else(|| CliError::input("missing --in"))
    }
}

/// Settings from flags or a config file; anything left unset falls through
/// to the next source.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Config file (TOML or JSON) or a run manifest to replay.
    #[arg(long, global = true, value_name = "PATH")]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Input JSONL file.
    #[arg(long = "in", global = true, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Output file; stdout when absent. A manifest is written beside it.
    #[arg(long = "out", global = true, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// rollout: also write group reports here.
    #[arg(long, global = true, value_name = "PATH")]
    pub groups_out: Option<PathBuf>,
    /// rollout: also write reward reports here.
    #[arg(long, global = true, value_name = "PATH")]
    pub rewards_out: Option<PathBuf>,
    /// Directory image ids are resolved against.
    #[arg(long, global = true, value_name = "DIR")]
    pub images: Option<PathBuf>,

    /// Reward stage, 1 or 2.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: Option<u8>,
    /// Decay applied to successive tool-call similarities.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Accuracy weight.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Format weight.
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Tool-bonus weight.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Floor similarities at zero.
    #[arg(long, global = true)]
    pub clamp_similarity: Option<bool>,
    #[arg(long, global = true)]
    pub max_tool_calls: Option<usize>,
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Advantage denominator offset.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// rollout: comma-separated policies, assigned to rollouts round-robin
    /// (grounded, hallucinating, random, spam, spam-yield, immediate, immediate-wrong, garbage).
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// rollout: generate this many synthetic scenes instead of reading --in.
    #[arg(long, global = true, value_name = "N")]
    pub synthetic: Option<usize>,

    #[arg(long, global = true, value_enum)]
    pub embedder: Option<EmbedderKind>,
    /// Embedding service base URL (env IMCOT_EMBED_ENDPOINT).
    #[arg(long, global = true, value_name = "URL")]
    pub embed_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub mock_seed: Option<u64>,
    #[arg(long, global = true)]
    pub mock_dim: Option<usize>,
    #[arg(long, global = true)]
    pub mock_noise: Option<f64>,
    /// Per-request timeout for remote services.
    #[arg(long, global = true)]
    pub timeout_ms: Option<u64>,
    /// Attempts per remote request.
    #[arg(long, global = true)]
    pub retries: Option<u32>,

    /// datagen: minimum quality score kept.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// datagen: items kept per source.
    #[arg(long, global = true)]
    pub top_n: Option<usize>,
    /// datagen: candidates requested per source.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub w_format: Option<f64>,
    #[arg(long, global = true)]
    pub w_consistency: Option<f64>,
    #[arg(long, global = true)]
    pub w_distinct: Option<f64>,
    #[arg(long, global = true)]
    pub overlap_threshold: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub generator: Option<GeneratorKind>,
    /// datagen: JSON script for the scripted generator.
    #[arg(long, global = true, value_name = "PATH")]
    pub generator_script: Option<PathBuf>,
    #[arg(long, global = true, value_name = "URL")]
    pub generator_endpoint: Option<String>,

    #[arg(long, global = true, value_enum)]
    pub judge: Option<JudgeKind>,
    #[arg(long, global = true, value_name = "URL")]
    pub judge_endpoint: Option<String>,
    /// eval-drivelmm: rating the canned judge gives on every criterion.
    #[arg(long, global = true)]
    pub judge_score: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<Value>,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn layer(base: &mut Map<String, Value>, over: Value) {
    if let Value::Object(m) = over {
        for (k, v) in m {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
}

fn settings_value(s: &Settings) -> Result<Value, CliError> {
    let mut v = serde_json::to_value(s).map_err(CliError::input)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("config");
    }
    Ok(v)
}

/// Values from a config file or manifest, checked against the command.
fn file_layer(path: &Path, command: &str) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let settings: Settings = if is_toml {
        toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
    } else {
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        if v.get("command").is_some() && v.get("config").is_some() {
            let m: Manifest =
                serde_json::from_value(v).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            if m.command != command {
                return Err(CliError::input(format!(
                    "manifest {} records `{}`, not `{command}`",
                    path.display(),
                    m.command
                )));
            }
            return serde_json::to_value(m.config).map_err(CliError::input);
        }
        serde_json::from_value(v).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
    };
    settings_value(&settings)
}

fn env_layer(env: &dyn Fn(&str) -> Option<String>) -> Result<Value, CliError> {
    let mut m = Map::new();
    if let Some(url) = env(ENV_ENDPOINT).filter(|u| !u.is_empty()) {
        m.insert("embed_endpoint".into(), Value::String(url));
    }
    if let Some(seed) = env(ENV_SEED).filter(|s| !s.is_empty()) {
        let n: u64 =
            seed.trim().parse().map_err(|_| CliError::input(format!("{ENV_SEED}={seed:?} is not an integer")))?;
        m.insert("seed".into(), Value::from(n));
    }
    Ok(Value::Object(m))
}

/// Flags > environment > config file > defaults.
pub fn resolve(flags: &Settings, command: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<RunConfig, CliError> {
    let Value::Object(mut merged) = serde_json::to_value(RunConfig::default()).map_err(CliError::input)? else {
        unreachable!("RunConfig serializes to an object");
    };
    if let Some(path) = &flags.config {
        layer(&mut merged, file_layer(path, command)?);
    }
    layer(&mut merged, env_layer(env)?);
    layer(&mut merged, settings_value(flags)?);
    let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(CliError::input)?;
    if cfg.group_size == 0 {
        return Err(CliError::input("--group-size must be at least 1"));
    }
    if cfg.epsilon.is_nan() || cfg.epsilon <= 0.0 {
        return Err(CliError::input("--epsilon must be positive"));
    }
    if !(1..=10).contains(&cfg.judge_score) {
        return Err(CliError::input("--judge-score must lie in 1..=10"));
    }
    cfg.weights()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn precedence() {
        let dir = std::env::temp_dir().join(format!("imcot-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let file = dir.join("c.toml");
        fs::write(&file, "seed = 3\nlambda = 0.25\nalpha = 2.0\n").unwrap();
        let flags = Settings { config: Some(file), alpha: Some(4.0), ..Default::default() };
        let env = |k: &str| (k == ENV_SEED).then(|| "9".to_string());
        let cfg = resolve(&flags, "score", &env).unwrap();
        assert_eq!(cfg.lambda, 0.25);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.alpha, 4.0);
        assert_eq!(cfg.beta, 0.5);
    }

    #[test]
    fn manifest_command_must_match() {
        let dir = std::env::temp_dir().join(format!("imcot-man-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let file = dir.join("m.json");
        let m =
            Manifest { command: "rollout".into(), version: "0".into(), config: RunConfig::default(), summary: None };
        fs::write(&file, serde_json::to_string(&m).unwrap()).unwrap();
        let flags = Settings { config: Some(file.clone()), ..Default::default() };
        assert!(resolve(&flags, "score", &no_env).is_err());
        assert_eq!(resolve(&flags, "rollout", &no_env).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = std::env::temp_dir().join(format!("imcot-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let file = dir.join("c.toml");
        fs::write(&file, "lamda = 0.3\n").unwrap();
        let flags = Settings { config: Some(file), ..Default::default() };
        assert!(resolve(&flags, "score", &no_env).is_err());
    }

    #[test]
    fn bad_env_seed() {
        let env = |k: &str| (k == ENV_SEED).then(|| "many".to_string());
        assert!(resolve(&Settings::default(), "rollout", &env).is_err());
    }
}
