//! Layered configuration: TOML file, then `ATTNGUIDE_*` environment
//! overrides, then command-line flags. The hash of the resolved config
//! identifies a run; formatting and comments never affect it.

use attnguide_core::trainer::TrainConfig;
use attnguide_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment override prefix. Double underscores separate path segments:
/// `ATTNGUIDE_TRAIN__BATCH_SIZE=4` sets `[train] batch_size`.
pub const ENV_PREFIX: &str = "ATTNGUIDE_";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub priors: PriorsSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: Option<PathBuf>,
    /// Alternative prompt template file; the built-in bank otherwise.
    pub prompt_bank: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Reverse-diffusion steps when generating.
    pub steps: usize,
    pub samples_per_prompt: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { steps: 50, samples_per_prompt: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorsSection {
    pub count: usize,
    pub seed: u64,
}

impl Default for PriorsSection {
    fn default() -> Self {
        PriorsSection { count: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// "builtin" or "precomputed"; the latter reads embeddings from a file.
    pub embedder: String,
    pub precomputed: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { embedder: "builtin".into(), precomputed: None }
    }
}

/// Load, apply environment overrides, resolve the `guidance = "none"`
/// shorthand, and apply the `--seed` flag. Returns the config plus its hash.
pub fn load_config(path: Option<&Path>, seed_flag: Option<u64>) -> Result<(AppConfig, String)> {
    let table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::validation(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let mut value = toml::Value::Table(table);
    let mut overrides: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    overrides.sort();
    apply_overrides(&mut value, &overrides)?;
    resolve_guidance_none(&mut value);

    let mut config: AppConfig =
        value.try_into().map_err(|e| Error::validation(format!("config: {e}")))?;
    if let Some(seed) = seed_flag {
        config.train.seed = seed;
        config.sample.seed = seed;
        config.priors.seed = seed;
    }
    let hash = config_hash(&config)?;
    Ok((config, hash))
}

fn apply_overrides(root: &mut toml::Value, vars: &[(String, String)]) -> Result<()> {
    for (key, raw) in vars {
        let rest = key.strip_prefix(ENV_PREFIX).unwrap();
        let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::validation(format!("malformed override variable {key}")));
        }
        set_path(root, &path, parse_scalar(raw))
            .map_err(|e| Error::validation(format!("{key}: {e}")))?;
    }
    Ok(())
}

/// Parse an override value with TOML scalar rules, falling back to a string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(
    node: &mut toml::Value,
    path: &[String],
    value: toml::Value,
) -> std::result::Result<(), String> {
    let table = node.as_table_mut().ok_or_else(|| "not a table".to_string())?;
    match path {
        [] => Err("empty path".into()),
        [leaf] => {
            table.insert(leaf.clone(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table
                .entry(head.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            set_path(child, rest, value)
        }
    }
}

/// `guidance = "none"` is CLI shorthand for hard guidance with zero weight;
/// both spellings resolve (and hash) identically.
fn resolve_guidance_none(root: &mut toml::Value) {
    let Some(train) = root.get_mut("train").and_then(|v| v.as_table_mut()) else {
        return;
    };
    if train.get("guidance").and_then(|v| v.as_str()) == Some("none") {
        train.insert("guidance".into(), toml::Value::String("hard".into()));
        train.insert("delta_attn".into(), toml::Value::Float(0.0));
    }
}

pub fn config_hash(config: &AppConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use attnguide_core::diffusion::ParamSelector;
    use attnguide_core::guidance::GuidanceMode;

    fn from_text(text: &str) -> AppConfig {
        let mut value = toml::Value::Table(text.parse::<toml::Table>().unwrap());
        resolve_guidance_none(&mut value);
        value.try_into().unwrap()
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let config = from_text("");
        assert_eq!(config.train.steps, TrainConfig::default().steps);
        assert_eq!(config.priors.count, 200);
        assert_eq!(config.sample.samples_per_prompt, 2);
        assert_eq!(config.eval.embedder, "builtin");
    }

    #[test]
    fn sections_deserialize() {
        let config = from_text(
            r#"
            [dataset]
            manifest = "data/manifest.json"
            [train]
            steps = 7
            selector = "qkv"
            guidance = "soft"
            [sample]
            samples_per_prompt = 5
            "#,
        );
        assert_eq!(config.dataset.manifest.as_deref(), Some(Path::new("data/manifest.json")));
        assert_eq!(config.train.steps, 7);
        assert_eq!(config.train.selector, ParamSelector::Qkv);
        assert_eq!(config.train.guidance, GuidanceMode::Soft);
        assert_eq!(config.sample.samples_per_prompt, 5);
    }

    #[test]
    fn guidance_none_means_zero_weight() {
        let config = from_text("[train]\nguidance = \"none\"\ndelta_attn = 3.0");
        assert_eq!(config.train.guidance, GuidanceMode::Hard);
        assert_eq!(config.train.delta_attn, 0.0);
        let plain = from_text("[train]\nguidance = \"hard\"\ndelta_attn = 0.0");
        assert_eq!(config_hash(&config).unwrap(), config_hash(&plain).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let value = toml::Value::Table("[train]\nstepz = 7".parse::<toml::Table>().unwrap());
        assert!(value.try_into::<AppConfig>().is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut value = toml::Value::Table("[train]\nsteps = 1".parse::<toml::Table>().unwrap());
        let vars = vec![
            ("ATTNGUIDE_TRAIN__BATCH_SIZE".to_string(), "4".to_string()),
            ("ATTNGUIDE_TRAIN__LR".to_string(), "0.5".to_string()),
            ("ATTNGUIDE_TRAIN__SELECTOR".to_string(), "\"qv\"".to_string()),
            ("ATTNGUIDE_EVAL__EMBEDDER".to_string(), "builtin".to_string()),
        ];
        apply_overrides(&mut value, &vars).unwrap();
        let config: AppConfig = value.try_into().unwrap();
        assert_eq!(config.train.batch_size, 4);
        assert_eq!(config.train.lr, 0.5);
        assert_eq!(config.train.selector, ParamSelector::Qv);
        assert_eq!(config.train.steps, 1);
        assert_eq!(config.eval.embedder, "builtin");
    }

    #[test]
    fn hash_tracks_semantics_not_formatting() {
        let a = from_text("[train]\nsteps = 5\nlr = 0.001");
        let b = from_text("# comment\n[ train ]\nlr = 0.001\nsteps = 5");
        let c = from_text("[train]\nsteps = 6\nlr = 0.001");
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
    }
}
