//! TOML configuration. Every key has a default, so a missing file or an
//! empty one is a complete configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use r3prompt::pipeline::StageTemperatures;

/// Default config file name, picked up from the working directory when
/// `--config` is not given.
pub const DEFAULT_CONFIG_FILE: &str = "r3prompt.toml";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub provider: ProviderSection,
    pub run: RunSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    /// Base URL of an OpenAI-compatible chat-completions endpoint. Empty
    /// means unset: runs then need `--replay`.
    pub endpoint_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key
    /// itself never appears in config or flags.
    pub credential_env_name: String,
    /// Steady request pacing; 0 disables the limiter.
    pub requests_per_minute: u32,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            endpoint_url: String::new(),
            model: "gpt-3.5-turbo".into(),
            credential_env_name: "R3_API_KEY".into(),
            requests_per_minute: 60,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub k: usize,
    pub parallel_width: usize,
    pub seed: u64,
    pub max_tokens: u32,
    pub temperatures: StageTemperatures,
    /// Self-consistency sample count; 1 means a single final-stage draw.
    pub sc_n: usize,
    pub sc_temperature: f64,
    /// Trigger sentence for the instructed baseline. Unset falls back to
    /// the built-in default, with a warning.
    pub instructed_trigger: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            k: 8,
            parallel_width: 1,
            seed: 0,
            max_tokens: 512,
            temperatures: StageTemperatures::default(),
            sc_n: 1,
            sc_temperature: 0.7,
            instructed_trigger: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Optional directory whose `banks/` and `noise_templates.jsonl`
    /// override the built-in exemplars and distractor templates.
    pub assets_dir: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            cache_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("runs"),
            assets_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError {
    pub path: PathBuf,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config {}: {}", self.path.display(), self.message)
    }
}

/// Loads the config: an explicit `--config` path must exist and parse;
/// otherwise [`DEFAULT_CONFIG_FILE`] is used when present, and defaults
/// apply when it is not.
pub fn load_config(explicit: Option<&Path>) -> Result<AppConfig, ConfigError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = PathBuf::from(DEFAULT_CONFIG_FILE);
            if !p.exists() {
                return Ok(AppConfig::default());
            }
            p
        }
    };
    let text = std::fs::read_to_string(&path).map_err(|e| ConfigError {
        path: path.clone(),
        message: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| ConfigError {
        path,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_apply_without_a_file() {
        let cfg = load_config(None).unwrap();
        assert_eq!(cfg.run.k, 8);
        assert_eq!(cfg.run.sc_temperature, 0.7);
        assert_eq!(cfg.paths.cache_dir, PathBuf::from("cache"));
        assert!(cfg.provider.endpoint_url.is_empty());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            "[provider]\nendpoint_url = \"http://localhost:8080\"\n\n[run]\nseed = 41\n",
        )
        .unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.provider.endpoint_url, "http://localhost:8080");
        assert_eq!(cfg.provider.credential_env_name, "R3_API_KEY");
        assert_eq!(cfg.run.seed, 41);
        assert_eq!(cfg.run.parallel_width, 1);
    }

    #[test]
    fn unknown_keys_and_missing_explicit_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[provider]\napi_key = \"sk-123\"\n").unwrap();
        assert!(load_config(Some(&path)).is_err());
        assert!(load_config(Some(&dir.path().join("absent.toml"))).is_err());
    }
}
