//! The single TOML configuration file. Every key is required and unknown
//! keys are rejected, so a config file always states the full setup.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::BuildConfig;
use crate::generator::{
    Generator, GeneratorError, LocalCommandGenerator, MockGenerator, MockPolicy, PromptError,
    PromptPool, RemoteConfig, RemoteGenerator,
};
use crate::mids::MidsConfig;
use crate::model::{ForgeryType, Manifest};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalBackend {
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Images processed concurrently by build, mining and batch inference.
    pub max_concurrency: usize,
    pub mock: MockPolicy,
    pub remote: RemoteConfig,
    pub local: LocalBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub delta: f64,
    pub hypothetical_fraction: f64,
    pub budget: usize,
    pub seed: u64,
    pub class_caps: BTreeMap<ForgeryType, usize>,
    /// Prompt template file, or `builtin` for the bundled pool.
    pub prompt_pool: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub markdown: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewSection {
    pub port: u16,
    /// Header carrying the shared reviewer token.
    pub token_header: String,
    /// Environment variable holding the token.
    pub token_env: String,
    pub page_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub backend: BackendSection,
    pub dataset: DatasetSection,
    pub mids: MidsConfig,
    pub train: TrainConfig,
    pub bench: BenchSection,
    pub review: ReviewSection,
}

/// Written by `ffaa config init`; parses to [`Config::default`].
pub const DEFAULT_CONFIG: &str = include_str!("default_config.toml");

impl Default for Config {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG, "<builtin>").expect("bundled default config is valid")
    }
}

impl Config {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Schema {
            path: origin.to_string(),
            reason: e.message().to_string() + &span_hint(text, e.span()),
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        let schema = |reason: String| ConfigError::Schema {
            path: origin.to_string(),
            reason,
        };
        self.backend
            .mock
            .validate()
            .map_err(|e| schema(format!("backend.mock: {e}")))?;
        if self.backend.max_concurrency == 0 {
            return Err(schema("backend.max_concurrency must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.hypothetical_fraction) {
            return Err(schema(
                "dataset.hypothetical_fraction outside [0, 1]".into(),
            ));
        }
        self.build_config()
            .validate()
            .map_err(|e| schema(format!("dataset: {e}")))?;
        self.mids
            .validate()
            .map_err(|e| schema(format!("mids: {e}")))?;
        self.train
            .validate()
            .map_err(|e| schema(format!("train: {e}")))?;
        if self.review.page_size == 0 {
            return Err(schema("review.page_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn build_config(&self) -> BuildConfig {
        BuildConfig {
            delta: self.dataset.delta,
            budget: self.dataset.budget,
            seed: self.dataset.seed,
            class_caps: self.dataset.class_caps.clone(),
            max_concurrency: self.backend.max_concurrency,
        }
    }

    /// Relative prompt-pool paths resolve against `base` (the config's directory).
    pub fn prompt_pool(&self, base: &Path) -> Result<PromptPool, ConfigError> {
        if self.dataset.prompt_pool == "builtin" {
            return Ok(PromptPool::default());
        }
        let p = PathBuf::from(&self.dataset.prompt_pool);
        Ok(PromptPool::load(&if p.is_absolute() {
            p
        } else {
            base.join(p)
        })?)
    }

    /// Instantiates the configured backend. The mock needs the manifests it
    /// will be asked about for its ground truth.
    pub fn generator<'a>(
        &self,
        manifests: impl IntoIterator<Item = &'a Manifest>,
    ) -> Result<Box<dyn Generator>, ConfigError> {
        Ok(match self.backend.kind {
            BackendKind::Mock => Box::new(MockGenerator::from_manifests(
                self.backend.mock.clone(),
                manifests,
            )),
            BackendKind::Remote => Box::new(RemoteGenerator::from_env(self.backend.remote.clone())),
            BackendKind::Local => {
                Box::new(LocalCommandGenerator::new(&self.backend.local.command)?)
            }
        })
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(span) = span else {
        return String::new();
    };
    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
    format!(" (line {line})")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_file_parses_with_stock_values() {
        let c = Config::default();
        assert_eq!(c.dataset.delta, 0.6);
        assert!((c.dataset.hypothetical_fraction - 1.0 / 3.0).abs() < 1e-4);
        assert_eq!(c.mids, MidsConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.backend.mock, MockPolicy::default());
        assert_eq!(c.backend.remote, RemoteConfig::default());
    }

    /// Dropping any single key is a schema error that names the key.
    #[test]
    fn every_key_is_required() {
        let lines: Vec<&str> = DEFAULT_CONFIG.lines().collect();
        let mut checked = 0;
        for (i, line) in lines.iter().enumerate() {
            let t = line.trim();
            if t.starts_with('#') || !t.contains('=') {
                continue;
            }
            let key = t.split('=').next().unwrap().trim();
            // Map entries inside class_caps are data, not schema keys.
            let section = lines[..i]
                .iter()
                .rev()
                .find(|l| l.trim_start().starts_with('['));
            if section.is_some_and(|s| s.contains("class_caps")) {
                continue;
            }
            let text: String = lines
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, l)| format!("{l}\n"))
                .collect();
            let err = Config::from_toml(&text, "t").unwrap_err().to_string();
            assert!(err.contains(&format!("`{key}`")), "removing {key}: {err}");
            checked += 1;
        }
        assert!(checked > 60, "only {checked} keys checked");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = DEFAULT_CONFIG.replace("[bench]\n", "[bench]\nbogus = 1\n");
        let err = Config::from_toml(&text, "t").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn semantic_validation() {
        let text = DEFAULT_CONFIG.replace("delta = 0.6", "delta = 1.5");
        assert!(Config::from_toml(&text, "t").is_err());
    }
}
