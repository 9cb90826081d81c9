//! TOML configuration shared by the server and the CLI.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use pixelmod::hashing::HashKind;
use pixelmod::ocr::{ExternalProcessProvider, OcrProvider, RemoteHttpProvider, SidecarProvider, DEFAULT_MAX_IN_FLIGHT};
use pixelmod::pipeline::{EmptyQueryPolicy, PipelineConfig};
use pixelmod::stories::ClusterParams;
use pixelmod::text_similarity::TextMetric;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOKEN_ENV: &str = "PIXELMOD_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Corpus store directory.
    pub store: PathBuf,
    pub bind: String,
    /// Environment variable holding the bearer token. Unset or empty
    /// disables authentication.
    pub token_env: String,
    pub page_size: usize,
    pub pipeline: PipelineConfig,
    pub ocr: OcrConfig,
    pub stories: StoriesConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            store: PathBuf::from("pixelmod-data"),
            bind: "127.0.0.1:8080".into(),
            token_env: TOKEN_ENV.into(),
            page_size: 50,
            pipeline: PipelineConfig::default(),
            ocr: OcrConfig::default(),
            stories: StoriesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// `<image>.ocr.txt` next to each image.
    #[default]
    Sidecar,
    /// A local command that prints the text of the image path it is given.
    Process,
    /// An HTTP OCR endpoint.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcrConfig {
    pub provider: ProviderKind,
    /// Program and arguments for the `process` provider.
    pub command: Vec<String>,
    /// Endpoint for the `remote` provider; falls back to the environment.
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for OcrConfig {
    fn default() -> Self {
        OcrConfig {
            provider: ProviderKind::Sidecar,
            command: Vec::new(),
            endpoint: None,
            timeout_ms: 30_000,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl OcrConfig {
    pub fn build(&self) -> Result<Arc<dyn OcrProvider>, ConfigError> {
        let timeout = Duration::from_millis(self.timeout_ms);
        Ok(match self.provider {
            ProviderKind::Sidecar => Arc::new(SidecarProvider),
            ProviderKind::Process => {
                let (program, args) = self
                    .command
                    .split_first()
                    .ok_or_else(|| ConfigError::Invalid("ocr.command is empty".into()))?;
                Arc::new(ExternalProcessProvider::new(program.clone(), args.iter().cloned()).with_timeout(timeout))
            }
            ProviderKind::Remote => {
                let provider = match &self.endpoint {
                    Some(e) => RemoteHttpProvider::with_timeout(e.clone(), std::env::var(pixelmod::ocr::KEY_ENV).ok(), timeout),
                    None => RemoteHttpProvider::from_env(),
                };
                Arc::new(provider.map_err(|e| ConfigError::Invalid(e.to_string()))?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoriesConfig {
    pub eps: u32,
    pub min_cluster_size: usize,
}

impl Default for StoriesConfig {
    fn default() -> Self {
        let p = ClusterParams::default();
        StoriesConfig {
            eps: p.eps,
            min_cluster_size: p.min_cluster_size,
        }
    }
}

impl StoriesConfig {
    pub fn params(&self) -> ClusterParams {
        ClusterParams {
            eps: self.eps,
            min_cluster_size: self.min_cluster_size,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Config = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.page_size == 0 {
            return Err(ConfigError::Invalid("page_size must be positive".into()));
        }
        if self.ocr.max_in_flight == 0 {
            return Err(ConfigError::Invalid("ocr.max_in_flight must be positive".into()));
        }
        Ok(())
    }

    /// The configured bearer token, if authentication is on.
    pub fn token(&self) -> Option<String> {
        std::env::var(&self.token_env).ok().filter(|t| !t.is_empty())
    }
}

/// Per-request changes to the pipeline configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub hash_kind: Option<HashKind>,
    pub theta_visual: Option<u32>,
    pub text_metric: Option<TextMetric>,
    pub theta_textual: Option<f64>,
    pub empty_query_policy: Option<EmptyQueryPolicy>,
    pub compare_raw_text: Option<bool>,
}

impl ConfigOverrides {
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            hash_kind: self.hash_kind.unwrap_or(base.hash_kind),
            theta_visual: self.theta_visual.unwrap_or(base.theta_visual),
            text_metric: self.text_metric.unwrap_or(base.text_metric),
            theta_textual: self.theta_textual.unwrap_or(base.theta_textual),
            empty_query_policy: self.empty_query_policy.unwrap_or(base.empty_query_policy),
            compare_raw_text: self.compare_raw_text.unwrap_or(base.compare_raw_text),
        }
    }
}
