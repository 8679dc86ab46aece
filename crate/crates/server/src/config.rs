//! Declarative service configuration with environment overrides for secrets.

use std::env;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use shopsandbox_core::knowledge::{DisabledBackend, FixtureStore, KnowledgeBackend, RemoteSearch};
use shopsandbox_core::sandbox::{EnvConfig, Environment, DEFAULT_STEP_LIMIT};
use shopsandbox_core::search::{Bm25Params, FieldWeights, ProductIndex};
use shopsandbox_core::taskgen::{load_tasks, Task};
use shopsandbox_core::Catalog;
use thiserror::Error;

pub const SEARCH_KEY_VAR: &str = "SHOPSANDBOX_SEARCH_KEY";
pub const MODEL_KEY_VAR: &str = "SHOPSANDBOX_MODEL_KEY";
pub const BIND_VAR: &str = "SHOPSANDBOX_BIND";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("{what} {path} does not exist")]
    MissingFile { what: &'static str, path: String },
    #[error("{0}")]
    Load(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WebBackend {
    #[default]
    Fixture,
    Disabled,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WebSearchConfig {
    #[serde(default)]
    pub backend: WebBackend,
    pub snippets: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub catalog: PathBuf,
    pub tasks: Option<PathBuf>,
    /// Persisted index; rebuilt from the catalog when absent.
    pub index: Option<PathBuf>,
    #[serde(default = "default_step_limit")]
    pub step_limit: usize,
    #[serde(default)]
    pub bm25: Bm25Section,
    #[serde(default)]
    pub web_search: WebSearchConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    #[serde(default = "default_idle")]
    pub session_idle_minutes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Section {
    pub k1: f64,
    pub b: f64,
    pub title_weight: u32,
}

impl Default for Bm25Section {
    fn default() -> Self {
        let p = Bm25Params::default();
        Bm25Section { k1: p.k1, b: p.b, title_weight: FieldWeights::default().title }
    }
}

fn default_step_limit() -> usize {
    DEFAULT_STEP_LIMIT
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_idle() -> u64 {
    30
}

impl ServerConfig {
    /// Minimal config around a catalog path, everything else defaulted.
    pub fn for_catalog(catalog: impl Into<PathBuf>) -> ServerConfig {
        ServerConfig {
            catalog: catalog.into(),
            tasks: None,
            index: None,
            step_limit: default_step_limit(),
            bm25: Bm25Section::default(),
            web_search: WebSearchConfig::default(),
            model: ModelConfig::default(),
            bind: default_bind(),
            session_idle_minutes: default_idle(),
        }
    }

    /// Parse TOML. Relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<ServerConfig, ConfigError> {
        let mut cfg: ServerConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.catalog);
        cfg.tasks.as_mut().map(fix);
        cfg.index.as_mut().map(fix);
        cfg.web_search.snippets.as_mut().map(fix);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ServerConfig, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Unreadable { path: path.display().to_string(), reason: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = ServerConfig::from_toml(&text, base)?;
        cfg.apply_env(|k| env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(k) = lookup(SEARCH_KEY_VAR) {
            self.web_search.api_key = Some(k);
        }
        if let Some(k) = lookup(MODEL_KEY_VAR) {
            self.model.api_key = Some(k);
        }
        if let Some(b) = lookup(BIND_VAR) {
            self.bind = b.parse().map_err(|_| ConfigError::Invalid(format!("{BIND_VAR}={b} is not host:port")))?;
        }
        Ok(())
    }

    pub fn idle_timeout(&self) -> Duration {
        Duration::from_secs(self.session_idle_minutes * 60)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let exists = |what, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ConfigError::MissingFile { what, path: p.display().to_string() })
            }
        };
        exists("catalog", &self.catalog)?;
        if let Some(p) = &self.tasks {
            exists("task file", p)?;
        }
        if let Some(p) = &self.index {
            exists("index", p)?;
        }
        if self.step_limit == 0 {
            return Err(ConfigError::Invalid("step_limit must be positive".into()));
        }
        match self.web_search.backend {
            WebBackend::Fixture => match &self.web_search.snippets {
                Some(p) => exists("snippet fixture", p)?,
                None => return Err(ConfigError::Invalid("web_search.snippets is required for the fixture backend".into())),
            },
            WebBackend::Remote if self.web_search.endpoint.is_none() => {
                return Err(ConfigError::Invalid("web_search.endpoint is required for the remote backend".into()))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn knowledge_backend(&self) -> Result<Arc<dyn KnowledgeBackend>, ConfigError> {
        Ok(match self.web_search.backend {
            WebBackend::Disabled => Arc::new(DisabledBackend),
            WebBackend::Fixture => {
                let path = self.web_search.snippets.as_ref().ok_or_else(|| ConfigError::Invalid("no snippet fixture".into()))?;
                Arc::new(FixtureStore::load(path).map_err(|e| ConfigError::Load(e.to_string()))?)
            }
            WebBackend::Remote => Arc::new(RemoteSearch::new(
                self.web_search.endpoint.clone().unwrap_or_default(),
                self.web_search.api_key.clone(),
            )),
        })
    }

    /// Load catalog, index and knowledge backend into an environment.
    pub fn environment(&self) -> Result<Environment, ConfigError> {
        self.validate()?;
        let catalog = Arc::new(Catalog::load(&self.catalog).map_err(|e| ConfigError::Load(e.to_string()))?);
        let index = match &self.index {
            Some(p) => ProductIndex::load(p, &catalog),
            None => ProductIndex::build(
                &catalog,
                FieldWeights { title: self.bm25.title_weight, ..FieldWeights::default() },
                Bm25Params { k1: self.bm25.k1, b: self.bm25.b },
            ),
        }
        .map_err(|e| ConfigError::Load(e.to_string()))?;
        Ok(Environment::new(catalog, Arc::new(index), self.knowledge_backend()?, EnvConfig { step_limit: self.step_limit }))
    }

    pub fn load_tasks(&self) -> Result<Vec<Task>, ConfigError> {
        match &self.tasks {
            Some(p) => load_tasks(p).map_err(|e| ConfigError::Load(e.to_string())),
            None => Ok(Vec::new()),
        }
    }
}
