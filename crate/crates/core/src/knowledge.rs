//! Backends for the `web_search` tool.

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::search::{Bm25Params, InvertedIndex};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSnippet {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("web search backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("web search is disabled in this environment")]
    Disabled,
    #[error("line {line}: malformed snippet: {reason}")]
    MalformedSnippet { line: usize, reason: String },
    #[error("snippet fixture: {0}")]
    Io(#[from] std::io::Error),
}

pub trait KnowledgeBackend: Send + Sync {
    fn name(&self) -> &str;
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<KnowledgeSnippet>, KnowledgeError>;
}

/// Offline snippet corpus ranked with BM25 over title + snippet text.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    snippets: Vec<KnowledgeSnippet>,
    index: InvertedIndex,
}

impl FixtureStore {
    pub fn new(snippets: Vec<KnowledgeSnippet>) -> FixtureStore {
        let docs: Vec<Vec<String>> = snippets
            .iter()
            .map(|s| {
                let mut t = tokenize(&s.title);
                t.extend(tokenize(&s.snippet));
                t
            })
            .collect();
        FixtureStore { index: InvertedIndex::build(docs, Bm25Params::default()), snippets }
    }

    /// Load line-delimited `{"title","url","snippet"}` records.
    pub fn load(path: impl AsRef<Path>) -> Result<FixtureStore, KnowledgeError> {
        let text = fs::read_to_string(path)?;
        let mut snippets = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let s: KnowledgeSnippet = serde_json::from_str(raw)
                .map_err(|e| KnowledgeError::MalformedSnippet { line: i + 1, reason: e.to_string() })?;
            if s.snippet.trim().is_empty() {
                return Err(KnowledgeError::MalformedSnippet { line: i + 1, reason: "empty snippet".into() });
            }
            snippets.push(s);
        }
        Ok(FixtureStore::new(snippets))
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }
}

impl KnowledgeBackend for FixtureStore {
    fn name(&self) -> &str {
        "fixture"
    }

    fn search(&self, query: &str, max_results: usize) -> Result<Vec<KnowledgeSnippet>, KnowledgeError> {
        let terms = tokenize(query);
        let mut hits: Vec<(u32, f64)> = self.index.score_all(&terms).into_iter().collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(hits
            .into_iter()
            .take(max_results)
            .map(|(doc, _)| self.snippets[doc as usize].clone())
            .collect())
    }
}

/// Stand-in used for the no-web-search ablation: every call fails.
#[derive(Debug, Clone, Copy, Default)]
pub struct DisabledBackend;

impl KnowledgeBackend for DisabledBackend {
    fn name(&self) -> &str {
        "disabled"
    }

    fn search(&self, _query: &str, _max_results: usize) -> Result<Vec<KnowledgeSnippet>, KnowledgeError> {
        Err(KnowledgeError::Disabled)
    }
}

/// HTTP adapter: POST `{"q": ...}` with the key in `X-API-KEY`.
#[derive(Debug, Clone)]
pub struct RemoteSearch {
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl RemoteSearch {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> RemoteSearch {
        RemoteSearch { endpoint: endpoint.into(), api_key, timeout: Duration::from_secs(20) }
    }

    /// Reads the key from the named environment variable when set.
    pub fn from_env(endpoint: impl Into<String>, key_var: &str) -> RemoteSearch {
        RemoteSearch::new(endpoint, std::env::var(key_var).ok())
    }
}

impl KnowledgeBackend for RemoteSearch {
    fn name(&self) -> &str {
        "remote"
    }

    fn search(&self, query: &str, max_results: usize) -> Result<Vec<KnowledgeSnippet>, KnowledgeError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("X-API-KEY", key);
        }
        let body: Value = req
            .send_json(serde_json::json!({ "q": query }))
            .map_err(|e| KnowledgeError::BackendUnavailable(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| KnowledgeError::BackendUnavailable(e.to_string()))?;
        let mut out = parse_remote_response(&body);
        out.truncate(max_results);
        Ok(out)
    }
}

/// Accepts either a bare list of snippets or an object with an `organic`
/// (or `results`) list whose entries carry `title`, `link`/`url`, `snippet`.
pub fn parse_remote_response(body: &Value) -> Vec<KnowledgeSnippet> {
    let list = match body {
        Value::Array(items) => items.as_slice(),
        Value::Object(map) => map
            .get("organic")
            .or_else(|| map.get("results"))
            .and_then(Value::as_array)
            .map(Vec::as_slice)
            .unwrap_or(&[]),
        _ => &[],
    };
    let field = |v: &Value, keys: &[&str]| {
        keys.iter()
            .find_map(|k| v.get(*k).and_then(Value::as_str))
            .unwrap_or("")
            .to_owned()
    };
    list.iter()
        .map(|v| KnowledgeSnippet {
            title: field(v, &["title"]),
            url: field(v, &["link", "url"]),
            snippet: field(v, &["snippet", "text"]),
        })
        .filter(|s| !s.snippet.trim().is_empty())
        .collect()
}
