//! Post-hoc analytics: trajectory factors, Pearson correlations against
//! success, and failure-category tallies.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::Trajectory;
use crate::distill::render_call;
use crate::taskgen::IntentKind;
use crate::text::count_tokens;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub steps: usize,
    /// Mean tokens per agent turn.
    pub output_tokens: f64,
    pub search_queries: usize,
    pub page_turns: usize,
    pub in_shop_searches: usize,
    pub views: usize,
    pub web_searches: usize,
}

pub const FACTOR_NAMES: [&str; 7] =
    ["steps", "output_tokens", "search_queries", "page_turns", "in_shop_searches", "views", "web_searches"];

impl FactorVector {
    pub fn values(&self) -> [f64; 7] {
        [
            self.steps as f64,
            self.output_tokens,
            self.search_queries as f64,
            self.page_turns as f64,
            self.in_shop_searches as f64,
            self.views as f64,
            self.web_searches as f64,
        ]
    }
}

fn page_of(v: Option<&Value>) -> i64 {
    match v {
        Some(Value::Number(n)) => n.as_i64().unwrap_or(1),
        Some(Value::String(s)) => s.trim().parse().unwrap_or(1),
        _ => 1,
    }
}

pub fn extract_factors(t: &Trajectory) -> FactorVector {
    let mut f = FactorVector { steps: t.steps.len(), ..FactorVector::default() };
    let mut tokens = 0usize;
    for s in &t.steps {
        let text = match &s.raw {
            Some(raw) => raw.clone(),
            None => {
                let think = s.think.as_deref().map(|x| format!("<think>{x}</think>\n")).unwrap_or_default();
                think + &render_call(&s.call)
            }
        };
        tokens += count_tokens(&text);
        match s.call.name.as_str() {
            "find_product" => {
                f.search_queries += 1;
                if page_of(s.call.params.get("page")) >= 2 {
                    f.page_turns += 1;
                }
                if s.call.params.get("shop_id").and_then(Value::as_str).is_some_and(|x| !x.trim().is_empty()) {
                    f.in_shop_searches += 1;
                }
            }
            "view_product_information" => f.views += 1,
            "web_search" => f.web_searches += 1,
            _ => {}
        }
    }
    if f.steps > 0 {
        f.output_tokens = tokens as f64 / f.steps as f64;
    }
    f
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("a series has zero variance")]
    DegenerateVariance,
    #[error("line {line}: unknown failure category {category:?}")]
    UnknownCategory { line: usize, category: String },
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("{0}")]
    Io(String),
}

/// Sample Pearson correlation, accumulated in one pass with Welford
/// updates of the means and co-moments.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooFewPoints(x.len()));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (a - mx);
        syy += dy * (b - my);
        sxy += dx * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(AnalysisError::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<String>,
}

/// Per bucket ("all" plus each intent), factor name → correlation with
/// binary success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub buckets: BTreeMap<String, BTreeMap<String, CorrelationCell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub trajectory_id: String,
    pub intent: IntentKind,
    pub factors: FactorVector,
    pub success: bool,
}

pub fn correlation_report(rows: &[FactorRow]) -> CorrelationReport {
    let mut groups: BTreeMap<String, Vec<&FactorRow>> = BTreeMap::new();
    for r in rows {
        groups.entry("all".into()).or_default().push(r);
        groups.entry(r.intent.as_str().into()).or_default().push(r);
    }
    let buckets = groups
        .into_iter()
        .map(|(name, members)| {
            let y: Vec<f64> = members.iter().map(|r| f64::from(u8::from(r.success))).collect();
            let cells = FACTOR_NAMES
                .iter()
                .enumerate()
                .map(|(i, factor)| {
                    let x: Vec<f64> = members.iter().map(|r| r.factors.values()[i]).collect();
                    let cell = match pearson(&x, &y) {
                        Ok(r) => CorrelationCell { n: x.len(), r: Some(r), degenerate: None },
                        Err(e) => CorrelationCell { n: x.len(), r: None, degenerate: Some(e.to_string()) },
                    };
                    (factor.to_string(), cell)
                })
                .collect();
            (name, cells)
        })
        .collect();
    CorrelationReport { buckets }
}

impl CorrelationReport {
    /// Fixed-width text table, one row per bucket.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<22}", "bucket");
        for f in FACTOR_NAMES {
            out.push_str(&format!("{f:>17}"));
        }
        out.push('\n');
        for (bucket, cells) in &self.buckets {
            out.push_str(&format!("{bucket:<22}"));
            for f in FACTOR_NAMES {
                let v = cells.get(f).and_then(|c| c.r).map(|r| format!("{r:.3}")).unwrap_or_else(|| "degenerate".into());
                out.push_str(&format!("{v:>17}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    AttributeMismatch,
    MetricIssue,
    ProductMissing,
    ConstraintNotSatisfied,
    KnowledgeError,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 5] = [
        FailureCategory::AttributeMismatch,
        FailureCategory::MetricIssue,
        FailureCategory::ProductMissing,
        FailureCategory::ConstraintNotSatisfied,
        FailureCategory::KnowledgeError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCategory::AttributeMismatch => "attribute_mismatch",
            FailureCategory::MetricIssue => "metric_issue",
            FailureCategory::ProductMissing => "product_missing",
            FailureCategory::ConstraintNotSatisfied => "constraint_not_satisfied",
            FailureCategory::KnowledgeError => "knowledge_error",
        }
    }

    fn short(self) -> &'static str {
        match self {
            FailureCategory::AttributeMismatch => "am",
            FailureCategory::MetricIssue => "mi",
            FailureCategory::ProductMissing => "pm",
            FailureCategory::ConstraintNotSatisfied => "cns",
            FailureCategory::KnowledgeError => "ke",
        }
    }
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FailureCategory {
    type Err = String;

    /// Accepts the long name or the short code, with or without `#`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().trim_start_matches('#').to_ascii_lowercase();
        FailureCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == key || c.short() == key)
            .ok_or_else(|| s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureLabel {
    pub trajectory_id: String,
    pub category: FailureCategory,
}

pub fn parse_labels(text: &str) -> Result<Vec<FailureLabel>, AnalysisError> {
    #[derive(Deserialize)]
    struct Raw {
        trajectory_id: String,
        category: String,
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: Raw =
            serde_json::from_str(line).map_err(|e| AnalysisError::Format { line: i + 1, reason: e.to_string() })?;
        let category = raw
            .category
            .parse()
            .map_err(|c| AnalysisError::UnknownCategory { line: i + 1, category: c })?;
        out.push(FailureLabel { trajectory_id: raw.trajectory_id, category });
    }
    Ok(out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<FailureLabel>, AnalysisError> {
    parse_labels(&fs::read_to_string(path).map_err(|e| AnalysisError::Io(e.to_string()))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTally {
    pub failures: usize,
    pub counts: BTreeMap<FailureCategory, usize>,
    pub unlabeled: usize,
    /// Share of all failures per category.
    pub proportions: BTreeMap<FailureCategory, f64>,
    /// Labels naming trajectories that are not failures in this run.
    pub ignored_labels: usize,
}

/// `outcomes` pairs each trajectory id with its success flag.
pub fn failure_tally(outcomes: &[(String, bool)], labels: &[FailureLabel]) -> FailureTally {
    let failed: HashMap<&str, bool> = outcomes.iter().map(|(id, ok)| (id.as_str(), !ok)).collect();
    let failures = outcomes.iter().filter(|(_, ok)| !ok).count();
    let mut counts: BTreeMap<FailureCategory, usize> = BTreeMap::new();
    let mut labeled = std::collections::HashSet::new();
    let mut ignored = 0;
    for l in labels {
        if failed.get(l.trajectory_id.as_str()) == Some(&true) && labeled.insert(l.trajectory_id.as_str()) {
            *counts.entry(l.category).or_default() += 1;
        } else {
            ignored += 1;
        }
    }
    let proportions = counts
        .iter()
        .map(|(c, n)| (*c, if failures == 0 { 0.0 } else { *n as f64 / failures as f64 }))
        .collect();
    FailureTally { failures, unlabeled: failures - labeled.len(), counts, proportions, ignored_labels: ignored }
}
