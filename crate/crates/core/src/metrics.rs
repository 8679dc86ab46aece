//! Constraint scores, success predicates and benchmark aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{apply_voucher, Catalog, Product, VoucherRule};
use crate::money::Money;
use crate::taskgen::{IntentKind, TargetSpec, Task};
use crate::text::{normalize, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub title_threshold: f64,
    /// Accept a feature when the target value's tokens are a subset of the
    /// predicted value's tokens ("high" vs "high waist").
    pub lenient_features: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { title_threshold: 0.5, lenient_features: false }
    }
}

/// Jaccard overlap of normalized token sets. Two empty titles count as
/// identical.
pub fn title_similarity(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = tokenize(a).into_iter().collect();
    let b: BTreeSet<String> = tokenize(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// `r_pro` kept as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relevance {
    pub numerator: u32,
    pub denominator: u32,
}

impl Relevance {
    pub fn zero(denominator: u32) -> Relevance {
        Relevance { numerator: 0, denominator }
    }

    pub fn value(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    pub fn is_perfect(self) -> bool {
        self.numerator == self.denominator
    }
}

fn feature_matches(pred: &Product, required: &BTreeMap<String, String>, lenient: bool) -> u32 {
    required
        .iter()
        .filter(|(name, want)| {
            let Some(have) = pred.features.get(&normalize(name)) else { return false };
            let (have, want) = (normalize(have), normalize(want));
            if lenient {
                let have: BTreeSet<String> = tokenize(&have).into_iter().collect();
                tokenize(&want).iter().all(|t| have.contains(t))
            } else {
                have == want
            }
        })
        .count() as u32
}

/// (I[sim ≥ τ] + I[min ≤ price ≤ max] + |F_t ∩ F_p|) / (2 + |F_t|)
pub fn product_relevance(pred: &Product, target: &TargetSpec, target_title: &str, cfg: &MetricsConfig) -> Relevance {
    let sim = u32::from(title_similarity(&pred.title, target_title) >= cfg.title_threshold);
    let price = u32::from(target.price_min <= pred.price && pred.price <= target.price_max);
    let features = feature_matches(pred, &target.required_features, cfg.lenient_features);
    Relevance { numerator: sim + price + features, denominator: 2 + target.required_features.len() as u32 }
}

/// 1 iff the normalized attribute occurs in the normalized title.
pub fn knowledge_score(pred: Option<&Product>, attribute: &str) -> u8 {
    let attribute = normalize(attribute);
    match pred {
        Some(p) if !attribute.is_empty() => u8::from(normalize(&p.title).contains(&attribute)),
        _ => 0,
    }
}

/// 1 iff as many products as targets were recommended, all from one shop.
pub fn shop_score(preds: &[&Product], target_count: usize) -> u8 {
    let same_shop = preds.first().is_some_and(|f| preds.iter().all(|p| p.shop_id == f.shop_id));
    u8::from(preds.len() == target_count && same_shop)
}

/// Settles the recommended basket (voucher applied only when valid) and
/// compares the final total with the budget.
pub fn budget_score(preds: &[&Product], voucher: Option<&VoucherRule>, budget: Money) -> u8 {
    let prices: Vec<Money> = preds.iter().map(|p| p.price).collect();
    let shops: Vec<&str> = preds.iter().map(|p| p.shop_id.as_str()).collect();
    let settlement = apply_voucher(&prices, &shops, voucher).expect("equal lengths");
    u8::from(settlement.final_total <= budget)
}

/// Maximum-weight one-to-one assignment of predictions to targets by
/// exhaustive search. Returns, per target, the chosen prediction index.
/// Ties resolve to the lexicographically first assignment.
pub fn match_products(weights: &[Vec<f64>], n_targets: usize) -> (Vec<Option<usize>>, f64) {
    fn go(
        t: usize,
        weights: &[Vec<f64>],
        n_targets: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        acc: f64,
        best: &mut (Vec<Option<usize>>, f64),
    ) {
        if t == n_targets {
            if acc > best.1 + 1e-12 {
                *best = (current.clone(), acc);
            }
            return;
        }
        for p in 0..weights.len() {
            if !used[p] {
                used[p] = true;
                current.push(Some(p));
                go(t + 1, weights, n_targets, used, current, acc + weights[p][t], best);
                current.pop();
                used[p] = false;
            }
        }
        // Leave this target unmatched only when predictions run out.
        let free = used.iter().filter(|u| !**u).count();
        if free < n_targets - t {
            current.push(None);
            go(t + 1, weights, n_targets, used, current, acc, best);
            current.pop();
        }
    }
    let mut best = (vec![None; n_targets], -1.0);
    go(0, weights, n_targets, &mut vec![false; weights.len()], &mut Vec::new(), 0.0, &mut best);
    if best.1 < 0.0 {
        best.1 = 0.0;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedTarget {
    pub target_id: String,
    pub predicted_id: Option<String>,
    pub relevance: Relevance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintScores {
    pub matches: Vec<MatchedTarget>,
    pub unmatched_predictions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_kw: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_shop: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_budget: Option<u8>,
}

impl ConstraintScores {
    /// Inner sum of the CAR formula: Σ r_pro / number of targets.
    pub fn mean_relevance(&self) -> f64 {
        if self.matches.is_empty() {
            return 0.0;
        }
        self.matches.iter().map(|m| m.relevance.value()).sum::<f64>() / self.matches.len() as f64
    }

    fn all_perfect(&self) -> bool {
        !self.matches.is_empty() && self.matches.iter().all(|m| m.relevance.is_perfect())
    }
}

pub fn task_success(intent: IntentKind, scores: &ConstraintScores) -> bool {
    let perfect = scores.all_perfect();
    match intent {
        IntentKind::ProductFinding => perfect,
        IntentKind::KnowledgeReasoning => perfect && scores.r_kw == Some(1),
        IntentKind::MultiProductsSeller => perfect && scores.r_shop == Some(1),
        IntentKind::VoucherBudget => perfect && scores.r_budget == Some(1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub intent: IntentKind,
    pub recommended: Vec<String>,
    pub scores: ConstraintScores,
    pub success: bool,
    pub mean_relevance: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("task {task_id}: unknown product {product_id}")]
    UnknownProduct { task_id: String, product_id: String },
}

/// Score the final recommendation set of one task.
pub fn evaluate_task(
    task: &Task,
    recommended: &[String],
    catalog: &Catalog,
    cfg: &MetricsConfig,
) -> Result<TaskResult, MetricsError> {
    let lookup = |id: &String| {
        catalog
            .find(id)
            .ok_or_else(|| MetricsError::UnknownProduct { task_id: task.task_id.clone(), product_id: id.clone() })
    };
    let preds: Vec<&Product> = recommended.iter().map(lookup).collect::<Result<_, _>>()?;
    let target_products: Vec<&Product> =
        task.targets.iter().map(|t| lookup(&t.product_id)).collect::<Result<_, _>>()?;

    let rel: Vec<Vec<Relevance>> = preds
        .iter()
        .map(|p| {
            task.targets
                .iter()
                .zip(&target_products)
                .map(|(t, tp)| product_relevance(p, t, &tp.title, cfg))
                .collect()
        })
        .collect();
    let weights: Vec<Vec<f64>> = rel.iter().map(|row| row.iter().map(|r| r.value()).collect()).collect();
    let (assignment, _) = match_products(&weights, task.targets.len());

    let matches: Vec<MatchedTarget> = task
        .targets
        .iter()
        .enumerate()
        .map(|(ti, t)| MatchedTarget {
            target_id: t.product_id.clone(),
            predicted_id: assignment[ti].map(|p| preds[p].product_id.clone()),
            relevance: assignment[ti]
                .map(|p| rel[p][ti])
                .unwrap_or_else(|| Relevance::zero(2 + t.required_features.len() as u32)),
        })
        .collect();
    let used: BTreeSet<usize> = assignment.iter().flatten().copied().collect();
    let unmatched_predictions =
        (0..preds.len()).filter(|p| !used.contains(p)).map(|p| preds[p].product_id.clone()).collect();

    let mut scores = ConstraintScores { matches, unmatched_predictions, r_kw: None, r_shop: None, r_budget: None };
    match task.intent {
        IntentKind::KnowledgeReasoning => {
            let pred = assignment.first().copied().flatten().map(|p| preds[p]);
            scores.r_kw = Some(knowledge_score(pred, task.knowledge_attribute.as_deref().unwrap_or("")));
        }
        IntentKind::MultiProductsSeller => scores.r_shop = Some(shop_score(&preds, task.targets.len())),
        IntentKind::VoucherBudget => {
            scores.r_budget = task.budget.map(|b| budget_score(&preds, task.voucher.as_ref(), b));
        }
        IntentKind::ProductFinding => {}
    }
    let success = task_success(task.intent, &scores);
    Ok(TaskResult {
        task_id: task.task_id.clone(),
        intent: task.intent,
        recommended: recommended.to_vec(),
        mean_relevance: scores.mean_relevance(),
        scores,
        success,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSummary {
    pub count: usize,
    pub successes: usize,
    /// Percent.
    pub asr: f64,
    /// Percent.
    pub car: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub per_intent: BTreeMap<IntentKind, IntentSummary>,
    pub total: usize,
    /// Sample-count weighted mean of per-intent ASR, percent.
    pub weighted_asr: f64,
    pub empty_intents: Vec<IntentKind>,
}

/// Σ count·asr / Σ count over the supplied rows.
pub fn weighted_average(rows: &[(f64, usize)]) -> f64 {
    let n: usize = rows.iter().map(|(_, c)| c).sum();
    if n == 0 {
        return 0.0;
    }
    rows.iter().map(|(v, c)| v * *c as f64).sum::<f64>() / n as f64
}

pub fn aggregate(results: &[TaskResult]) -> BenchmarkReport {
    let mut buckets: BTreeMap<IntentKind, Vec<&TaskResult>> = BTreeMap::new();
    for r in results {
        buckets.entry(r.intent).or_default().push(r);
    }
    let per_intent: BTreeMap<IntentKind, IntentSummary> = buckets
        .iter()
        .map(|(k, rs)| {
            let successes = rs.iter().filter(|r| r.success).count();
            let n = rs.len() as f64;
            let summary = IntentSummary {
                count: rs.len(),
                successes,
                asr: 100.0 * successes as f64 / n,
                car: 100.0 * rs.iter().map(|r| r.mean_relevance).sum::<f64>() / n,
            };
            (*k, summary)
        })
        .collect();
    let rows: Vec<(f64, usize)> = per_intent.values().map(|s| (s.asr, s.count)).collect();
    BenchmarkReport {
        weighted_asr: weighted_average(&rows),
        total: results.len(),
        empty_intents: IntentKind::ALL.into_iter().filter(|k| !per_intent.contains_key(k)).collect(),
        per_intent,
    }
}
