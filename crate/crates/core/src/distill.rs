//! Trajectory distillation: rejection sampling, SFT segmentation, export,
//! and the tool reward.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{is_tool_step, parse_action, Trajectory};
use crate::sandbox::{EpisodeStatus, ToolCall};
use crate::taskgen::IntentKind;
use crate::text::{count_tokens, fold_value};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("trajectory {0} has no evaluation")]
    UnscoredTrajectory(String),
    #[error("no samples to export")]
    EmptyExport,
    #[error("export failed: {0}")]
    IoFailure(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentTally {
    pub seen: usize,
    pub retained: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionLedger {
    pub seen: usize,
    pub retained: usize,
    pub rejected: usize,
    pub per_intent: BTreeMap<IntentKind, IntentTally>,
    pub per_reason: BTreeMap<String, usize>,
}

/// Primary reason a scored trajectory is not an absolute success.
pub fn failure_reason(t: &Trajectory) -> Option<&'static str> {
    let scores = t.scores.as_ref()?;
    if scores.success {
        return None;
    }
    Some(match t.status {
        EpisodeStatus::AbortedStepLimit => "step_limit",
        EpisodeStatus::Aborted => "aborted",
        _ if t.recommended.is_empty() => "no_recommendation",
        _ if scores.scores.matches.iter().any(|m| !m.relevance.is_perfect()) => "product_mismatch",
        _ if scores.scores.r_kw == Some(0) => "knowledge_miss",
        _ if scores.scores.r_shop == Some(0) => "shop_mismatch",
        _ if scores.scores.r_budget == Some(0) => "over_budget",
        _ => "other",
    })
}

/// Keep exactly the absolute successes.
pub fn reject_sample(trajectories: &[Trajectory]) -> Result<(Vec<Trajectory>, RejectionLedger), DistillError> {
    let mut ledger = RejectionLedger::default();
    let mut kept = Vec::new();
    for t in trajectories {
        let scores = t.scores.as_ref().ok_or_else(|| DistillError::UnscoredTrajectory(t.trajectory_id.clone()))?;
        ledger.seen += 1;
        let tally = ledger.per_intent.entry(t.intent).or_default();
        tally.seen += 1;
        if scores.success {
            tally.retained += 1;
            ledger.retained += 1;
            kept.push(t.clone());
        } else {
            tally.rejected += 1;
            ledger.rejected += 1;
            *ledger.per_reason.entry(failure_reason(t).unwrap_or("other").to_owned()).or_default() += 1;
        }
    }
    Ok((kept, ledger))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub trajectory_id: String,
    /// 1-based step index within the trajectory.
    pub step: usize,
    pub input: String,
    pub output: String,
    pub input_tokens: usize,
    pub output_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentOptions {
    pub think: bool,
    /// Only the most recent observation instead of the full history.
    pub latest_only: bool,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions { think: true, latest_only: false }
    }
}

pub fn render_call(call: &ToolCall) -> String {
    format!("<tool_call>{}</tool_call>", json!({ "name": call.name, "arguments": call.params }))
}

/// One sample per tool step: instruction plus prior observations in, the
/// step's (think +) call out. Unparseable turns carry no call and are skipped.
pub fn segment_sft(trajectory: &Trajectory, opts: SegmentOptions) -> Vec<SftSample> {
    let mut samples = Vec::new();
    for (i, step) in trajectory.steps.iter().enumerate() {
        if !is_tool_step(step) {
            continue;
        }
        let mut input = format!("Instruction: {}", trajectory.instruction);
        let first = if opts.latest_only { i.saturating_sub(1) } else { 0 };
        for (j, prev) in trajectory.steps[first..i].iter().enumerate() {
            input.push_str(&format!("\nObservation {}: {}", first + j + 1, prev.observation.payload));
        }
        let mut output = String::new();
        if let (true, Some(think)) = (opts.think, &step.think) {
            output.push_str(&format!("<think>{think}</think>\n"));
        }
        output.push_str(&render_call(&step.call));
        samples.push(SftSample {
            trajectory_id: trajectory.trajectory_id.clone(),
            step: i + 1,
            input_tokens: count_tokens(&input),
            output_tokens: count_tokens(&output),
            input,
            output,
        });
    }
    samples
}

/// Calls recovered from sample outputs, in step order.
pub fn reconstruct_calls(samples: &[SftSample]) -> Vec<ToolCall> {
    let mut ordered: Vec<&SftSample> = samples.iter().collect();
    ordered.sort_by(|a, b| (&a.trajectory_id, a.step).cmp(&(&b.trajectory_id, b.step)));
    ordered.iter().filter_map(|s| parse_action(&s.output).ok().map(|a| a.call)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: usize,
    pub trajectories: usize,
    pub input_tokens: usize,
    pub output_tokens: usize,
}

#[derive(Serialize)]
struct TrainingRecord<'a> {
    input: &'a str,
    output: &'a str,
    trajectory_id: &'a str,
    step: usize,
}

/// Write samples as line-delimited JSON ordered by (trajectory id, step).
pub fn export_training_file(samples: &[SftSample], path: impl AsRef<Path>) -> Result<Manifest, DistillError> {
    if samples.is_empty() {
        return Err(DistillError::EmptyExport);
    }
    let mut ordered: Vec<&SftSample> = samples.iter().collect();
    ordered.sort_by(|a, b| (&a.trajectory_id, a.step).cmp(&(&b.trajectory_id, b.step)));
    let mut out = String::new();
    for s in &ordered {
        let rec = TrainingRecord { input: &s.input, output: &s.output, trajectory_id: &s.trajectory_id, step: s.step };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(Manifest {
        samples: samples.len(),
        trajectories: samples.iter().map(|s| &s.trajectory_id).collect::<BTreeSet<_>>().len(),
        input_tokens: samples.iter().map(|s| s.input_tokens).sum(),
        output_tokens: samples.iter().map(|s| s.output_tokens).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub format: f64,
    pub name: f64,
    pub keys: f64,
    pub values: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { format: 1.0, name: 1.0 / 3.0, keys: 1.0 / 3.0, values: 1.0 / 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_reward: f64,
    pub name_match: f64,
    pub param_key_score: f64,
    pub value_score: f64,
    pub total: f64,
}

impl RewardBreakdown {
    const ZERO: RewardBreakdown =
        RewardBreakdown { format_reward: 0.0, name_match: 0.0, param_key_score: 0.0, value_score: 0.0, total: 0.0 };
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => {
            let t = s.trim();
            let looks_numeric = !t.is_empty() && t.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+'));
            if looks_numeric { t.parse().ok() } else { None }
        }
        _ => None,
    }
}

/// Equality after normalization; numeric-looking values compare as numbers.
pub fn values_equal(a: &Value, b: &Value) -> bool {
    if let (Some(x), Some(y)) = (as_number(a), as_number(b)) {
        return x == y;
    }
    match (a, b) {
        (Value::String(x), Value::String(y)) => fold_value(x) == fold_value(y),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| values_equal(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| values_equal(v, w)))
        }
        _ => a == b,
    }
}

/// format + weighted (name match, parameter-key F1, shared-value accuracy).
pub fn tool_reward(predicted: &str, target: &ToolCall, weights: RewardWeights) -> RewardBreakdown {
    let Ok(action) = parse_action(predicted) else {
        return RewardBreakdown::ZERO;
    };
    let pred = action.call;
    let name_match = f64::from(u8::from(pred.name == target.name));
    let pk: BTreeSet<&String> = pred.params.keys().collect();
    let tk: BTreeSet<&String> = target.params.keys().collect();
    let shared: Vec<&&String> = pk.intersection(&tk).collect();
    let param_key_score = if pk.is_empty() && tk.is_empty() {
        1.0
    } else if shared.is_empty() {
        0.0
    } else {
        let p = shared.len() as f64 / pk.len() as f64;
        let r = shared.len() as f64 / tk.len() as f64;
        2.0 * p * r / (p + r)
    };
    let value_score = if shared.is_empty() {
        f64::from(u8::from(pk.is_empty() && tk.is_empty()))
    } else {
        shared.iter().filter(|k| values_equal(&pred.params[k.as_str()], &target.params[k.as_str()])).count() as f64
            / shared.len() as f64
    };
    let format_reward = 1.0;
    RewardBreakdown {
        format_reward,
        name_match,
        param_key_score,
        value_score,
        total: weights.format * format_reward
            + weights.name * name_match
            + weights.keys * param_key_score
            + weights.values * value_score,
    }
}
