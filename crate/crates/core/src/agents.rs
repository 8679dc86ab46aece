//! Agent policies and the episode runner.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::catalog::{Catalog, Service};
use crate::metrics::{evaluate_task, MetricsConfig, TaskResult};
use crate::money::Money;
use crate::sandbox::{EpisodeStatus, Environment, Observation, StepRecord, ToolCall, UNPARSEABLE_ACTION};
use crate::taskgen::{AgentView, IntentKind, Task};
use crate::text::{normalize, tokenize};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("target {product_id} of task {task_id} is not on the first page of its own title query")]
    TargetUnsearchable { task_id: String, product_id: String },
    #[error("model transport failed: {0}")]
    Transport(String),
    #[error("policy failure: {0}")]
    Internal(String),
}

/// What a policy wants to do next.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Act { think: Option<String>, call: ToolCall, raw: Option<String>, warnings: Vec<String> },
    /// Model output with no usable tool call; still costs a step.
    Unparseable { raw: String, reason: String },
}

impl Decision {
    pub fn act(call: ToolCall) -> Decision {
        Decision::Act { think: None, call, raw: None, warnings: Vec::new() }
    }
}

pub trait Policy: Send {
    fn name(&self) -> &str;
    fn next(&mut self, view: &AgentView, history: &[StepRecord]) -> Result<Decision, PolicyError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think: Option<String>,
    pub call: ToolCall,
    pub observation: Observation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub task_id: String,
    pub intent: IntentKind,
    pub instruction: String,
    pub agent: String,
    pub steps: Vec<TrajectoryStep>,
    pub status: EpisodeStatus,
    pub recommended: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<TaskResult>,
    pub elapsed_ms: u64,
}

impl Trajectory {
    pub fn history(&self) -> Vec<StepRecord> {
        self.steps
            .iter()
            .map(|s| StepRecord { call: s.call.clone(), observation: s.observation.clone() })
            .collect()
    }
}

/// Drive `policy` until a terminal status. Policy errors end the episode
/// with an aborted status instead of propagating.
pub fn run_episode(policy: &mut dyn Policy, env: &Environment, task: &Task) -> Trajectory {
    let started = Instant::now();
    let view = task.agent_view();
    let mut state = env.start_episode(task);
    let mut steps = Vec::new();
    let mut failure = None;
    while !state.status.is_terminal() {
        let decision = match policy.next(&view, &state.history) {
            Ok(d) => d,
            Err(e) => {
                failure = Some(e.to_string());
                state.status = EpisodeStatus::Aborted;
                break;
            }
        };
        let (think, raw, warnings, observation) = match decision {
            Decision::Act { think, call, raw, warnings } => {
                let obs = env.step(&mut state, &call).expect("episode is running");
                (think, raw, warnings, obs)
            }
            Decision::Unparseable { raw, reason } => {
                let obs = env.step_unparseable(&mut state, &raw, &reason).expect("episode is running");
                (None, Some(raw), Vec::new(), obs)
            }
        };
        let call = state.history.last().expect("just stepped").call.clone();
        steps.push(TrajectoryStep { think, call, observation, raw, warnings });
    }
    Trajectory {
        trajectory_id: format!("{}:{}", policy.name(), task.task_id),
        task_id: task.task_id.clone(),
        intent: task.intent,
        instruction: task.instruction.clone(),
        agent: policy.name().to_owned(),
        steps,
        status: state.status,
        recommended: state.recommended,
        failure,
        scores: None,
        elapsed_ms: started.elapsed().as_millis() as u64,
    }
}

/// Fill in `trajectory.scores` from the final recommendation set.
pub fn score_trajectory(
    trajectory: &mut Trajectory,
    task: &Task,
    catalog: &Catalog,
    cfg: &MetricsConfig,
) -> Result<(), crate::metrics::MetricsError> {
    trajectory.scores = Some(evaluate_task(task, &trajectory.recommended, catalog, cfg)?);
    Ok(())
}

/// Outcome of re-executing a recorded trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub steps: usize,
    /// 1-based index of the first step whose observation differs.
    pub first_divergence: Option<usize>,
    pub expected: Option<String>,
    pub actual: Option<String>,
}

pub fn replay(env: &Environment, trajectory: &Trajectory) -> ReplayReport {
    let task = Task::bare(trajectory.task_id.clone(), trajectory.intent, trajectory.instruction.clone());
    let mut state = env.start_episode(&task);
    for (i, step) in trajectory.steps.iter().enumerate() {
        let expected = serde_json::to_string(&step.observation).expect("observation serializes");
        let actual = match env.step(&mut state, &step.call) {
            Ok(obs) => serde_json::to_string(&obs).expect("observation serializes"),
            Err(e) => e.to_string(),
        };
        if expected != actual {
            return ReplayReport {
                steps: trajectory.steps.len(),
                first_divergence: Some(i + 1),
                expected: Some(expected),
                actual: Some(actual),
            };
        }
    }
    ReplayReport { steps: trajectory.steps.len(), first_divergence: None, expected: None, actual: None }
}

pub fn write_trajectories(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> std::io::Result<()> {
    let mut out = String::new();
    for t in trajectories {
        out.push_str(&serde_json::to_string(t).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

pub fn load_trajectories(path: impl AsRef<Path>) -> std::io::Result<Vec<Trajectory>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

/// Test-only policy that reads the hidden targets and walks the shortest
/// scripted path to success.
pub struct OraclePolicy {
    task_id: String,
    script: VecDeque<ToolCall>,
    /// Target id that the previous call's result must contain.
    expect_in_results: Option<String>,
    titles: Vec<(String, String)>,
}

impl OraclePolicy {
    pub fn new(task: &Task, catalog: &Catalog) -> OraclePolicy {
        let titles: Vec<(String, String)> = task
            .targets
            .iter()
            .map(|t| {
                let title = catalog.find(&t.product_id).map(|p| p.title.clone()).unwrap_or_default();
                (t.product_id.clone(), title)
            })
            .collect();
        let ids: Vec<&str> = titles.iter().map(|(id, _)| id.as_str()).collect();
        let mut script = VecDeque::new();
        for (_, title) in &titles {
            script.push_back(ToolCall::new("find_product", json!({ "q": title })));
        }
        for id in &ids {
            script.push_back(ToolCall::new("view_product_information", json!({ "product_ids": [id] })));
        }
        if let (Some(rule), Some(budget)) = (task.voucher, task.budget) {
            script.push_back(ToolCall::new(
                "calculate",
                json!({
                    "product_ids": ids,
                    "voucher": { "min_total": rule.min_total, "discount": rule.discount },
                    "budget": budget,
                }),
            ));
        }
        script.push_back(ToolCall::new("recommend_product", json!({ "product_ids": ids })));
        script.push_back(ToolCall::new("terminate", json!({ "status": "success" })));
        OraclePolicy { task_id: task.task_id.clone(), script, expect_in_results: None, titles }
    }
}

fn result_ids(obs: &Observation) -> Vec<String> {
    obs.payload
        .get("items")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|i| i.get("product_id").and_then(Value::as_str).map(str::to_owned))
                .collect()
        })
        .unwrap_or_default()
}

impl Policy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn next(&mut self, _view: &AgentView, history: &[StepRecord]) -> Result<Decision, PolicyError> {
        if let Some(want) = self.expect_in_results.take() {
            let last = history.last().map(|s| result_ids(&s.observation)).unwrap_or_default();
            if !last.contains(&want) {
                return Err(PolicyError::TargetUnsearchable { task_id: self.task_id.clone(), product_id: want });
            }
        }
        let call = self
            .script
            .pop_front()
            .ok_or_else(|| PolicyError::Internal("oracle script exhausted".into()))?;
        if call.name == "find_product" {
            let q = call.params.get("q").and_then(Value::as_str).unwrap_or("");
            self.expect_in_results = self.titles.iter().find(|(_, t)| t == q).map(|(id, _)| id.clone());
        }
        Ok(Decision::act(call))
    }
}

/// Policy that keeps searching and never terminates; for step-limit tests.
pub struct LoopingPolicy;

impl Policy for LoopingPolicy {
    fn name(&self) -> &str {
        "looping"
    }

    fn next(&mut self, _view: &AgentView, _history: &[StepRecord]) -> Result<Decision, PolicyError> {
        Ok(Decision::act(ToolCall::new("find_product", json!({ "q": "anything" }))))
    }
}

const STOPWORDS: &[&str] = &[
    "a", "about", "afford", "all", "also", "am", "an", "and", "answer", "are", "asked", "based", "be", "brand",
    "budget", "but", "buy", "by", "can", "come", "could", "curious", "do", "everything", "find", "following",
    "for", "friend", "from", "has", "have", "help", "hold", "i", "im", "in", "is", "it", "items", "know", "like",
    "list", "looking", "m", "make", "me", "more", "most", "must", "my", "need", "not", "of", "offering", "on",
    "once", "one", "only", "order", "pay", "php", "please", "priced", "products", "purchase", "purchased",
    "recommend", "rules", "search", "seller", "sells", "shop", "shopping", "should", "single", "sold", "some",
    "something", "spend", "store", "subject", "sure", "than", "that", "the", "them", "these", "they", "this",
    "to", "total", "voucher", "want", "where", "with", "would", "you",
];

const SERVICE_WORDS: &[&str] =
    &["flashsale", "deals", "free", "shipping", "cash", "on", "delivery", "lazmall", "official", "service"];

/// Constraints the greedy baseline extracts for one requested item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemQuery {
    pub text: String,
    pub terms: Vec<String>,
    pub price_floor: Option<i64>,
    pub services: Vec<Service>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedInstruction {
    pub question: Option<String>,
    pub items: Vec<ItemQuery>,
    pub same_shop: bool,
    pub voucher: Option<(Money, Money)>,
    pub budget: Option<Money>,
}

fn number_after(text: &str, phrases: &[&str]) -> Option<Money> {
    let lower = text.to_lowercase();
    phrases.iter().find_map(|ph| {
        let at = lower.find(ph)? + ph.len();
        let rest = lower[at..].trim_start();
        let num: String = rest.chars().take_while(|c| c.is_ascii_digit() || *c == '.' || *c == ',').collect();
        num.trim_end_matches(['.', ',']).parse().ok()
    })
}

fn is_question(sentence: &str) -> bool {
    const WH: &[&str] = &["what", "which", "who", "whom", "whose", "where", "when", "why", "how"];
    sentence.trim_end().ends_with('?')
        && sentence.split_whitespace().take(3).any(|w| WH.contains(&w.to_lowercase().as_str()))
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, c) in chars.iter().enumerate() {
        cur.push(*c);
        let boundary = matches!(c, '.' | '?' | '!') && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if boundary {
            out.push(cur.trim().to_owned());
            cur.clear();
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_owned());
    }
    out
}

fn parse_item(text: &str) -> ItemQuery {
    let lower = text.to_lowercase();
    let price_floor = number_after(&lower, &["priced above", "price above", "above", "over", "more than"])
        .map(|m| m.floor_units());
    let services: Vec<Service> = Service::ALL
        .into_iter()
        .filter(|s| lower.contains(&s.phrase().to_lowercase()) || lower.contains(&s.as_str().to_lowercase()))
        .collect();
    let floor_token = price_floor.map(|p| p.to_string());
    let terms = tokenize(&lower)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()) && !SERVICE_WORDS.contains(&t.as_str()))
        .filter(|t| Some(t) != floor_token.as_ref())
        .collect();
    ItemQuery { text: text.to_owned(), terms, price_floor, services }
}

/// Pattern rules over the instruction text; never sees hidden fields.
pub fn parse_instruction(instruction: &str) -> ParsedInstruction {
    let sentences = split_sentences(instruction);
    let question = sentences.iter().find(|s| is_question(s)).cloned();
    let lower = instruction.to_lowercase();
    let same_shop = ["same shop", "same store", "single seller", "one store"].iter().any(|p| lower.contains(p));
    let min_total = number_after(instruction, &["exceeds", "at least"]);
    let discount = number_after(instruction, &["fixed discount of", "discount of"]);
    let budget = number_after(
        instruction,
        &["budget is only", "budget is", "spend at most", "pay more than", "afford is", "budget of"],
    );

    // The request body: everything except the question and voucher rules.
    let mut body: String = sentences
        .iter()
        .filter(|s| Some(*s) != question.as_ref())
        .cloned()
        .collect::<Vec<_>>()
        .join(" ");
    for cut in ["voucher rules:", "voucher with", "i also have a voucher", "i hold a voucher", "and i can use a voucher"] {
        if let Some(at) = body.to_lowercase().find(cut) {
            body.truncate(at);
        }
    }
    let items = if body.contains("(1)") {
        let mut parts = Vec::new();
        let mut rest = body.as_str();
        let mut n = 1;
        while let Some(start) = rest.find(&format!("({n})")) {
            let after = &rest[start + format!("({n})").len()..];
            let end = after.find(&format!("({})", n + 1)).unwrap_or(after.len());
            let mut segment = after[..end].to_owned();
            // The last item runs until the end of its sentence.
            if let Some(stop) = segment.find(". ") {
                segment.truncate(stop);
            }
            parts.push(parse_item(segment.trim().trim_end_matches([';', '.'])));
            rest = &after[end..];
            n += 1;
        }
        parts
    } else {
        vec![parse_item(&body)]
    };
    ParsedInstruction {
        question,
        items,
        same_shop,
        voucher: min_total.zip(discount),
        budget,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum GreedyPhase {
    Start,
    AwaitWeb,
    Search { item: usize, relaxed: u8 },
    AwaitSearch { item: usize, relaxed: u8 },
    AwaitView { item: usize },
    Calculate,
    Recommend,
    Terminate,
    Done,
}

/// Rule-based baseline: pattern-extract constraints, search, view the top
/// hits, keep the best local match per item.
pub struct GreedyPolicy {
    parsed: Option<ParsedInstruction>,
    phase: GreedyPhase,
    extra_terms: Vec<String>,
    chosen: Vec<Option<(String, String)>>,
    view_top: usize,
}

impl Default for GreedyPolicy {
    fn default() -> Self {
        GreedyPolicy { parsed: None, phase: GreedyPhase::Start, extra_terms: Vec::new(), chosen: Vec::new(), view_top: 3 }
    }
}

impl GreedyPolicy {
    pub fn new() -> GreedyPolicy {
        GreedyPolicy::default()
    }

    fn search_call(&self, item: usize, relaxed: u8) -> ToolCall {
        let parsed = self.parsed.as_ref().expect("parsed");
        let q = &parsed.items[item];
        let mut terms = q.terms.clone();
        terms.extend(self.extra_terms.iter().cloned());
        let mut params = Map::new();
        params.insert("q".into(), json!(terms.join(" ")));
        if relaxed < 2 {
            if let Some(floor) = q.price_floor {
                params.insert("price".into(), json!(format!("{}-", floor + 1)));
            }
            if !q.services.is_empty() {
                let names: Vec<&str> = q.services.iter().map(|s| s.as_str()).collect();
                params.insert("service".into(), json!(names.join(",")));
            }
        }
        if relaxed == 0 && parsed.same_shop && item > 0 {
            if let Some(Some((_, shop))) = self.chosen.first() {
                params.insert("shop_id".into(), json!(shop));
            }
        }
        ToolCall::new("find_product", Value::Object(params))
    }

    fn after_item(&self, item: usize) -> GreedyPhase {
        let parsed = self.parsed.as_ref().expect("parsed");
        if item + 1 < parsed.items.len() {
            GreedyPhase::Search { item: item + 1, relaxed: 0 }
        } else if parsed.voucher.is_some() {
            GreedyPhase::Calculate
        } else {
            GreedyPhase::Recommend
        }
    }

    fn chosen_ids(&self) -> Vec<String> {
        self.chosen.iter().flatten().map(|(id, _)| id.clone()).collect()
    }

    /// Local stand-in for relevance: required feature pairs found in the
    /// request text, then query-term overlap with the title.
    fn local_score(&self, item: usize, product: &Value) -> (usize, usize) {
        let q = &self.parsed.as_ref().expect("parsed").items[item];
        let text = normalize(&q.text);
        let features = product
            .get("features")
            .and_then(Value::as_object)
            .map(|f| {
                f.iter()
                    .filter(|(k, v)| v.as_str().is_some_and(|v| text.contains(&format!("{} {}", normalize(k), normalize(v)))))
                    .count()
            })
            .unwrap_or(0);
        let title: HashSet<String> =
            tokenize(product.get("title").and_then(Value::as_str).unwrap_or("")).into_iter().collect();
        let overlap = q.terms.iter().chain(&self.extra_terms).filter(|t| title.contains(*t)).count();
        (features, overlap)
    }
}

impl Policy for GreedyPolicy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn next(&mut self, view: &AgentView, history: &[StepRecord]) -> Result<Decision, PolicyError> {
        let last = history.last().map(|s| &s.observation);
        loop {
            match self.phase.clone() {
                GreedyPhase::Start => {
                    let parsed = parse_instruction(&view.instruction);
                    self.chosen = vec![None; parsed.items.len()];
                    let question = parsed.question.clone();
                    self.parsed = Some(parsed);
                    if let Some(q) = question {
                        self.phase = GreedyPhase::AwaitWeb;
                        return Ok(Decision::act(ToolCall::new("web_search", json!({ "q": q }))));
                    }
                    self.phase = GreedyPhase::Search { item: 0, relaxed: 0 };
                }
                GreedyPhase::AwaitWeb => {
                    let question = self.parsed.as_ref().and_then(|p| p.question.clone()).unwrap_or_default();
                    let known: HashSet<String> = tokenize(&question).into_iter().collect();
                    if let Some(top) = last.and_then(|o| o.payload.get("results")).and_then(|r| r.get(0)) {
                        let text = top.get("snippet").and_then(Value::as_str).unwrap_or("");
                        let mut seen = HashSet::new();
                        self.extra_terms = tokenize(text)
                            .into_iter()
                            .filter(|t| !known.contains(t) && !STOPWORDS.contains(&t.as_str()))
                            .filter(|t| !t.chars().all(|c| c.is_ascii_digit()))
                            .filter(|t| seen.insert(t.clone()))
                            .collect();
                    }
                    self.phase = GreedyPhase::Search { item: 0, relaxed: 0 };
                }
                GreedyPhase::Search { item, relaxed } => {
                    self.phase = GreedyPhase::AwaitSearch { item, relaxed };
                    return Ok(Decision::act(self.search_call(item, relaxed)));
                }
                GreedyPhase::AwaitSearch { item, relaxed } => {
                    let ids = last.map(result_ids).unwrap_or_default();
                    if ids.is_empty() {
                        self.phase = if relaxed < 2 {
                            GreedyPhase::Search { item, relaxed: relaxed + 1 }
                        } else {
                            self.after_item(item)
                        };
                        continue;
                    }
                    let top: Vec<String> = ids.into_iter().take(self.view_top).collect();
                    self.phase = GreedyPhase::AwaitView { item };
                    return Ok(Decision::act(ToolCall::new("view_product_information", json!({ "product_ids": top }))));
                }
                GreedyPhase::AwaitView { item } => {
                    let products: Vec<Value> = last
                        .and_then(|o| o.payload.get("products"))
                        .and_then(Value::as_array)
                        .cloned()
                        .unwrap_or_default();
                    let taken: BTreeSet<String> = self.chosen_ids().into_iter().collect();
                    let mut best: Option<((usize, usize), &Value)> = None;
                    for p in products.iter().filter(|p| p.get("title").is_some()) {
                        let id = p.get("product_id").and_then(Value::as_str).unwrap_or("");
                        if taken.contains(id) {
                            continue;
                        }
                        let score = self.local_score(item, p);
                        if best.as_ref().is_none_or(|(b, _)| score > *b) {
                            best = Some((score, p));
                        }
                    }
                    if let Some((_, p)) = best {
                        let id = p.get("product_id").and_then(Value::as_str).unwrap_or("").to_owned();
                        let shop = p.get("shop_id").and_then(Value::as_str).unwrap_or("").to_owned();
                        self.chosen[item] = Some((id, shop));
                    }
                    self.phase = self.after_item(item);
                }
                GreedyPhase::Calculate => {
                    self.phase = GreedyPhase::Recommend;
                    let parsed = self.parsed.as_ref().expect("parsed");
                    let ids = self.chosen_ids();
                    if let (Some((min_total, discount)), false) = (parsed.voucher, ids.is_empty()) {
                        let mut params = json!({
                            "product_ids": ids,
                            "voucher": { "min_total": min_total, "discount": discount },
                        });
                        if let Some(b) = parsed.budget {
                            params["budget"] = json!(b);
                        }
                        return Ok(Decision::act(ToolCall::new("calculate", params)));
                    }
                }
                GreedyPhase::Recommend => {
                    self.phase = GreedyPhase::Terminate;
                    let ids = self.chosen_ids();
                    if !ids.is_empty() {
                        return Ok(Decision::act(ToolCall::new("recommend_product", json!({ "product_ids": ids }))));
                    }
                }
                GreedyPhase::Terminate => {
                    self.phase = GreedyPhase::Done;
                    let status = if self.chosen.iter().all(Option::is_some) { "success" } else { "failure" };
                    return Ok(Decision::act(ToolCall::new("terminate", json!({ "status": status }))));
                }
                GreedyPhase::Done => {
                    return Ok(Decision::act(ToolCall::new("terminate", json!({ "status": "failure" }))));
                }
            }
        }
    }
}

/// Extracted model action.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAction {
    pub think: Option<String>,
    pub call: ToolCall,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unparseable action: {0}")]
pub struct UnparseableAction(pub String);

fn between<'a>(text: &'a str, open: &str, close: &str) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(s) = rest.find(open) {
        let after = &rest[s + open.len()..];
        match after.find(close) {
            Some(e) => {
                out.push(&after[..e]);
                rest = &after[e + close.len()..];
            }
            None => {
                out.push(after);
                break;
            }
        }
    }
    out
}

fn call_from_value(v: &Value) -> Option<ToolCall> {
    let name = v.get("name")?.as_str()?.trim();
    if name.is_empty() {
        return None;
    }
    let args = v.get("arguments").or_else(|| v.get("params")).or_else(|| v.get("parameters"));
    let args = match args {
        None | Some(Value::Null) => Value::Object(Map::new()),
        Some(Value::String(s)) => serde_json::from_str(s).ok()?,
        Some(o @ Value::Object(_)) => o.clone(),
        Some(_) => return None,
    };
    args.is_object().then(|| ToolCall::new(name, args))
}

/// JSON objects embedded anywhere in `text`, in order of appearance.
fn embedded_objects(text: &str) -> Vec<Value> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('{') {
        let start = i + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) => {
                i = start + stream.byte_offset();
                out.push(v);
            }
            _ => i = start + 1,
        }
    }
    out
}

/// Pull an optional `<think>` block and exactly one tool call out of model
/// text. Calls are read from `<tool_call>` blocks, or failing that from the
/// first bare JSON object carrying a `name`.
pub fn parse_action(text: &str) -> Result<ParsedAction, UnparseableAction> {
    let think = between(text, "<think>", "</think>").first().map(|t| t.trim().to_owned()).filter(|t| !t.is_empty());
    let without_think = match (text.find("<think>"), text.find("</think>")) {
        (Some(_), Some(e)) => &text[e + "</think>".len()..],
        _ => text,
    };
    let blocks = between(without_think, "<tool_call>", "</tool_call>");
    let mut calls: Vec<ToolCall> = if blocks.is_empty() {
        embedded_objects(without_think).iter().filter_map(call_from_value).collect()
    } else {
        blocks
            .iter()
            .filter_map(|b| embedded_objects(b).first().and_then(call_from_value))
            .collect()
    };
    if calls.is_empty() {
        return Err(UnparseableAction("no tool call found".into()));
    }
    let mut warnings = Vec::new();
    if calls.len() > 1 {
        warnings.push(format!("{} tool calls in one turn; only the first was executed", calls.len()));
    }
    Ok(ParsedAction { think, call: calls.swap_remove(0), warnings })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> ChatMessage {
        ChatMessage { role: role.into(), content: content.into() }
    }
}

/// Messages in, text out.
pub trait ChatTransport: Send {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, PolicyError>;
}

/// Generic chat-completion endpoint (`choices[0].message.content`).
#[derive(Debug, Clone)]
pub struct HttpChatTransport {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl HttpChatTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        HttpChatTransport { endpoint: endpoint.into(), api_key, model: model.into(), timeout: Duration::from_secs(120) }
    }
}

impl ChatTransport for HttpChatTransport {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, PolicyError> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: Value = req
            .send_json(json!({ "model": self.model, "messages": messages, "temperature": 0 }))
            .map_err(|e| PolicyError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| PolicyError::Transport("response has no message content".into()))
    }
}

/// Replays a fixed list of responses; the last one repeats.
#[derive(Debug, Clone, Default)]
pub struct CannedTransport {
    responses: VecDeque<String>,
    pub seen: Vec<Vec<ChatMessage>>,
}

impl CannedTransport {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(responses: I) -> Self {
        CannedTransport { responses: responses.into_iter().map(Into::into).collect(), seen: Vec::new() }
    }
}

impl ChatTransport for CannedTransport {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, PolicyError> {
        self.seen.push(messages.to_vec());
        match self.responses.len() {
            0 => Err(PolicyError::Transport("no canned responses".into())),
            1 => Ok(self.responses[0].clone()),
            _ => Ok(self.responses.pop_front().expect("non-empty")),
        }
    }
}

pub const TOOL_GUIDE: &str = "Tools (call exactly one per turn):\n\
- find_product(q, page?, service?, price?, shop_id?, sort?): search the catalog, 10 results per page. \
service is one of flashsale, freeShipping, COD, official; price is a band like \"115-\", \"-200\" or \"100-200\".\n\
- view_product_information(product_ids): full details for up to 10 products.\n\
- calculate(product_ids | prices, voucher?, budget?): settle a basket; voucher is {\"min_total\", \"discount\"}.\n\
- web_search(q, max_results?): look up general knowledge.\n\
- recommend_product(product_ids): add products to the final recommendation.\n\
- terminate(status): finish with \"success\" or \"failure\".\n\
Reply with <tool_call>{\"name\": ..., \"arguments\": {...}}</tool_call>.";

/// Chat-model policy. In think mode the model is asked to reason inside
/// `<think>` tags and the reasoning is kept; otherwise it is dropped.
pub struct ChatPolicy<T: ChatTransport> {
    transport: T,
    think: bool,
    label: String,
    raw_outputs: Vec<String>,
}

impl<T: ChatTransport> ChatPolicy<T> {
    pub fn new(transport: T, think: bool, label: impl Into<String>) -> Self {
        ChatPolicy { transport, think, label: label.into(), raw_outputs: Vec::new() }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn messages(&self, view: &AgentView, history: &[StepRecord]) -> Vec<ChatMessage> {
        let mode = if self.think {
            "Think step by step inside <think>...</think> before each tool call."
        } else {
            "Do not write any reasoning; output only the tool call."
        };
        let mut msgs = vec![
            ChatMessage::new("system", format!("You are a shopping assistant.\n{TOOL_GUIDE}\n{mode}")),
            ChatMessage::new("user", view.instruction.clone()),
        ];
        for (i, step) in history.iter().enumerate() {
            let said = self
                .raw_outputs
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("<tool_call>{}</tool_call>", json!({"name": step.call.name, "arguments": step.call.params})));
            msgs.push(ChatMessage::new("assistant", said));
            let mut obs = format!("Observation: {}", step.observation.payload);
            if step.observation.error_code() == Some("UnparseableAction") {
                obs.push_str("\nReminder: reply with exactly one <tool_call>{\"name\": ..., \"arguments\": {...}}</tool_call>.");
            }
            msgs.push(ChatMessage::new("user", obs));
        }
        msgs
    }
}

impl<T: ChatTransport> Policy for ChatPolicy<T> {
    fn name(&self) -> &str {
        &self.label
    }

    fn next(&mut self, view: &AgentView, history: &[StepRecord]) -> Result<Decision, PolicyError> {
        let msgs = self.messages(view, history);
        let text = self.transport.complete(&msgs)?;
        self.raw_outputs.push(text.clone());
        Ok(match parse_action(&text) {
            Ok(a) => Decision::Act {
                think: if self.think { a.think } else { None },
                call: a.call,
                raw: Some(text),
                warnings: a.warnings,
            },
            Err(e) => Decision::Unparseable { raw: text, reason: e.0 },
        })
    }
}

/// Whether a recorded step is a real tool call (not an unparseable turn).
pub fn is_tool_step(step: &TrajectoryStep) -> bool {
    step.call.name != UNPARSEABLE_ACTION
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Product;
    use crate::knowledge::{DisabledBackend, FixtureStore, KnowledgeSnippet};
    use crate::sandbox::EnvConfig;
    use crate::search::{Bm25Params, FieldWeights, ProductIndex};
    use crate::taskgen::TargetSpec;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn product(id: &str, shop: &str, title: &str, price: &str, features: &[(&str, &str)], svc: &[Service]) -> Product {
        Product {
            product_id: id.into(),
            title: title.into(),
            price: price.parse().unwrap(),
            shop_id: shop.into(),
            shop_name: format!("Shop {shop}"),
            category_path: vec!["fashion".into()],
            brand: None,
            features: features.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            services: svc.iter().copied().collect(),
            description: None,
        }
    }

    fn env() -> (Environment, Arc<Catalog>) {
        let cat = Arc::new(
            Catalog::from_products(vec![
                product("1000000001", "1111111", "Baggy Denim Jeans QX12A", "126.90", &[("fit", "baggy"), ("size", "eu 30")], &[Service::FlashSale]),
                product("1000000002", "1111111", "Slim Denim Jeans QX13A", "90", &[("fit", "slim")], &[]),
                product("1000000003", "1111111", "Cotton Tote Bag ZZ01B", "300", &[("color", "ivory")], &[]),
                product("1000000004", "2222222", "Cotton Tote Bag ZZ02B", "310", &[("color", "ivory")], &[]),
                product("1000000005", "2222222", "General Physics Textbook PH01X", "400", &[], &[]),
                product("1000000006", "2222222", "General Biology Textbook BI01X", "400", &[], &[]),
            ])
            .unwrap(),
        );
        let idx = Arc::new(ProductIndex::build(&cat, FieldWeights::default(), Bm25Params::default()).unwrap());
        let kb = Arc::new(FixtureStore::new(vec![KnowledgeSnippet {
            title: "Kunihiko Kodaira - biography".into(),
            url: "https://kb.local/k".into(),
            snippet: "Kunihiko Kodaira entered Kyoto Imperial University in 1922, enrolling to study physics.".into(),
        }]));
        (Environment::new(cat.clone(), idx, kb, EnvConfig::default()), cat)
    }

    fn task(intent: IntentKind, instruction: &str, ids: &[&str], cat: &Catalog) -> Task {
        let mut t = Task::bare("t-1", intent, instruction);
        t.targets = ids
            .iter()
            .map(|id| {
                let p = cat.find(id).unwrap();
                TargetSpec {
                    product_id: id.to_string(),
                    price_min: Money::from_units(p.price.floor_units() * 9 / 10),
                    price_max: Money::from_units(p.price.ceil_units() * 11 / 10 + 1),
                    required_features: BTreeMap::new(),
                    required_services: BTreeSet::new(),
                }
            })
            .collect();
        t
    }

    #[test]
    fn oracle_product_finding_is_four_calls() {
        let (env, cat) = env();
        let t = task(IntentKind::ProductFinding, "Show me jeans.", &["1000000001"], &cat);
        let mut traj = run_episode(&mut OraclePolicy::new(&t, &cat), &env, &t);
        assert_eq!(traj.status, EpisodeStatus::TerminatedSuccessClaimed);
        let names: Vec<&str> = traj.steps.iter().map(|s| s.call.name.as_str()).collect();
        assert_eq!(names, ["find_product", "view_product_information", "recommend_product", "terminate"]);
        score_trajectory(&mut traj, &t, &cat, &MetricsConfig::default()).unwrap();
        assert!(traj.scores.unwrap().success);
    }

    #[test]
    fn oracle_voucher_task_calculates_once() {
        let (env, cat) = env();
        let mut t = task(IntentKind::VoucherBudget, "x", &["1000000001", "1000000003"], &cat);
        t.voucher = crate::catalog::VoucherRule::new(Money::from_units(400), Money::from_units(50));
        t.budget = Some(Money::from_units(400));
        let mut traj = run_episode(&mut OraclePolicy::new(&t, &cat), &env, &t);
        assert_eq!(traj.steps.iter().filter(|s| s.call.name == "calculate").count(), 1);
        score_trajectory(&mut traj, &t, &cat, &MetricsConfig::default()).unwrap();
        assert!(traj.scores.unwrap().success);
    }

    #[test]
    fn oracle_reports_unsearchable_target() {
        let (env, cat) = env();
        let t = task(IntentKind::ProductFinding, "x", &["1000000001"], &cat);
        let mut oracle = OraclePolicy::new(&t, &cat);
        oracle.titles[0].1 = "nothing matches this".into();
        oracle.script[0] = ToolCall::new("find_product", json!({ "q": "nothing matches this" }));
        let traj = run_episode(&mut oracle, &env, &t);
        assert_eq!(traj.status, EpisodeStatus::Aborted);
        assert!(traj.failure.unwrap().contains("1000000001"));
    }

    #[test]
    fn non_terminating_policy_hits_step_limit() {
        let (env, cat) = env();
        let t = task(IntentKind::ProductFinding, "x", &["1000000001"], &cat);
        let traj = run_episode(&mut LoopingPolicy, &env, &t);
        assert_eq!(traj.status, EpisodeStatus::AbortedStepLimit);
        assert_eq!(traj.steps.len(), 30);
    }

    #[test]
    fn replay_matches_and_detects_edits() {
        let (env, cat) = env();
        let t = task(IntentKind::ProductFinding, "Show me baggy jeans priced above 114 PHP.", &["1000000001"], &cat);
        let traj = run_episode(&mut GreedyPolicy::new(), &env, &t);
        assert_eq!(replay(&env, &traj).first_divergence, None);
        let mut edited = traj.clone();
        edited.steps[0].call.params.insert("q".into(), json!("cotton"));
        assert_eq!(replay(&env, &edited).first_divergence, Some(1));
    }

    #[test]
    fn greedy_price_phrase_becomes_open_band() {
        let (env, cat) = env();
        let t = task(
            IntentKind::ProductFinding,
            "Show me jeans with fit baggy and size eu 30, offering flashsale deals, priced above 114 PHP.",
            &["1000000001"],
            &cat,
        );
        let traj = run_episode(&mut GreedyPolicy::new(), &env, &t);
        let first = &traj.steps[0].call;
        assert_eq!(first.name, "find_product");
        assert_eq!(first.params["price"], json!("115-"));
        assert_eq!(first.params["service"], json!("flashsale"));
        assert_eq!(traj.recommended, vec!["1000000001".to_owned()]);
    }

    #[test]
    fn greedy_asks_the_web_first_for_questions() {
        let (env, cat) = env();
        let text = "What major did Kunihiko Kodaira study when entering Kyoto Imperial University in 1922? \
                    Find me a textbook on that subject, priced above 360 PHP.";
        let t = task(IntentKind::KnowledgeReasoning, text, &["1000000005"], &cat);
        let traj = run_episode(&mut GreedyPolicy::new(), &env, &t);
        assert_eq!(traj.steps[0].call.name, "web_search");
        assert_eq!(traj.recommended, vec!["1000000005".to_owned()]);

        let blind = env.with_knowledge(Arc::new(DisabledBackend));
        let traj = run_episode(&mut GreedyPolicy::new(), &blind, &t);
        assert_eq!(traj.steps[0].observation.error_code(), Some("WebSearchDisabled"));
    }

    #[test]
    fn greedy_same_shop_follow_ups_carry_shop_id() {
        let (env, cat) = env();
        let text = "Find one store where I can buy (1) baggy denim jeans, priced above 114 PHP; \
                    (2) cotton tote bag with color ivory, priced above 270 PHP. Everything has to be from the same shop.";
        let t = task(IntentKind::MultiProductsSeller, text, &["1000000001", "1000000003"], &cat);
        let traj = run_episode(&mut GreedyPolicy::new(), &env, &t);
        let searches: Vec<&ToolCall> = traj.steps.iter().map(|s| &s.call).filter(|c| c.name == "find_product").collect();
        assert!(searches[0].params.get("shop_id").is_none());
        assert_eq!(searches[1].params["shop_id"], json!("1111111"));
        assert_eq!(traj.recommended, vec!["1000000001".to_owned(), "1000000003".to_owned()]);
    }

    #[test]
    fn instruction_parsing_of_voucher_clauses() {
        let p = parse_instruction(
            "I want to buy (1) pet vitamins, priced above 500 PHP; (2) cat litter, priced above 90 PHP. My budget is only 2601 PHP, \
             but I have a voucher with the following rules: 1. The voucher only applies to the products from the same shop. \
             2. It is valid only when the total price of the products exceeds 2368 PHP. 3. It provides a fixed discount of 392 PHP.",
        );
        assert_eq!(p.items.len(), 2);
        assert_eq!(p.budget, Some(Money::from_units(2601)));
        assert_eq!(p.voucher, Some((Money::from_units(2368), Money::from_units(392))));
        assert_eq!(p.items[1].price_floor, Some(90));
        assert!(p.items[1].terms.contains(&"litter".to_owned()));
        assert!(!p.items[1].terms.contains(&"budget".to_owned()));
    }

    #[test]
    fn parse_think_and_call() {
        let a = parse_action(
            "<think>need jeans</think>\nSure.\n<tool_call>{\"name\": \"find_product\", \"arguments\": {\"q\": \"jeans\"}}</tool_call>",
        )
        .unwrap();
        assert_eq!(a.think.as_deref(), Some("need jeans"));
        assert_eq!(a.call, ToolCall::new("find_product", json!({"q": "jeans"})));
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn parse_rejects_text_without_call() {
        assert!(parse_action("I think I should search for jeans.").is_err());
        assert!(parse_action("<think>{\"name\": 3}</think>").is_err());
    }

    #[test]
    fn parse_keeps_first_of_two_calls() {
        let text = "<tool_call>{\"name\": \"find_product\", \"arguments\": {\"q\": \"a\"}}</tool_call>\
                    <tool_call>{\"name\": \"terminate\", \"arguments\": {\"status\": \"success\"}}</tool_call>";
        let a = parse_action(text).unwrap();
        assert_eq!(a.call.name, "find_product");
        assert_eq!(a.warnings.len(), 1);
    }

    #[test]
    fn parse_bare_json_and_string_arguments() {
        let a = parse_action("Action: {\"name\": \"web_search\", \"arguments\": \"{\\\"q\\\": \\\"x\\\"}\"} done").unwrap();
        assert_eq!(a.call, ToolCall::new("web_search", json!({"q": "x"})));
    }

    #[test]
    fn chat_policy_think_modes_and_reminders() {
        let (env, cat) = env();
        let t = task(IntentKind::ProductFinding, "Show me jeans.", &["1000000001"], &cat);
        let responses = [
            "<think>hmm</think> no call here",
            "<think>search</think><tool_call>{\"name\":\"find_product\",\"arguments\":{\"q\":\"jeans\"}}</tool_call>",
            "<think>done</think><tool_call>{\"name\":\"terminate\",\"arguments\":{\"status\":\"failure\"}}</tool_call>",
        ];
        let mut think = ChatPolicy::new(CannedTransport::new(responses), true, "chat");
        let traj = run_episode(&mut think, &env, &t);
        assert_eq!(traj.steps.len(), 3);
        assert_eq!(traj.steps[0].observation.error_code(), Some("UnparseableAction"));
        assert_eq!(traj.steps[1].think.as_deref(), Some("search"));
        let last_prompt = think.transport().seen.last().unwrap();
        assert!(last_prompt.iter().any(|m| m.content.contains("Reminder")));

        let mut plain = ChatPolicy::new(CannedTransport::new(responses), false, "chat");
        let traj2 = run_episode(&mut plain, &env, &t);
        assert!(traj2.steps.iter().all(|s| s.think.is_none()));
        let calls = |tr: &Trajectory| tr.steps.iter().map(|s| s.call.clone()).collect::<Vec<_>>();
        assert_eq!(calls(&traj), calls(&traj2));
    }

    #[test]
    fn transport_failure_aborts_episode() {
        let (env, cat) = env();
        let t = task(IntentKind::ProductFinding, "x", &["1000000001"], &cat);
        let mut p = ChatPolicy::new(CannedTransport::new(Vec::<String>::new()), true, "chat");
        let traj = run_episode(&mut p, &env, &t);
        assert_eq!(traj.status, EpisodeStatus::Aborted);
        assert!(traj.steps.is_empty());
    }

    #[test]
    fn trajectory_file_round_trip() {
        let (env, cat) = env();
        let t = task(IntentKind::ProductFinding, "Show me jeans.", &["1000000001"], &cat);
        let traj = run_episode(&mut OraclePolicy::new(&t, &cat), &env, &t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.jsonl");
        write_trajectories(&path, std::slice::from_ref(&traj)).unwrap();
        assert_eq!(load_trajectories(&path).unwrap(), vec![traj]);
    }
}
