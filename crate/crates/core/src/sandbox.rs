//! The interactive shopping environment: episode state machine and the six
//! tool endpoints.
//!
//! Tool failures (unknown tool, bad parameters, unknown ids) come back as
//! error observations and still consume a step; only acting on a finished
//! episode is a hard error.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::catalog::{apply_voucher, Catalog, Product, Service, Settlement, VoucherRule};
use crate::knowledge::{KnowledgeBackend, KnowledgeError};
use crate::money::Money;
use crate::search::{PriceBand, ProductIndex, SearchQuery, SortKey};
use crate::taskgen::Task;

pub const DEFAULT_STEP_LIMIT: usize = 30;
/// Maximum ids accepted by batch tools.
pub const MAX_BATCH: usize = 10;
pub const MAX_WEB_RESULTS: usize = 10;
/// Reserved call name recorded when an agent's output could not be parsed.
pub const UNPARSEABLE_ACTION: &str = "<unparseable>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    FindProduct,
    ViewProductInformation,
    Calculate,
    WebSearch,
    RecommendProduct,
    Terminate,
}

impl ToolName {
    pub const ALL: [ToolName; 6] = [
        ToolName::FindProduct,
        ToolName::ViewProductInformation,
        ToolName::Calculate,
        ToolName::WebSearch,
        ToolName::RecommendProduct,
        ToolName::Terminate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::FindProduct => "find_product",
            ToolName::ViewProductInformation => "view_product_information",
            ToolName::Calculate => "calculate",
            ToolName::WebSearch => "web_search",
            ToolName::RecommendProduct => "recommend_product",
            ToolName::Terminate => "terminate",
        }
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolName {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        ToolName::ALL.into_iter().find(|t| t.as_str() == s).ok_or(())
    }
}

/// One action `tool_name(params)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, params: Value) -> ToolCall {
        let params = match params {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        ToolCall { name: name.into(), params }
    }

    pub fn tool(&self) -> Option<ToolName> {
        self.name.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: String,
    pub step_index: usize,
    pub payload: Value,
}

impl Observation {
    pub fn is_error(&self) -> bool {
        self.payload.get("error").is_some()
    }

    pub fn error_code(&self) -> Option<&str> {
        self.payload.get("error")?.get("code")?.as_str()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    TerminatedSuccessClaimed,
    TerminatedFailureClaimed,
    AbortedStepLimit,
    /// Policy failure or idle-session expiry.
    Aborted,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        self != EpisodeStatus::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub call: ToolCall,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub episode_id: String,
    pub task_id: String,
    pub step_count: usize,
    pub step_limit: usize,
    pub history: Vec<StepRecord>,
    pub recommended: Vec<String>,
    pub status: EpisodeStatus,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SandboxError {
    #[error("episode {0} has already finished")]
    EpisodeFinished(String),
}

/// Failures reported to the agent as error observations.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("unknown tool {0:?}; available tools: find_product, view_product_information, calculate, web_search, recommend_product, terminate")]
    UnknownTool(String),
    #[error("invalid parameters for {tool}: {reason}")]
    InvalidParams { tool: String, reason: String },
    #[error("unknown product id {0:?}")]
    UnknownId(String),
    #[error("product_ids must not be empty")]
    EmptyIdList,
    #[error("calculate takes either product_ids or prices, not both")]
    MixedModeInput,
    #[error("{0}")]
    BackendUnavailable(String),
    #[error("web_search is not available in this environment")]
    WebSearchDisabled,
    #[error("could not parse an action: {0}. Reply with one <tool_call>{{\"name\": ..., \"arguments\": {{...}}}}</tool_call> block")]
    UnparseableAction(String),
}

impl ToolError {
    pub fn code(&self) -> &'static str {
        match self {
            ToolError::UnknownTool(_) => "UnknownTool",
            ToolError::InvalidParams { .. } => "InvalidParams",
            ToolError::UnknownId(_) => "UnknownId",
            ToolError::EmptyIdList => "EmptyIdList",
            ToolError::MixedModeInput => "MixedModeInput",
            ToolError::BackendUnavailable(_) => "BackendUnavailable",
            ToolError::WebSearchDisabled => "WebSearchDisabled",
            ToolError::UnparseableAction(_) => "UnparseableAction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub step_limit: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { step_limit: DEFAULT_STEP_LIMIT }
    }
}

static EPISODE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Shared read-only environment. Episodes carry all mutable state.
#[derive(Clone)]
pub struct Environment {
    catalog: Arc<Catalog>,
    index: Arc<ProductIndex>,
    knowledge: Arc<dyn KnowledgeBackend>,
    config: EnvConfig,
}

impl fmt::Debug for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Environment")
            .field("products", &self.catalog.len())
            .field("knowledge", &self.knowledge.name())
            .field("config", &self.config)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum DetailRecord {
    Found(Product),
    Missing { product_id: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PricedItem {
    #[serde(skip_serializing_if = "Option::is_none")]
    product_id: Option<String>,
    price: Money,
    #[serde(skip_serializing_if = "Option::is_none")]
    shop_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CalculationReport {
    items: Vec<PricedItem>,
    #[serde(flatten)]
    settlement: Settlement,
    #[serde(skip_serializing_if = "Option::is_none")]
    budget: Option<Money>,
    #[serde(skip_serializing_if = "Option::is_none")]
    within_budget: Option<bool>,
}

impl Environment {
    pub fn new(
        catalog: Arc<Catalog>,
        index: Arc<ProductIndex>,
        knowledge: Arc<dyn KnowledgeBackend>,
        config: EnvConfig,
    ) -> Environment {
        Environment { catalog, index, knowledge, config }
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn index(&self) -> &Arc<ProductIndex> {
        &self.index
    }

    pub fn config(&self) -> EnvConfig {
        self.config
    }

    pub fn knowledge_backend(&self) -> &str {
        self.knowledge.name()
    }

    /// Same catalog and index with a different knowledge backend.
    pub fn with_knowledge(&self, knowledge: Arc<dyn KnowledgeBackend>) -> Environment {
        Environment { knowledge, ..self.clone() }
    }

    pub fn start_episode(&self, task: &Task) -> EpisodeState {
        let n = EPISODE_COUNTER.fetch_add(1, Ordering::Relaxed);
        EpisodeState {
            episode_id: format!("ep-{n:08}"),
            task_id: task.task_id.clone(),
            step_count: 0,
            step_limit: self.config.step_limit,
            history: Vec::new(),
            recommended: Vec::new(),
            status: EpisodeStatus::Running,
        }
    }

    /// Execute one action and record it.
    pub fn step(&self, state: &mut EpisodeState, call: &ToolCall) -> Result<Observation, SandboxError> {
        if state.status.is_terminal() {
            return Err(SandboxError::EpisodeFinished(state.episode_id.clone()));
        }
        let result = self.dispatch(state, call);
        state.step_count += 1;
        let payload = match result {
            Ok(v) => v,
            Err(e) => json!({ "error": { "code": e.code(), "message": e.to_string() } }),
        };
        let observation = Observation { kind: call.name.clone(), step_index: state.step_count, payload };
        state.history.push(StepRecord { call: call.clone(), observation: observation.clone() });
        if !state.status.is_terminal() && state.step_count >= state.step_limit {
            state.status = EpisodeStatus::AbortedStepLimit;
        }
        Ok(observation)
    }

    /// Record an agent output that held no usable action. Consumes a step.
    pub fn step_unparseable(
        &self,
        state: &mut EpisodeState,
        raw: &str,
        reason: &str,
    ) -> Result<Observation, SandboxError> {
        let call = ToolCall::new(UNPARSEABLE_ACTION, json!({ "raw": raw, "reason": reason }));
        self.step(state, &call)
    }

    fn dispatch(&self, state: &mut EpisodeState, call: &ToolCall) -> Result<Value, ToolError> {
        if call.name == UNPARSEABLE_ACTION {
            let reason = call.params.get("reason").and_then(Value::as_str).unwrap_or("no tool call found");
            return Err(ToolError::UnparseableAction(reason.to_owned()));
        }
        let tool: ToolName = call.tool().ok_or_else(|| ToolError::UnknownTool(call.name.clone()))?;
        let p = Params { tool, map: &call.params };
        match tool {
            ToolName::FindProduct => self.tool_find_product(&p),
            ToolName::ViewProductInformation => self.tool_view_product_information(&p),
            ToolName::Calculate => self.tool_calculate(&p),
            ToolName::WebSearch => self.tool_web_search(&p),
            ToolName::RecommendProduct => self.tool_recommend_product(state, &p),
            ToolName::Terminate => self.tool_terminate(state, &p),
        }
    }

    fn tool_find_product(&self, p: &Params) -> Result<Value, ToolError> {
        p.allow(&["q", "page", "service", "price", "shop_id", "sort"])?;
        let mut query = SearchQuery::new(p.string("q")?.unwrap_or_default());
        if let Some(page) = p.integer("page")? {
            if page < 1 {
                return Err(p.invalid("page must be >= 1"));
            }
            query.page = page as usize;
        }
        query.services = p.services("service")?;
        query.price = p.price_band("price")?;
        query.shop_id = p.string("shop_id")?.filter(|s| !s.trim().is_empty());
        if let Some(sort) = p.string("sort")? {
            query.sort = sort.parse::<SortKey>().map_err(|e| p.invalid(&e))?;
        }
        let page = self.index.search(&self.catalog, &query).map_err(|e| p.invalid(&e.to_string()))?;
        Ok(serde_json::to_value(page).expect("page serializes"))
    }

    /// Full detail records; unknown ids are reported inline.
    fn tool_view_product_information(&self, p: &Params) -> Result<Value, ToolError> {
        p.allow(&["product_ids", "product_id"])?;
        let ids = p.id_list()?;
        let records: Vec<DetailRecord> = ids
            .into_iter()
            .map(|id| match self.catalog.find(&id) {
                Some(product) => DetailRecord::Found(product.clone()),
                None => DetailRecord::Missing { product_id: id, error: "not_found".into() },
            })
            .collect();
        Ok(json!({ "products": records }))
    }

    fn tool_calculate(&self, p: &Params) -> Result<Value, ToolError> {
        p.allow(&["product_ids", "product_id", "prices", "voucher", "budget"])?;
        let has_ids = p.map.contains_key("product_ids") || p.map.contains_key("product_id");
        let has_prices = p.map.contains_key("prices");
        let items: Vec<PricedItem> = match (has_ids, has_prices) {
            (true, true) => return Err(ToolError::MixedModeInput),
            (false, false) => return Err(p.invalid("one of product_ids or prices is required")),
            (true, false) => p
                .id_list()?
                .into_iter()
                .map(|id| {
                    let prod = self.catalog.find(&id).ok_or(ToolError::UnknownId(id))?;
                    Ok(PricedItem {
                        product_id: Some(prod.product_id.clone()),
                        price: prod.price,
                        shop_id: Some(prod.shop_id.clone()),
                    })
                })
                .collect::<Result<_, ToolError>>()?,
            // Literal prices carry no shop; they settle as one basket.
            (false, true) => {
                let prices = p.money_list("prices")?;
                if prices.is_empty() {
                    return Err(p.invalid("prices must not be empty"));
                }
                prices.into_iter().map(|price| PricedItem { product_id: None, price, shop_id: None }).collect()
            }
        };
        let voucher = p.voucher("voucher")?;
        let budget = p.money("budget")?;
        let prices: Vec<Money> = items.iter().map(|i| i.price).collect();
        let shops: Vec<&str> = items.iter().map(|i| i.shop_id.as_deref().unwrap_or("")).collect();
        let settlement = apply_voucher(&prices, &shops, voucher.as_ref()).expect("aligned inputs");
        let report = CalculationReport {
            within_budget: budget.map(|b| settlement.final_total <= b),
            items,
            settlement,
            budget,
        };
        Ok(serde_json::to_value(report).expect("report serializes"))
    }

    fn tool_web_search(&self, p: &Params) -> Result<Value, ToolError> {
        p.allow(&["q", "max_results"])?;
        let q = p.string("q")?.unwrap_or_default();
        if q.trim().is_empty() {
            return Err(p.invalid("q must not be empty"));
        }
        let max = p.integer("max_results")?.unwrap_or(5);
        if !(1..=MAX_WEB_RESULTS as i64).contains(&max) {
            return Err(p.invalid("max_results must be between 1 and 10"));
        }
        match self.knowledge.search(&q, max as usize) {
            Ok(results) => Ok(json!({ "results": results })),
            Err(KnowledgeError::Disabled) => Err(ToolError::WebSearchDisabled),
            Err(e) => Err(ToolError::BackendUnavailable(e.to_string())),
        }
    }

    fn tool_recommend_product(&self, state: &mut EpisodeState, p: &Params) -> Result<Value, ToolError> {
        p.allow(&["product_ids", "product_id"])?;
        let ids = p.id_list()?;
        if let Some(unknown) = ids.iter().find(|id| self.catalog.find(id).is_none()) {
            return Err(ToolError::UnknownId(unknown.clone()));
        }
        let mut added = Vec::new();
        for id in ids {
            if !state.recommended.contains(&id) {
                state.recommended.push(id.clone());
                added.push(id);
            }
        }
        Ok(json!({ "added": added, "recommended": state.recommended }))
    }

    fn tool_terminate(&self, state: &mut EpisodeState, p: &Params) -> Result<Value, ToolError> {
        p.allow(&["status"])?;
        let status = p.string("status")?.unwrap_or_else(|| "success".into());
        let (next, message) = match status.trim().to_ascii_lowercase().as_str() {
            "success" => (EpisodeStatus::TerminatedSuccessClaimed, "The episode was completed successfully."),
            "failure" => (EpisodeStatus::TerminatedFailureClaimed, "The episode ended with a failure claim."),
            _ => return Err(p.invalid("status must be success or failure")),
        };
        state.status = next;
        Ok(json!({ "status": status.trim().to_ascii_lowercase(), "message": message }))
    }
}

/// Typed accessors over a call's parameter map.
pub struct Params<'a> {
    tool: ToolName,
    map: &'a Map<String, Value>,
}

impl Params<'_> {
    fn invalid(&self, reason: &str) -> ToolError {
        ToolError::InvalidParams { tool: self.tool.as_str().to_owned(), reason: reason.to_owned() }
    }

    fn allow(&self, keys: &[&str]) -> Result<(), ToolError> {
        match self.map.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(self.invalid(&format!("unexpected parameter {k:?}"))),
            None => Ok(()),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>, ToolError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(Value::Number(n)) => Ok(Some(n.to_string())),
            Some(_) => Err(self.invalid(&format!("{key} must be a string"))),
        }
    }

    fn integer(&self, key: &str) -> Result<Option<i64>, ToolError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => n
                .as_i64()
                .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
                .map(Some)
                .ok_or_else(|| self.invalid(&format!("{key} must be an integer"))),
            Some(Value::String(s)) => {
                s.trim().parse().map(Some).map_err(|_| self.invalid(&format!("{key} must be an integer")))
            }
            Some(_) => Err(self.invalid(&format!("{key} must be an integer"))),
        }
    }

    fn money(&self, key: &str) -> Result<Option<Money>, ToolError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|_| self.invalid(&format!("{key} must be a decimal amount"))),
        }
    }

    fn money_list(&self, key: &str) -> Result<Vec<Money>, ToolError> {
        match self.map.get(key) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| serde_json::from_value(v.clone()).map_err(|_| self.invalid(&format!("{key} must hold amounts"))))
                .collect(),
            Some(Value::String(s)) => s
                .split(',')
                .filter(|x| !x.trim().is_empty())
                .map(|x| x.parse().map_err(|_| self.invalid(&format!("{key} must hold amounts"))))
                .collect(),
            _ => Err(self.invalid(&format!("{key} must be a list of amounts"))),
        }
    }

    fn services(&self, key: &str) -> Result<Vec<Service>, ToolError> {
        let raw: Vec<String> = match self.map.get(key) {
            None | Some(Value::Null) => return Ok(Vec::new()),
            Some(Value::String(s)) => s.split([',', '/']).map(str::to_owned).collect(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_str().map(str::to_owned).ok_or_else(|| self.invalid("service entries must be strings")))
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(self.invalid("service must be a string or list")),
        };
        let mut out = BTreeSet::new();
        for s in raw.iter().filter(|s| !s.trim().is_empty()) {
            out.insert(s.parse::<Service>().map_err(|e| self.invalid(&e))?);
        }
        Ok(out.into_iter().collect())
    }

    fn price_band(&self, key: &str) -> Result<Option<PriceBand>, ToolError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) if s.trim().is_empty() => Ok(None),
            Some(Value::String(s)) => s.parse::<PriceBand>().map(Some).map_err(|e| self.invalid(&e.to_string())),
            Some(Value::Object(o)) => {
                let side = |k: &str| -> Result<Option<Money>, ToolError> {
                    match o.get(k) {
                        None | Some(Value::Null) => Ok(None),
                        Some(v) => serde_json::from_value(v.clone()).map(Some).map_err(|_| self.invalid("bad price bound")),
                    }
                };
                PriceBand::new(side("min")?, side("max")?).map(Some).map_err(|e| self.invalid(&e.to_string()))
            }
            Some(_) => Err(self.invalid("price must be a band like \"115-\"")),
        }
    }

    fn voucher(&self, key: &str) -> Result<Option<VoucherRule>, ToolError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => {
                let rule: VoucherRule = serde_json::from_value(v.clone())
                    .map_err(|e| self.invalid(&format!("voucher: {e}")))?;
                VoucherRule::new(rule.min_total, rule.discount)
                    .map(|r| Some(VoucherRule { same_shop_required: rule.same_shop_required, ..r }))
                    .ok_or_else(|| self.invalid("voucher requires 0 < discount < min_total"))
            }
        }
    }

    fn id_list(&self) -> Result<Vec<String>, ToolError> {
        let value = self.map.get("product_ids").or_else(|| self.map.get("product_id"));
        let ids: Vec<String> = match value {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::String(s)) => s.split(',').map(|x| x.trim().to_owned()).filter(|x| !x.is_empty()).collect(),
            Some(Value::Number(n)) => vec![n.to_string()],
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.trim().to_owned()),
                    Value::Number(n) => Ok(n.to_string()),
                    _ => Err(self.invalid("product ids must be strings")),
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(self.invalid("product_ids must be a list")),
        };
        if ids.is_empty() {
            return Err(ToolError::EmptyIdList);
        }
        if ids.len() > MAX_BATCH {
            return Err(self.invalid(&format!("at most {MAX_BATCH} ids per call")));
        }
        Ok(ids)
    }
}
