//! Task generation: stratified product sampling, field extraction,
//! instruction rendering, voucher/budget synthesis and knowledge linking.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::catalog::{Catalog, Product, Service, VoucherRule};
use crate::money::Money;
use crate::text::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentKind {
    ProductFinding,
    KnowledgeReasoning,
    MultiProductsSeller,
    VoucherBudget,
}

impl IntentKind {
    pub const ALL: [IntentKind; 4] = [
        IntentKind::ProductFinding,
        IntentKind::KnowledgeReasoning,
        IntentKind::MultiProductsSeller,
        IntentKind::VoucherBudget,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IntentKind::ProductFinding => "product_finding",
            IntentKind::KnowledgeReasoning => "knowledge_reasoning",
            IntentKind::MultiProductsSeller => "multi_products_seller",
            IntentKind::VoucherBudget => "voucher_budget",
        }
    }

    fn code(self) -> &'static str {
        match self {
            IntentKind::ProductFinding => "pf",
            IntentKind::KnowledgeReasoning => "kr",
            IntentKind::MultiProductsSeller => "ms",
            IntentKind::VoucherBudget => "vb",
        }
    }

    /// Allowed number of target products.
    pub fn target_range(self) -> (usize, usize) {
        match self {
            IntentKind::ProductFinding | IntentKind::KnowledgeReasoning => (1, 1),
            IntentKind::MultiProductsSeller => (2, 4),
            IntentKind::VoucherBudget => (1, 4),
        }
    }
}

impl fmt::Display for IntentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IntentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IntentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.code() == s)
            .ok_or_else(|| format!("unknown intent {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub product_id: String,
    pub price_min: Money,
    pub price_max: Money,
    pub required_features: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub required_services: BTreeSet<Service>,
}

/// Proof that a voucher task is solvable: the interval the budget was drawn
/// from and the settlement of the target basket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoucherCertificate {
    pub raw_total: Money,
    pub final_total: Money,
    pub budget_lo: Money,
    pub budget_hi: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub intent: IntentKind,
    pub instruction: String,
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub knowledge_attribute: Option<String>,
    #[serde(default)]
    pub voucher: Option<VoucherRule>,
    #[serde(default)]
    pub budget: Option<Money>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<VoucherCertificate>,
    /// Raw text returned by a remote renderer, kept for auditing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub renderer_response: Option<String>,
}

/// What an agent is allowed to see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentView {
    pub task_id: String,
    pub intent: IntentKind,
    pub instruction: String,
}

impl Task {
    /// A task with no hidden targets, mostly useful for driving the sandbox.
    pub fn bare(task_id: impl Into<String>, intent: IntentKind, instruction: impl Into<String>) -> Task {
        Task {
            task_id: task_id.into(),
            intent,
            instruction: instruction.into(),
            targets: Vec::new(),
            knowledge_attribute: None,
            voucher: None,
            budget: None,
            seed: 0,
            certificate: None,
            renderer_response: None,
        }
    }

    pub fn agent_view(&self) -> AgentView {
        AgentView { task_id: self.task_id.clone(), intent: self.intent, instruction: self.instruction.clone() }
    }

    /// Structural checks against the catalog.
    pub fn validate(&self, catalog: &Catalog) -> Result<(), TaskgenError> {
        let bad = |reason: String| Err(TaskgenError::InvalidTask { task_id: self.task_id.clone(), reason });
        let (lo, hi) = self.intent.target_range();
        if self.targets.len() < lo || self.targets.len() > hi {
            return bad(format!("{} targets outside {lo}..={hi}", self.targets.len()));
        }
        let mut shops = BTreeSet::new();
        for t in &self.targets {
            let Some(p) = catalog.find(&t.product_id) else {
                return bad(format!("unknown target {}", t.product_id));
            };
            if !(t.price_min <= p.price && p.price <= t.price_max) {
                return bad(format!("price {} outside band for {}", p.price, p.product_id));
            }
            if t.required_features.iter().any(|(k, v)| p.features.get(k) != Some(v)) {
                return bad(format!("required features not a subset for {}", p.product_id));
            }
            shops.insert(p.shop_id.as_str());
        }
        if matches!(self.intent, IntentKind::MultiProductsSeller | IntentKind::VoucherBudget) && shops.len() > 1 {
            return bad("targets span several shops".into());
        }
        if self.intent == IntentKind::KnowledgeReasoning && self.knowledge_attribute.is_none() {
            return bad("missing knowledge attribute".into());
        }
        if self.voucher.is_some() != self.budget.is_some() {
            return bad("voucher and budget must come together".into());
        }
        if instruction_leaks(&self.instruction, catalog) {
            return bad("instruction contains a raw identifier".into());
        }
        Ok(())
    }
}

/// True when any token of `text` equals a product or shop id.
pub fn instruction_leaks(text: &str, catalog: &Catalog) -> bool {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| w.len() >= 5 && w.bytes().all(|b| b.is_ascii_digit()))
        .any(|w| catalog.find(w).is_some() || catalog.shops().contains_key(w))
}

#[derive(Debug, Error)]
pub enum TaskgenError {
    #[error("insufficient inventory for {intent}: {requirement}")]
    InsufficientInventory { intent: IntentKind, requirement: String },
    #[error("line {line}: unlinked fact: {reason}")]
    UnlinkedFact { line: usize, reason: String },
    #[error("fact store is empty")]
    EmptyFactStore,
    #[error("renderer failure: {0}")]
    RendererFailure(String),
    #[error("task {task_id}: {reason}")]
    InvalidTask { task_id: String, reason: String },
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeFact {
    pub question: String,
    pub answer: String,
    pub product_ids: Vec<String>,
}

/// Validated facts: every answer occurs in every linked product title.
#[derive(Debug, Clone, Default)]
pub struct FactStore {
    facts: Vec<KnowledgeFact>,
}

impl FactStore {
    pub fn new(facts: Vec<KnowledgeFact>, catalog: &Catalog) -> Result<FactStore, TaskgenError> {
        let mut out = Vec::with_capacity(facts.len());
        for (i, mut fact) in facts.into_iter().enumerate() {
            let line = i + 1;
            fact.answer = normalize(&fact.answer);
            if fact.answer.is_empty() {
                return Err(TaskgenError::UnlinkedFact { line, reason: "empty answer".into() });
            }
            if fact.product_ids.is_empty() {
                return Err(TaskgenError::UnlinkedFact { line, reason: "no linked products".into() });
            }
            for id in &fact.product_ids {
                let p = catalog
                    .find(id)
                    .ok_or_else(|| TaskgenError::UnlinkedFact { line, reason: format!("unknown product {id}") })?;
                if !normalize(&p.title).contains(&fact.answer) {
                    return Err(TaskgenError::UnlinkedFact {
                        line,
                        reason: format!("answer {:?} not in title of {id}", fact.answer),
                    });
                }
            }
            out.push(fact);
        }
        Ok(FactStore { facts: out })
    }

    pub fn load(path: impl AsRef<Path>, catalog: &Catalog) -> Result<FactStore, TaskgenError> {
        let text = fs::read_to_string(path)?;
        let mut facts = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            facts.push(
                serde_json::from_str(raw).map_err(|e| TaskgenError::Format { line: i + 1, reason: e.to_string() })?,
            );
        }
        FactStore::new(facts, catalog)
    }

    pub fn facts(&self) -> &[KnowledgeFact] {
        &self.facts
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// Read-only projection of the fields an instruction may draw on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldRecord {
    pub product_id: String,
    pub title: String,
    pub price: Money,
    pub brand: Option<String>,
    /// Most specific category label, used as the item noun.
    pub kind: String,
    pub features: BTreeMap<String, String>,
    pub services: BTreeSet<Service>,
    pub shop_id: String,
    pub shop_name: String,
}

pub fn extract_fields(product: &Product) -> FieldRecord {
    FieldRecord {
        product_id: product.product_id.clone(),
        title: product.title.clone(),
        price: product.price,
        brand: product.brand.clone(),
        kind: product.category_path.last().cloned().unwrap_or_else(|| "product".into()),
        features: product.features.clone(),
        services: product.services.clone(),
        shop_id: product.shop_id.clone(),
        shop_name: product.shop_name.clone(),
    }
}

/// Price band around `price`: ±10%, rounded outward to whole units.
pub fn price_band(price: Money) -> (Money, Money) {
    let lo = Money::from_units(price.scale(9, 10).floor_units());
    let hi = Money::from_units(price.scale(11, 10).ceil_units());
    // scale() rounds to the centavo; make sure the band still covers price.
    (lo.min(Money::from_units(price.floor_units())), hi.max(Money::from_units(price.ceil_units())))
}

/// Draw F_t: a random non-empty subset (at most four) of the product's
/// features, plus up to two of its services to mention.
pub fn draw_target(record: &FieldRecord, rng: &mut ChaCha8Rng) -> TargetSpec {
    let mut names: Vec<&String> = record.features.keys().collect();
    names.shuffle(rng);
    let k = if names.is_empty() { 0 } else { rng.random_range(1..=names.len().min(4)) };
    let required_features = names
        .into_iter()
        .take(k)
        .map(|n| (n.clone(), record.features[n].clone()))
        .collect();
    let mut services: Vec<Service> = record.services.iter().copied().collect();
    services.shuffle(rng);
    let s = rng.random_range(0..=services.len().min(2));
    let (price_min, price_max) = price_band(record.price);
    TargetSpec {
        product_id: record.product_id.clone(),
        price_min,
        price_max,
        required_features,
        required_services: services.into_iter().take(s).collect(),
    }
}

/// Weighted distribution over target counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution(pub Vec<(usize, u32)>);

impl CountDistribution {
    pub fn seller_default() -> Self {
        CountDistribution(vec![(2, 327), (3, 345), (4, 328)])
    }

    pub fn voucher_default() -> Self {
        CountDistribution(vec![(1, 88), (2, 305), (3, 317), (4, 290)])
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let total: u32 = self.0.iter().map(|(_, w)| w).sum();
        let mut x = rng.random_range(0..total.max(1));
        for (k, w) in &self.0 {
            if x < *w {
                return *k;
            }
            x -= w;
        }
        self.0.last().map(|(k, _)| *k).unwrap_or(1)
    }
}

/// Top-level categories in a permuted round-robin order: every block of
/// `strata` consecutive draws visits each category exactly once.
pub fn stratum_schedule(catalog: &Catalog, seed: u64, n: usize) -> Vec<String> {
    let keys: BTreeSet<&str> = catalog.products().iter().map(Product::top_category).collect();
    let keys: Vec<&str> = keys.into_iter().collect();
    let mut out = Vec::with_capacity(n);
    let mut cycle = 0;
    while out.len() < n && !keys.is_empty() {
        let mut order = keys.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, cycle)));
        out.extend(order.into_iter().take(n - out.len()).map(str::to_owned));
        cycle += 1;
    }
    out
}

/// Single-target intents draw one product from `stratum` (or from a
/// uniformly chosen top-level category); multi-target intents pick a shop
/// holding at least `k` products and draw `k` of them, preferring distinct
/// item kinds.
pub fn sample_products<'a>(
    catalog: &'a Catalog,
    intent: IntentKind,
    k: usize,
    stratum: Option<&str>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a Product>, TaskgenError> {
    let insufficient = |requirement: String| TaskgenError::InsufficientInventory { intent, requirement };
    if catalog.is_empty() {
        return Err(insufficient("catalog is empty".into()));
    }
    let multi = matches!(intent, IntentKind::MultiProductsSeller | IntentKind::VoucherBudget);
    if !multi {
        let mut strata: BTreeMap<&str, Vec<&Product>> = BTreeMap::new();
        for p in catalog.products() {
            strata.entry(p.top_category()).or_default().push(p);
        }
        let key = match stratum {
            Some(key) => key,
            None => *strata.keys().copied().collect::<Vec<_>>().choose(rng).expect("non-empty catalog"),
        };
        let members = strata.get(key).ok_or_else(|| insufficient(format!("no products in category {key:?}")))?;
        return Ok(vec![*members.choose(rng).expect("non-empty stratum")]);
    }
    let eligible: Vec<&str> = catalog
        .shops()
        .values()
        .filter(|s| s.product_ids.len() >= k)
        .map(|s| s.shop_id.as_str())
        .collect();
    let shop = eligible
        .choose(rng)
        .ok_or_else(|| insufficient(format!("no shop with at least {k} products")))?;
    let mut pool = catalog.list_shop_products(shop).expect("shop exists");
    pool.shuffle(rng);
    let mut picked: Vec<&Product> = Vec::with_capacity(k);
    let mut kinds = HashSet::new();
    for p in &pool {
        if picked.len() < k && kinds.insert(p.category_path.last()) {
            picked.push(p);
        }
    }
    for p in &pool {
        if picked.len() == k {
            break;
        }
        if !picked.iter().any(|q| q.product_id == p.product_id) {
            picked.push(p);
        }
    }
    Ok(picked)
}

/// One item as it should be described to the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ItemBrief {
    pub kind: String,
    pub brand: Option<String>,
    pub features: BTreeMap<String, String>,
    pub services: BTreeSet<Service>,
    /// Rendered as "priced above X".
    pub price_above: Option<i64>,
}

impl ItemBrief {
    pub fn new(record: &FieldRecord, target: &TargetSpec, with_brand: bool) -> ItemBrief {
        ItemBrief {
            kind: record.kind.clone(),
            brand: if with_brand { record.brand.clone() } else { None },
            features: target.required_features.clone(),
            services: target.required_services.clone(),
            price_above: Some(target.price_min.floor_units()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RenderRequest {
    pub intent: IntentKind,
    pub items: Vec<ItemBrief>,
    pub question: Option<String>,
    pub voucher: Option<VoucherRule>,
    pub budget: Option<Money>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub raw_response: Option<String>,
}

pub trait InstructionRenderer: Send + Sync {
    fn render(&self, request: &RenderRequest, seed: u64) -> Result<Rendered, TaskgenError>;
}

fn join_list(parts: &[String]) -> String {
    match parts {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn describe_item(item: &ItemBrief, kind_override: Option<&str>) -> String {
    let mut s = kind_override.map(str::to_owned).unwrap_or_else(|| item.kind.clone());
    if let Some(brand) = &item.brand {
        s.push_str(&format!(" from the brand {brand}"));
    }
    if !item.features.is_empty() {
        let feats: Vec<String> = item.features.iter().map(|(k, v)| format!("{k} {v}")).collect();
        s.push_str(&format!(" with {}", join_list(&feats)));
    }
    if !item.services.is_empty() {
        let svcs: Vec<String> = item.services.iter().map(|x| x.phrase().to_owned()).collect();
        s.push_str(&format!(", offering {}", join_list(&svcs)));
    }
    if let Some(p) = item.price_above {
        s.push_str(&format!(", priced above {p} PHP"));
    }
    s
}

fn enumerate_items(items: &[ItemBrief]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| format!("({}) {}", i + 1, describe_item(it, None)))
        .collect::<Vec<_>>()
        .join("; ")
}

const FINDING_TEMPLATES: &[&str] = &[
    "Show me {item}.",
    "I'm looking for {item}.",
    "Please find {item}.",
    "Help me find {item}.",
    "My friend asked me to buy {item}. Find it for me.",
    "Search the store for {item}.",
];

const KNOWLEDGE_TEMPLATES: &[&str] = &[
    "{question} Find me {item}.",
    "{question} Based on the answer, I want to buy {item}.",
    "I am curious about something. {question} Please recommend {item}.",
    "{question} Once you know, help me purchase {item}.",
    "{question} I would like {item}.",
];

const SELLER_TEMPLATES: &[&str] = &[
    "I'm looking for a shop that sells all of the following: {items}. All items must come from the same shop.",
    "Find one store where I can buy {items}. Everything has to be from the same shop.",
    "I want to order these from a single seller: {items}. Please make sure they are in the same shop.",
    "Help me find {count} products sold by the same shop: {items}.",
    "Please recommend {items}. All of them should be purchased from the same shop.",
];

const VOUCHER_TEMPLATES: &[&str] = &[
    "I want to buy {items}. My budget is only {budget} PHP, but I have a voucher with the following rules: {rules}",
    "Please help me buy {items}. I can spend at most {budget} PHP and I hold a voucher: {rules}",
    "I need {items}. My budget is {budget} PHP. Voucher rules: {rules}",
    "Find {items} for me. I do not want to pay more than {budget} PHP, and I can use a voucher with these rules: {rules}",
    "Shopping list: {items}. The total I can afford is {budget} PHP. I also have a voucher. {rules}",
];

fn voucher_rules(rule: &VoucherRule) -> String {
    format!(
        "1. The voucher only applies to the products from the same shop. \
         2. It is valid only when the total price of the products exceeds {} PHP. \
         3. It provides a fixed discount of {} PHP.",
        rule.min_total.to_compact(),
        rule.discount.to_compact()
    )
}

/// Built-in template bank; deterministic under seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateRenderer;

impl InstructionRenderer for TemplateRenderer {
    fn render(&self, req: &RenderRequest, seed: u64) -> Result<Rendered, TaskgenError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = req.items.first().ok_or_else(|| TaskgenError::RendererFailure("no items".into()))?;
        let text = match req.intent {
            IntentKind::ProductFinding => {
                FINDING_TEMPLATES.choose(&mut rng).unwrap().replace("{item}", &describe_item(first, None))
            }
            IntentKind::KnowledgeReasoning => {
                let question = req
                    .question
                    .as_deref()
                    .ok_or_else(|| TaskgenError::RendererFailure("knowledge task without question".into()))?;
                let kind = format!("a {} on that subject", first.kind);
                KNOWLEDGE_TEMPLATES
                    .choose(&mut rng)
                    .unwrap()
                    .replace("{question}", question)
                    .replace("{item}", &describe_item(first, Some(&kind)))
            }
            IntentKind::MultiProductsSeller => SELLER_TEMPLATES
                .choose(&mut rng)
                .unwrap()
                .replace("{count}", &req.items.len().to_string())
                .replace("{items}", &enumerate_items(&req.items)),
            IntentKind::VoucherBudget => {
                let (Some(rule), Some(budget)) = (req.voucher, req.budget) else {
                    return Err(TaskgenError::RendererFailure("voucher task without rule or budget".into()));
                };
                VOUCHER_TEMPLATES
                    .choose(&mut rng)
                    .unwrap()
                    .replace("{items}", &enumerate_items(&req.items))
                    .replace("{budget}", &budget.to_compact())
                    .replace("{rules}", &voucher_rules(&rule))
            }
        };
        Ok(Rendered { text, raw_response: None })
    }
}

/// Chat-completion client that asks a remote model to phrase the request.
#[derive(Debug, Clone)]
pub struct RemoteRenderer {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl RemoteRenderer {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        RemoteRenderer { endpoint: endpoint.into(), api_key, model: model.into(), timeout: Duration::from_secs(60) }
    }

    pub fn prompt(req: &RenderRequest) -> Value {
        json!({
            "instructions": "Write one realistic shopper request in English. Mention every listed feature, \
                             service and price phrase; for several items, say they must come from the same shop; \
                             for vouchers, state the budget and all three rule numbers verbatim. Never invent \
                             identifiers. Reply with the request text only.",
            "request": req,
        })
    }
}

impl InstructionRenderer for RemoteRenderer {
    fn render(&self, req: &RenderRequest, seed: u64) -> Result<Rendered, TaskgenError> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let body = json!({
            "model": self.model,
            "seed": seed,
            "messages": [
                {"role": "system", "content": "You simulate online shoppers."},
                {"role": "user", "content": RemoteRenderer::prompt(req).to_string()},
            ],
        });
        let mut call = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: Value = call
            .send_json(body)
            .map_err(|e| TaskgenError::RendererFailure(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| TaskgenError::RendererFailure(e.to_string()))?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| TaskgenError::RendererFailure("response has no message content".into()))?
            .to_owned();
        if let (Some(rule), Some(budget)) = (req.voucher, req.budget) {
            for n in [budget.to_compact(), rule.min_total.to_compact(), rule.discount.to_compact()] {
                if !text.contains(&n) {
                    return Err(TaskgenError::RendererFailure(format!("rendered text omits {n}")));
                }
            }
        }
        Ok(Rendered { raw_response: Some(reply.to_string()), text })
    }
}

/// The budget interval that makes the voucher necessary:
/// `[raw - discount, raw - 0.01]`.
pub fn budget_interval(raw_total: Money, discount: Money) -> (Money, Money) {
    (raw_total - discount, raw_total - Money::from_cents(1))
}

/// A budget inside [`budget_interval`], preferring whole units.
pub fn draw_budget(raw_total: Money, discount: Money, rng: &mut ChaCha8Rng) -> Money {
    let (lo, hi) = budget_interval(raw_total, discount);
    let (ulo, uhi) = (lo.ceil_units(), hi.floor_units());
    if ulo <= uhi {
        Money::from_units(rng.random_range(ulo..=uhi))
    } else {
        Money::from_cents(rng.random_range(lo.cents()..=hi.cents()))
    }
}

/// True when the rule can be triggered by a basket worth `raw_total`.
pub fn rule_admissible(raw_total: Money, rule: &VoucherRule) -> bool {
    Money::ZERO < rule.discount && rule.discount < rule.min_total && rule.min_total <= raw_total
}

/// Resample whole-unit rules until one satisfies `discount < min_total ≤ raw`.
pub fn synthesize_rule(raw_total: Money, rng: &mut ChaCha8Rng) -> Option<VoucherRule> {
    let raw_units = raw_total.floor_units();
    if raw_units < 2 {
        return None;
    }
    for _ in 0..64 {
        let min_units = rng.random_range((raw_units * 7 / 10).max(2)..=raw_units);
        let d_lo = (raw_units / 20).max(1);
        let d_hi = (raw_units / 5).max(d_lo);
        let discount_units = rng.random_range(d_lo..=d_hi);
        if let Some(rule) = VoucherRule::new(Money::from_units(min_units), Money::from_units(discount_units)) {
            if rule_admissible(raw_total, &rule) {
                return Some(rule);
            }
        }
    }
    None
}

fn brand_coin(rng: &mut ChaCha8Rng) -> bool {
    rng.random_bool(0.5)
}

fn targets_for(products: &[&Product], rng: &mut ChaCha8Rng) -> (Vec<TargetSpec>, Vec<ItemBrief>) {
    let mut targets = Vec::new();
    let mut items = Vec::new();
    for p in products {
        let rec = extract_fields(p);
        let target = draw_target(&rec, rng);
        items.push(ItemBrief::new(&rec, &target, brand_coin(rng)));
        targets.push(target);
    }
    (targets, items)
}

fn finish(
    task_id: String,
    intent: IntentKind,
    seed: u64,
    request: RenderRequest,
    targets: Vec<TargetSpec>,
    renderer: &dyn InstructionRenderer,
) -> Result<Task, TaskgenError> {
    let rendered = renderer.render(&request, seed ^ 0x5eed)?;
    Ok(Task {
        task_id,
        intent,
        instruction: rendered.text,
        targets,
        knowledge_attribute: None,
        voucher: request.voucher,
        budget: request.budget,
        seed,
        certificate: None,
        renderer_response: rendered.raw_response,
    })
}

/// Single-product or same-shop task without a voucher.
pub fn gen_plain_task(
    catalog: &Catalog,
    intent: IntentKind,
    count: usize,
    stratum: Option<&str>,
    task_id: String,
    seed: u64,
    renderer: &dyn InstructionRenderer,
) -> Result<Task, TaskgenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let products = sample_products(catalog, intent, count, stratum, &mut rng)?;
    let (targets, items) = targets_for(&products, &mut rng);
    let request = RenderRequest { intent, items, question: None, voucher: None, budget: None };
    finish(task_id, intent, seed, request, targets, renderer)
}

pub fn gen_voucher_task(
    catalog: &Catalog,
    count: usize,
    task_id: String,
    seed: u64,
    renderer: &dyn InstructionRenderer,
) -> Result<Task, TaskgenError> {
    let intent = IntentKind::VoucherBudget;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..16 {
        let products = sample_products(catalog, intent, count, None, &mut rng)?;
        let raw: Money = products.iter().map(|p| p.price).sum();
        let Some(rule) = synthesize_rule(raw, &mut rng) else { continue };
        let budget = draw_budget(raw, rule.discount, &mut rng);
        let (budget_lo, budget_hi) = budget_interval(raw, rule.discount);
        let (targets, items) = targets_for(&products, &mut rng);
        let request = RenderRequest { intent, items, question: None, voucher: Some(rule), budget: Some(budget) };
        let mut task = finish(task_id, intent, seed, request, targets, renderer)?;
        task.certificate =
            Some(VoucherCertificate { raw_total: raw, final_total: raw - rule.discount, budget_lo, budget_hi });
        return Ok(task);
    }
    Err(TaskgenError::InsufficientInventory { intent, requirement: "no basket admits a voucher rule".into() })
}

pub fn gen_knowledge_task(
    catalog: &Catalog,
    facts: &FactStore,
    task_id: String,
    seed: u64,
    renderer: &dyn InstructionRenderer,
) -> Result<Task, TaskgenError> {
    let intent = IntentKind::KnowledgeReasoning;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fact = facts.facts().choose(&mut rng).ok_or(TaskgenError::EmptyFactStore)?;
    let id = fact.product_ids.choose(&mut rng).expect("validated non-empty");
    let product = catalog
        .find(id)
        .ok_or_else(|| TaskgenError::UnlinkedFact { line: 0, reason: format!("unknown product {id}") })?;
    let (targets, items) = targets_for(&[product], &mut rng);
    let request =
        RenderRequest { intent, items, question: Some(fact.question.clone()), voucher: None, budget: None };
    let mut task = finish(task_id, intent, seed, request, targets, renderer)?;
    task.knowledge_attribute = Some(fact.answer.clone());
    Ok(task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub counts: BTreeMap<IntentKind, usize>,
    pub seed: u64,
    pub seller_counts: CountDistribution,
    pub voucher_counts: CountDistribution,
}

impl SuiteConfig {
    pub fn uniform(per_intent: usize, seed: u64) -> SuiteConfig {
        SuiteConfig {
            counts: IntentKind::ALL.into_iter().map(|k| (k, per_intent)).collect(),
            seed,
            seller_counts: CountDistribution::seller_default(),
            voucher_counts: CountDistribution::voucher_default(),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-task seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_suite(
    catalog: &Catalog,
    facts: Option<&FactStore>,
    config: &SuiteConfig,
    renderer: &dyn InstructionRenderer,
) -> Result<Vec<Task>, TaskgenError> {
    let mut tasks = Vec::new();
    for (intent, &n) in &config.counts {
        let schedule = stratum_schedule(catalog, mix_seed(config.seed, *intent as u64), n);
        for i in 0..n {
            let seed = mix_seed(config.seed, ((*intent as u64) << 32) | i as u64);
            let id = format!("{}-{}-{:04}", intent.code(), config.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let task = match intent {
                IntentKind::ProductFinding => {
                    gen_plain_task(catalog, *intent, 1, schedule.get(i).map(String::as_str), id, seed, renderer)?
                }
                IntentKind::MultiProductsSeller => {
                    let k = config.seller_counts.draw(&mut rng);
                    gen_plain_task(catalog, *intent, k, None, id, seed, renderer)?
                }
                IntentKind::VoucherBudget => {
                    let k = config.voucher_counts.draw(&mut rng);
                    gen_voucher_task(catalog, k, id, seed, renderer)?
                }
                IntentKind::KnowledgeReasoning => {
                    let store = facts.filter(|f| !f.is_empty()).ok_or(TaskgenError::EmptyFactStore)?;
                    gen_knowledge_task(catalog, store, id, seed, renderer)?
                }
            };
            task.validate(catalog)?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

pub fn write_tasks(path: impl AsRef<Path>, tasks: &[Task]) -> Result<(), TaskgenError> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("task serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<Task>, TaskgenError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TaskgenError::Format { line: i + 1, reason: e.to_string() }))
        .collect()
}
