use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use shopsandbox_core::agents::{run_episode, Decision, OraclePolicy, Policy};
use shopsandbox_core::knowledge::FixtureStore;
use shopsandbox_core::sandbox::{EnvConfig, Environment, Observation, StepRecord, ToolCall};
use shopsandbox_core::search::{Bm25Params, FieldWeights, ProductIndex};
use shopsandbox_core::synth::{generate, SynthConfig};
use shopsandbox_core::taskgen::{generate_suite, FactStore, SuiteConfig, Task, TemplateRenderer};
use shopsandbox_core::Catalog;
use shopsandbox_server::{router, AppState};
use tower::ServiceExt;

fn fixture(idle: Duration) -> (Router, Arc<AppState>, Environment, Vec<Task>) {
    let corpus = generate(SynthConfig { products: 600, shops: 40, facts: 20, seed: 3 });
    let catalog = Arc::new(Catalog::from_products(corpus.products.clone()).unwrap());
    let index = Arc::new(ProductIndex::build(&catalog, FieldWeights::default(), Bm25Params::default()).unwrap());
    let facts = FactStore::new(corpus.facts.clone(), &catalog).unwrap();
    let env = Environment::new(catalog.clone(), index, Arc::new(FixtureStore::new(corpus.snippets)), EnvConfig::default());
    let tasks = generate_suite(&catalog, Some(&facts), &SuiteConfig::uniform(3, 8), &TemplateRenderer).unwrap();
    let state = Arc::new(AppState::new(env.clone(), tasks.clone(), idle));
    (router(state.clone()), state, env, tasks)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn open(app: &Router, task_id: &str) -> String {
    let (status, body) = call(app, "POST", "/v1/sessions", Some(json!({ "task_id": task_id }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_owned()
}

async fn act(app: &Router, sid: &str, name: &str, params: Value) -> (StatusCode, Value) {
    call(app, "POST", &format!("/v1/sessions/{sid}/actions"), Some(json!({ "name": name, "params": params }))).await
}

#[tokio::test]
async fn search_returns_a_page_of_at_most_ten() {
    let (app, _, _, tasks) = fixture(Duration::from_secs(1800));
    let sid = open(&app, &tasks[0].task_id).await;
    assert_eq!(sid.len(), 32);
    let (status, body) = act(&app, &sid, "find_product", json!({ "q": "cotton" })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["step_index"], 1);
    assert_eq!(body["status"], "running");
    let items = body["observation"]["payload"]["items"].as_array().unwrap();
    assert!(!items.is_empty() && items.len() <= 10);
}

#[tokio::test]
async fn evaluate_requires_a_terminal_episode() {
    let (app, _, _, tasks) = fixture(Duration::from_secs(1800));
    let sid = open(&app, &tasks[0].task_id).await;
    let (status, body) = call(&app, "POST", &format!("/v1/sessions/{sid}/evaluate"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "EpisodeRunning");

    act(&app, &sid, "terminate", json!({ "status": "failure" })).await;
    let (status, body) = call(&app, "POST", &format!("/v1/sessions/{sid}/evaluate"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["success"], 0);

    let (status, body) = act(&app, &sid, "find_product", json!({ "q": "x" })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "EpisodeFinished");
}

#[tokio::test]
async fn error_classes() {
    let (app, _, _, tasks) = fixture(Duration::from_secs(1800));
    let (status, body) = act(&app, "0000", "find_product", json!({})).await;
    assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownSession")));

    let (status, body) = call(&app, "POST", "/v1/sessions", Some(json!({ "task": "x" }))).await;
    assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("InvalidParams")));
    let (status, _) = call(&app, "POST", "/v1/sessions", Some(json!({ "task_id": "nope" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let sid = open(&app, &tasks[0].task_id).await;
    let (status, body) = call(&app, "POST", &format!("/v1/sessions/{sid}/actions"), Some(json!([1, 2]))).await;
    assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("InvalidParams")));

    // Tool-level problems are observations, and still consume a step.
    let (status, body) = act(&app, &sid, "buy_now", json!({})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["observation"]["payload"]["error"]["code"], "UnknownTool");
    assert_eq!(body["step_index"], 1);
}

fn hidden_keys() -> BTreeSet<&'static str> {
    ["targets", "price_min", "price_max", "required_features", "required_services", "knowledge_attribute", "certificate", "budget", "voucher", "renderer_response", "seed"]
        .into_iter()
        .collect()
}

fn scan_keys(v: &Value, found: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                if hidden_keys().contains(k.as_str()) {
                    found.push(k.clone());
                }
                scan_keys(child, found);
            }
        }
        Value::Array(a) => a.iter().for_each(|c| scan_keys(c, found)),
        _ => {}
    }
}

#[tokio::test]
async fn agent_facing_responses_are_redacted() {
    let (app, _, _, tasks) = fixture(Duration::from_secs(1800));
    let (_, listing) = call(&app, "GET", "/v1/tasks", None).await;
    assert_eq!(listing["tasks"].as_array().unwrap().len(), tasks.len());
    for task in &tasks {
        let sid = open(&app, &task.task_id).await;
        let mut responses = vec![listing.clone()];
        let (_, created) = call(&app, "POST", "/v1/sessions", Some(json!({ "task_id": task.task_id }))).await;
        responses.push(created);
        responses.push(call(&app, "GET", &format!("/v1/sessions/{sid}"), None).await.1);
        let secrets: Vec<String> = task
            .targets
            .iter()
            .map(|t| t.product_id.clone())
            .chain(task.knowledge_attribute.clone())
            .collect();
        for r in &responses {
            let text = r.to_string().to_lowercase();
            for s in &secrets {
                assert!(!text.contains(&s.to_lowercase()), "{} leaks {s:?}: {text}", task.task_id);
            }
        }
        responses.push(act(&app, &sid, "find_product", json!({ "q": task.instruction })).await.1);
        responses.push(act(&app, &sid, "web_search", json!({ "q": task.instruction })).await.1);
        responses.push(call(&app, "GET", &format!("/v1/sessions/{sid}"), None).await.1);
        for r in &responses {
            let mut found = Vec::new();
            scan_keys(r, &mut found);
            assert!(found.is_empty(), "{}: hidden keys {found:?}", task.task_id);
        }
    }
}

#[tokio::test]
async fn oracle_over_http_matches_in_process_run() {
    let (app, _, env, tasks) = fixture(Duration::from_secs(1800));
    for task in &tasks {
        let sid = open(&app, &task.task_id).await;
        let mut policy = OraclePolicy::new(task, env.catalog());
        let view = task.agent_view();
        let mut history: Vec<StepRecord> = Vec::new();
        loop {
            let call_ = match policy.next(&view, &history).unwrap() {
                Decision::Act { call, .. } => call,
                Decision::Unparseable { raw, .. } => panic!("oracle emitted {raw}"),
            };
            let (status, body) = act(&app, &sid, &call_.name, Value::Object(call_.params.clone())).await;
            assert_eq!(status, StatusCode::OK);
            let observation: Observation = serde_json::from_value(body["observation"].clone()).unwrap();
            history.push(StepRecord { call: call_, observation });
            if body["status"] != "running" {
                break;
            }
        }
        let (status, eval) = call(&app, "POST", &format!("/v1/sessions/{sid}/evaluate"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(eval["success"], 1, "{}: {eval}", task.task_id);

        let local = run_episode(&mut OraclePolicy::new(task, env.catalog()), &env, task);
        let wire: Vec<(ToolCall, Observation)> = history.into_iter().map(|s| (s.call, s.observation)).collect();
        let here: Vec<(ToolCall, Observation)> = local.steps.into_iter().map(|s| (s.call, s.observation)).collect();
        assert_eq!(serde_json::to_string(&wire).unwrap(), serde_json::to_string(&here).unwrap());
    }
    let (_, report) = call(&app, "GET", "/v1/report", None).await;
    assert_eq!(report["total"], tasks.len());
    assert_eq!(report["weighted_asr"], 100.0);
}

#[tokio::test]
async fn idle_sessions_expire_as_aborted() {
    let (app, state, _, tasks) = fixture(Duration::from_secs(60));
    let sid = open(&app, &tasks[0].task_id).await;
    assert_eq!(state.sweep_expired(Instant::now()), 0);
    assert_eq!(state.sweep_expired(Instant::now() + Duration::from_secs(61)), 1);
    assert_eq!(state.session_count(), 0);
    let (status, _) = call(&app, "GET", &format!("/v1/sessions/{sid}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, report) = call(&app, "GET", "/v1/report", None).await;
    assert_eq!(report["total"], 1);
    assert_eq!(report["weighted_asr"], 0.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_to_one_session_serialize() {
    let (app, _, _, tasks) = fixture(Duration::from_secs(1800));
    let sid = open(&app, &tasks[0].task_id).await;
    let handles: Vec<_> = (0..20)
        .map(|i| {
            let app = app.clone();
            let sid = sid.clone();
            tokio::spawn(async move { act(&app, &sid, "find_product", json!({ "q": format!("item {i}") })).await })
        })
        .collect();
    let mut seen = BTreeSet::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        seen.insert(body["step_index"].as_u64().unwrap());
    }
    assert_eq!(seen, (1..=20).collect());
    let (_, state) = call(&app, "GET", &format!("/v1/sessions/{sid}"), None).await;
    assert_eq!(state["step_count"], 20);
}
