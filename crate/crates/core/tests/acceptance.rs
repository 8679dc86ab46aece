//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::time::{Duration, Instant};

use common::World;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use shopsandbox_core::agents::{
    load_trajectories, replay, run_episode, score_trajectory, write_trajectories, GreedyPolicy, OraclePolicy, Trajectory,
};
use shopsandbox_core::analysis::{correlation_report, pearson, FactorRow, FactorVector};
use shopsandbox_core::catalog::Shop;
use shopsandbox_core::distill::{export_training_file, reject_sample, render_call, segment_sft, tool_reward, RewardWeights, SegmentOptions};
use shopsandbox_core::metrics::{aggregate, budget_score, knowledge_score, product_relevance, shop_score, weighted_average, MetricsConfig};
use shopsandbox_core::sandbox::ToolCall;
use shopsandbox_core::search::{product_tokens, Bm25Params, FieldWeights, PriceBand, ProductIndex, SearchQuery, SortKey, PAGE_SIZE};
use shopsandbox_core::synth::SynthConfig;
use shopsandbox_core::taskgen::{IntentKind, SuiteConfig, TargetSpec};
use shopsandbox_core::text::{count_tokens, tokenize};
use shopsandbox_core::{apply_voucher, Money, Product, Service, VoucherRule};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail.into())
    }
}

fn product(id: &str, shop: &str, title: &str, price: &str, features: &[(&str, &str)]) -> Product {
    Product {
        product_id: id.into(),
        title: title.into(),
        price: price.parse().unwrap(),
        shop_id: shop.into(),
        shop_name: format!("Shop {shop}"),
        category_path: vec!["fashion".into()],
        brand: None,
        features: features.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        services: BTreeSet::from([Service::Cod]),
        description: None,
    }
}

fn table_aggregation() -> Outcome {
    let counts = [250usize, 150, 250, 250];
    let rows: [(&str, [f64; 4], f64); 3] = [
        ("GPT-4.1", [59.6, 62.0, 46.4, 30.4], 48.2),
        ("DeepSeek-R1", [53.2, 44.0, 37.2, 24.4], 39.2),
        ("Qwen3-4B", [36.4, 18.7, 8.8, 8.4], 18.0),
    ];
    let start = Instant::now();
    let mut parts = Vec::new();
    for (name, asr, published) in rows {
        let pairs: Vec<(f64, usize)> = asr.iter().copied().zip(counts).collect();
        let avg = weighted_average(&pairs);
        check((avg - published).abs() <= 0.05, format!("{name}: {avg:.4} vs {published}"))?;
        parts.push(format!("{name} {avg:.2}"));
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(parts.join(", "))
}

fn voucher_settlement() -> Outcome {
    let prices: Vec<Money> = ["576.72", "599.00", "750.00", "799.00"].iter().map(|p| p.parse().unwrap()).collect();
    let rule = VoucherRule::new(Money::from_units(2368), Money::from_units(392)).ok_or("rule rejected")?;
    let same = apply_voucher(&prices, &["2976842"; 4], Some(&rule)).map_err(|e| e.to_string())?;
    check(same.final_total.to_string() == "2332.72", format!("same-shop settled to {}", same.final_total))?;
    let shops = ["2976842", "2976842", "2976842", "5770895"];
    let mixed = apply_voucher(&prices, &shops, Some(&rule)).map_err(|e| e.to_string())?;
    check(mixed.final_total.to_string() == "2724.72", format!("mixed-shop settled to {}", mixed.final_total))?;
    let basket: Vec<Product> = prices
        .iter()
        .zip(shops)
        .enumerate()
        .map(|(i, (p, s))| product(&format!("p{i}"), s, "x", &p.to_string(), &[]))
        .collect();
    let score = budget_score(&basket.iter().collect::<Vec<_>>(), Some(&rule), Money::from_units(2601));
    check(score == 0, format!("budget score {score}"))?;
    Ok(format!("{} / {} / budget_score {}", same.final_total, mixed.final_total, score))
}

fn metric_edge_cases() -> Outcome {
    let maths = product("1", "s", "General mathematics/statistics and probability/General Biology", "300", &[]);
    let physics = product("2", "s", "General physics 12", "300", &[]);
    let ke = (knowledge_score(Some(&maths), "physics"), knowledge_score(Some(&physics), "physics"));
    check(ke == (0, 1), format!("#KE scores {ke:?}"))?;

    let basket: Vec<Product> = (0..4).map(|i| product(&format!("p{i}"), "2976842", "x", "100", &[])).collect();
    let refs: Vec<&Product> = basket.iter().collect();
    let pm = shop_score(&refs[..3], 4);
    check(pm == 0, format!("#PM shop score {pm}"))?;

    let target = product("t", "s", "Baggy Jeans", "500", &[("waist type", "high")]);
    let pred = product("p", "s", "Baggy Jeans", "500", &[("waist type", "high waist")]);
    let spec = TargetSpec {
        product_id: "t".into(),
        price_min: Money::from_units(450),
        price_max: Money::from_units(550),
        required_features: target.features.clone(),
        required_services: BTreeSet::new(),
    };
    let r = product_relevance(&pred, &spec, &target.title, &MetricsConfig::default());
    check(r.numerator == 2 && r.denominator == 3, format!("#MI relevance {}/{}", r.numerator, r.denominator))?;
    Ok(format!("#KE {ke:?}, #PM {pm}, #MI {}/{}", r.numerator, r.denominator))
}

fn oracle_run(world: &World, config: &SuiteConfig) -> Vec<Trajectory> {
    world
        .suite(config)
        .iter()
        .map(|t| {
            let mut traj = run_episode(&mut OraclePolicy::new(t, &world.catalog), &world.env, t);
            score_trajectory(&mut traj, t, &world.catalog, &MetricsConfig::default()).unwrap();
            traj
        })
        .collect()
}

fn oracle_solvability(world: &World) -> Outcome {
    let start = Instant::now();
    let trajs = oracle_run(world, &SuiteConfig::uniform(60, 2024));
    let elapsed = start.elapsed();
    let results: Vec<_> = trajs.iter().filter_map(|t| t.scores.clone()).collect();
    check(results.len() >= 200, format!("only {} tasks", results.len()))?;
    let report = aggregate(&results);
    check(report.empty_intents.is_empty(), format!("missing intents {:?}", report.empty_intents))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.success).map(|r| r.task_id.as_str()).collect();
    check(failed.is_empty(), format!("unsolved: {failed:?}"))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{} tasks, ASR {:.1}% in {:.2?}", results.len(), report.weighted_asr, elapsed))
}

/// Independent scan: recount every document's terms, score from first
/// principles, filter, sort, slice.
fn brute_force(products: &[Product], docs: &[Vec<String>], query: &SearchQuery) -> (Vec<String>, usize) {
    let terms = tokenize(&query.q);
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.len() as u64).sum::<u64>() as f64 / n;
    let (k1, b) = (0.9, 0.4);
    let idf = |t: &str| {
        let df = docs.iter().filter(|d| d.iter().any(|x| x == t)).count() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    };
    let idfs: Vec<f64> = terms.iter().map(|t| idf(t)).collect();
    let mut hits: Vec<(usize, f64)> = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        if !query.matches_filters(&products[i]) {
            continue;
        }
        let mut score = 0.0;
        let mut matched = false;
        for (t, idf) in terms.iter().zip(&idfs) {
            let tf = doc.iter().filter(|x| *x == t).count();
            if tf > 0 {
                matched = true;
                let tf = tf as f64;
                let norm = 1.0 - b + b * doc.len() as f64 / avg;
                score += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        if matched || terms.is_empty() {
            hits.push((i, score));
        }
    }
    hits.sort_by(|&(x, sx), &(y, sy)| {
        let (px, py) = (&products[x], &products[y]);
        let primary = match query.sort {
            SortKey::Relevance => sy.total_cmp(&sx),
            SortKey::PriceAsc => px.price.cmp(&py.price),
            SortKey::PriceDesc => py.price.cmp(&px.price),
        };
        primary.then_with(|| px.product_id.cmp(&py.product_id))
    });
    let ids = hits.iter().skip((query.page - 1) * PAGE_SIZE).take(PAGE_SIZE).map(|&(i, _)| products[i].product_id.clone()).collect();
    (ids, hits.len())
}

fn search_equivalence() -> Outcome {
    let world = World::new(SynthConfig { products: 5000, shops: 200, facts: 10, seed: 99 });
    let products = world.catalog.products();
    let index = ProductIndex::build(&world.catalog, FieldWeights::default(), Bm25Params::default()).map_err(|e| e.to_string())?;
    let docs: Vec<Vec<String>> = products.iter().map(|p| product_tokens(p, FieldWeights::default())).collect();
    let shops: Vec<&Shop> = world.catalog.shops().values().collect::<Vec<_>>();
    let shop_ids: Vec<String> = shops.iter().map(|s| s.shop_id.clone()).collect();
    let vocab: Vec<String> = docs.iter().take(400).flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut total_hits = 0usize;
    for i in 0..500 {
        let n_terms = rng.random_range(0..4);
        let mut words: Vec<String> = (0..n_terms).map(|_| vocab.choose(&mut rng).unwrap().clone()).collect();
        if rng.random_bool(0.1) {
            words.push("zzqnotaword".into());
        }
        let mut q = SearchQuery::new(words.join(" "));
        q.page = *[1usize, 1, 1, 2, 3, 50].choose(&mut rng).unwrap();
        q.sort = *[SortKey::Relevance, SortKey::Relevance, SortKey::PriceAsc, SortKey::PriceDesc].choose(&mut rng).unwrap();
        if rng.random_bool(0.3) {
            q.services = Service::ALL.iter().copied().filter(|_| rng.random_bool(0.4)).collect();
        }
        if rng.random_bool(0.3) {
            let lo = rng.random_range(0..800);
            let hi = lo + rng.random_range(0..2000);
            let min = rng.random_bool(0.8).then(|| Money::from_units(lo));
            let max = rng.random_bool(0.6).then(|| Money::from_units(hi));
            q.price = PriceBand::new(min, max).ok();
        }
        if rng.random_bool(0.15) {
            q.shop_id = Some(shop_ids.choose(&mut rng).unwrap().clone());
        }
        let page = index.search(&world.catalog, &q).map_err(|e| e.to_string())?;
        let got: Vec<String> = page.items.iter().map(|it| it.product_id.clone()).collect();
        let (want, hits) = brute_force(products, &docs, &q);
        check(got == want && page.total_hits == hits, format!("query #{i} {q:?}: {got:?} ({}) vs {want:?} ({hits})", page.total_hits))?;
        total_hits += hits;
    }
    Ok(format!("500 queries over {} products, {} total hits", products.len(), total_hits))
}

fn web_search_ablation(world: &World) -> Outcome {
    let mut config = SuiteConfig::uniform(0, 77);
    config.counts.insert(IntentKind::KnowledgeReasoning, 50);
    let tasks = world.suite(&config);
    let blind = world.without_web();
    let mean_kw = |env: &shopsandbox_core::sandbox::Environment| {
        let total: u32 = tasks
            .iter()
            .map(|t| {
                let mut traj = run_episode(&mut GreedyPolicy::new(), env, t);
                score_trajectory(&mut traj, t, &world.catalog, &MetricsConfig::default()).unwrap();
                u32::from(traj.scores.unwrap().scores.r_kw.unwrap_or(0))
            })
            .sum();
        f64::from(total) / tasks.len() as f64
    };
    let with = mean_kw(&world.env);
    let without = mean_kw(&blind);
    check(with > without, format!("S_kw {with:.3} with web vs {without:.3} without"))?;
    Ok(format!("{} tasks, S_kw {with:.2} with fixture backend vs {without:.2} disabled", tasks.len()))
}

fn distillation_round_trip(world: &World) -> Outcome {
    let trajs = oracle_run(world, &SuiteConfig::uniform(10, 5));
    let (kept, ledger) = reject_sample(&trajs).map_err(|e| e.to_string())?;
    check(kept.len() == trajs.len(), format!("retained {} of {}", ledger.retained, ledger.seen))?;
    let samples: Vec<_> = kept.iter().flat_map(|t| segment_sft(t, SegmentOptions::default())).collect();
    let steps: usize = kept.iter().map(|t| t.steps.len()).sum();
    check(samples.len() == steps, format!("{} samples for {steps} steps", samples.len()))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("train.jsonl");
    let manifest = export_training_file(&samples, &path).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let (mut tin, mut tout, mut lines) = (0, 0, 0);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        tin += count_tokens(v["input"].as_str().unwrap_or_default());
        tout += count_tokens(v["output"].as_str().unwrap_or_default());
        lines += 1;
    }
    check(
        (lines, tin, tout) == (manifest.samples, manifest.input_tokens, manifest.output_tokens),
        format!("manifest {manifest:?} vs recount ({lines}, {tin}, {tout})"),
    )?;

    let target = ToolCall::new("find_product", json!({"q": "cotton yarn", "page": 2, "service": "COD"}));
    let identity = tool_reward(&render_call(&target), &target, RewardWeights::default()).total;
    check((identity - 2.0).abs() < 1e-9, format!("identity reward {identity}"))?;
    let pred = ToolCall::new("find_product", json!({"q": "cotton yarn", "page": 1}));
    let partial = tool_reward(&render_call(&pred), &target, RewardWeights::default()).total;
    check((partial - (1.0 + 2.3 / 3.0)).abs() < 1e-9, format!("partial reward {partial}"))?;
    Ok(format!(
        "{} trajectories, {} samples, {}+{} tokens, rewards {identity:.4}/{partial:.4}",
        kept.len(),
        manifest.samples,
        manifest.input_tokens,
        manifest.output_tokens
    ))
}

fn replay_determinism(world: &World) -> Outcome {
    let trajs = oracle_run(world, &SuiteConfig::uniform(25, 404));
    check(trajs.len() >= 100, format!("only {} episodes", trajs.len()))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("runs.jsonl");
    write_trajectories(&path, &trajs).map_err(|e| e.to_string())?;
    let loaded = load_trajectories(&path).map_err(|e| e.to_string())?;
    let tasks = world.suite(&SuiteConfig::uniform(25, 404));
    for (traj, task) in loaded.iter().zip(&tasks) {
        let rep = replay(&world.env, traj);
        check(rep.first_divergence.is_none(), format!("{} diverges at step {:?}", traj.trajectory_id, rep.first_divergence))?;
        let mut rescored = traj.clone();
        score_trajectory(&mut rescored, task, &world.catalog, &MetricsConfig::default()).map_err(|e| e.to_string())?;
        let a = serde_json::to_string(&traj.scores).unwrap();
        let b = serde_json::to_string(&rescored.scores).unwrap();
        check(a == b, format!("{} scores differ", traj.trajectory_id))?;
    }
    Ok(format!("{} episodes replayed", loaded.len()))
}

fn two_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn analysis_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..200);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let slope = rng.random_range(-2.0..2.0);
        let y: Vec<f64> = x.iter().map(|v| slope * v + rng.random_range(-50.0..50.0)).collect();
        let r = pearson(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((r - two_pass(&x, &y)).abs());
    }
    check(worst < 1e-12, format!("max deviation {worst:e}"))?;

    let rows: Vec<FactorRow> = (0..30)
        .map(|i| {
            let views = usize::from(i % 3 != 0);
            FactorRow {
                trajectory_id: format!("t{i}"),
                intent: IntentKind::ProductFinding,
                factors: FactorVector { views, steps: 4 + i % 5, ..FactorVector::default() },
                success: views >= 1,
            }
        })
        .collect();
    let report = correlation_report(&rows);
    let r = report.buckets["all"]["views"].r.ok_or("views bucket degenerate")?;
    check((r - 1.0).abs() < 1e-12, format!("views r = {r}"))?;
    Ok(format!("max |Δ| {worst:.1e} over 1000 vectors; views fixture r = {r:.6}"))
}

fn main() {
    let world = World::small();
    let criteria: Vec<Criterion> = vec![
        ("table aggregation", Box::new(table_aggregation)),
        ("voucher settlement", Box::new(voucher_settlement)),
        ("metric edge cases", Box::new(metric_edge_cases)),
        ("oracle solvability", Box::new(|| oracle_solvability(&world))),
        ("search oracle equivalence", Box::new(search_equivalence)),
        ("web search ablation", Box::new(|| web_search_ablation(&world))),
        ("distillation round trip", Box::new(|| distillation_round_trip(&world))),
        ("replay determinism", Box::new(|| replay_determinism(&world))),
        ("analysis", Box::new(analysis_checks)),
    ];
    let mut failures = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
