//! Deterministic synthetic corpus generator: catalog, knowledge facts and
//! web snippets, plus a sidecar ledger of what was generated.
//!
//! Every text fragment is assembled from lowercase alphanumeric vocabulary
//! words, so the ledger can count indexed tokens from the generator's own
//! bookkeeping rather than by re-tokenizing.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Product, Service};
use crate::knowledge::KnowledgeSnippet;
use crate::money::Money;
use crate::taskgen::KnowledgeFact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub products: usize,
    pub shops: usize,
    /// Number of knowledge facts (people) to generate.
    pub facts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { products: 2000, shops: 120, facts: 60, seed: 7 }
    }
}

/// Generator-side accounting, written next to the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub seed: u64,
    pub product_count: usize,
    pub shop_counts: BTreeMap<String, usize>,
    pub category_counts: BTreeMap<String, usize>,
    /// Indexed tokens per product under a title weight of 2.
    pub indexed_tokens: u64,
    pub fact_count: usize,
    pub snippet_count: usize,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub products: Vec<Product>,
    pub facts: Vec<KnowledgeFact>,
    pub snippets: Vec<KnowledgeSnippet>,
    pub ledger: Ledger,
}

struct CategorySpec {
    name: &'static str,
    sub: &'static str,
    nouns: &'static [&'static str],
    adjectives: &'static [&'static str],
    brands: &'static [&'static str],
    features: &'static [(&'static str, &'static [&'static str])],
    price: (i64, i64),
}

const CATEGORIES: &[CategorySpec] = &[
    CategorySpec {
        name: "fashion",
        sub: "clothing shoes",
        nouns: &["mens sandals", "womens jeans", "sneakers", "summer dress", "denim jacket", "pleated skirt"],
        adjectives: &["casual", "vintage", "classic", "lightweight", "retro", "breathable"],
        brands: &["skechers", "krooberg", "hush puppies", "levis", "urban river"],
        features: &[
            ("size", &["eu 30", "eu 32", "eu 38", "eu 40", "eu 43", "eu 44"]),
            ("color", &["black", "white", "brown", "twist", "navy blue", "beige"]),
            ("fit", &["baggy", "slim", "regular"]),
            ("pattern", &["plain", "striped", "floral", "checked"]),
            ("style", &["casual", "korean", "youth trend", "sporty"]),
            ("waist type", &["high", "mid", "low"]),
        ],
        price: (90, 2500),
    },
    CategorySpec {
        name: "pets",
        sub: "pet health",
        nouns: &["multivitamin for cats", "protein supplement for dogs", "bladder health supplement", "gold supplement for pets", "dental chews", "cat litter"],
        adjectives: &["natural", "premium", "organic", "advanced", "daily"],
        brands: &["k9 gold", "supervitamins", "cranbladder", "gold king", "petwell"],
        features: &[
            ("origin", &["usa", "japan", "germany", "korea"]),
            ("life stage", &["all life stages", "adult", "puppy", "senior"]),
            ("form", &["powder", "tablet", "liquid", "chewable"]),
            ("pet type", &["cat", "dog", "cat and dog"]),
            ("weight", &["250g", "500g", "1kg"]),
        ],
        price: (150, 1800),
    },
    CategorySpec {
        name: "crafts",
        sub: "knitting sewing",
        nouns: &["cotton yarn", "crochet hook", "paper yarn", "crochet yarn", "knitting needles", "embroidery thread"],
        adjectives: &["soft", "durable", "handmade", "premium", "natural"],
        brands: &["tulip", "midori", "moanayarn", "cotton field", "sewandstitch"],
        features: &[
            ("material", &["100 cotton", "paper", "steel", "bamboo", "acrylic"]),
            ("size", &["2.5mm", "3mm", "4mm", "5mm"]),
            ("color", &["natural", "ivory", "pastel pink", "sky blue", "charcoal"]),
            ("weight", &["lightweight", "80g", "100g"]),
            ("origin", &["korea", "japan", "turkey"]),
        ],
        price: (60, 1200),
    },
    CategorySpec {
        name: "books",
        sub: "education",
        nouns: &["textbook", "workbook", "study guide", "reference book"],
        adjectives: &["general", "complete", "illustrated", "essential"],
        brands: &["rex publishing", "vibal", "phoenix press", "anvil books"],
        features: &[
            ("language", &["english", "filipino", "bilingual"]),
            ("cover", &["paperback", "hardcover"]),
            ("level", &["senior high", "college", "grade 12", "grade 10"]),
            ("edition", &["first edition", "second edition", "revised edition"]),
        ],
        price: (120, 1500),
    },
    CategorySpec {
        name: "electronics",
        sub: "gadgets",
        nouns: &["wireless earbuds", "power bank", "phone case", "usb cable", "smart watch", "bluetooth speaker"],
        adjectives: &["portable", "fast charging", "waterproof", "compact", "rugged"],
        brands: &["xiaomi", "anker", "baseus", "realme", "soundcore"],
        features: &[
            ("capacity", &["10000mah", "20000mah", "5000mah"]),
            ("color", &["black", "white", "midnight green", "silver"]),
            ("connectivity", &["bluetooth 5.3", "usb c", "lightning"]),
            ("warranty", &["1 year", "6 months", "2 years"]),
        ],
        price: (99, 4500),
    },
    CategorySpec {
        name: "beauty",
        sub: "skin care",
        nouns: &["facial cleanser", "sunscreen", "lip tint", "moisturizer", "serum", "sheet mask"],
        adjectives: &["gentle", "hydrating", "brightening", "lightweight", "soothing"],
        brands: &["cosrx", "celeteque", "happy skin", "ponds", "innisfree"],
        features: &[
            ("skin type", &["oily", "dry", "combination", "sensitive"]),
            ("volume", &["50ml", "100ml", "150ml"]),
            ("origin", &["korea", "japan", "philippines"]),
            ("scent", &["unscented", "green tea", "rose"]),
        ],
        price: (80, 1600),
    },
    CategorySpec {
        name: "sports",
        sub: "outdoor fitness",
        nouns: &["yoga mat", "dumbbell set", "running shorts", "water bottle", "resistance band", "badminton racket"],
        adjectives: &["non slip", "heavy duty", "foldable", "ergonomic", "insulated"],
        brands: &["decathlon", "yonex", "hydro flask", "adidas", "everlast"],
        features: &[
            ("material", &["rubber", "stainless steel", "polyester", "carbon fiber"]),
            ("color", &["purple", "black", "teal", "orange"]),
            ("size", &["small", "medium", "large"]),
            ("weight", &["2kg", "5kg", "10kg"]),
        ],
        price: (120, 3500),
    },
    CategorySpec {
        name: "home",
        sub: "kitchen living",
        nouns: &["rice cooker", "frying pan", "storage box", "bed sheet", "table lamp", "electric fan"],
        adjectives: &["nonstick", "minimalist", "stackable", "energy saving", "cozy"],
        brands: &["hanabishi", "tefal", "iwata", "uratex", "imarflex"],
        features: &[
            ("material", &["ceramic", "aluminum", "cotton", "plastic"]),
            ("capacity", &["1 liter", "1.8 liters", "3 liters"]),
            ("color", &["white", "grey", "mint", "wood brown"]),
            ("size", &["single", "queen", "king"]),
        ],
        price: (150, 5000),
    },
    CategorySpec {
        name: "toys",
        sub: "kids games",
        nouns: &["building blocks", "plush toy", "puzzle set", "remote control car", "board game", "doll house"],
        adjectives: &["educational", "colorful", "safe", "creative", "classic"],
        brands: &["lego", "hasbro", "mattel", "playmobil", "melissa"],
        features: &[
            ("age", &["3 years", "6 years", "8 years", "12 years"]),
            ("pieces", &["100 pieces", "500 pieces", "1000 pieces"]),
            ("material", &["plastic", "wood", "fabric"]),
            ("battery", &["aa battery", "rechargeable", "none"]),
        ],
        price: (100, 3000),
    },
    CategorySpec {
        name: "groceries",
        sub: "food drinks",
        nouns: &["instant coffee", "dried mango", "green tea", "peanut butter", "oat milk", "dark chocolate"],
        adjectives: &["sugar free", "organic", "imported", "family pack", "premium"],
        brands: &["nescafe", "7d", "lipton", "skippy", "oatly"],
        features: &[
            ("flavor", &["original", "vanilla", "salted caramel", "mango"]),
            ("weight", &["200g", "500g", "1kg"]),
            ("origin", &["philippines", "thailand", "usa", "sweden"]),
            ("diet", &["vegan", "keto", "gluten free"]),
        ],
        price: (50, 900),
    },
];

/// Subjects available for knowledge facts; each gets its own books.
pub const SUBJECTS: &[&str] = &[
    "physics", "chemistry", "biology", "mathematics", "history", "economics",
    "geography", "philosophy", "literature", "astronomy", "geology", "psychology",
];

const FIRST_NAMES: &[&str] = &[
    "kunihiko", "aurelio", "benedikt", "corazon", "dalisay", "emeric", "fumiko", "gustavo", "hiroshi",
    "isolde", "jovita", "kasimir", "leocadia", "marcelo", "natsuki", "orlando", "perpetua", "quirino",
    "rosalind", "severino", "teodora", "ulrich", "valentin", "wilhelmina", "ximena", "yoshiro", "zenaida",
];

const LAST_NAMES: &[&str] = &[
    "kodaira", "abellera", "brandauer", "cabrera", "dimaculangan", "esterhazy", "fujiwara", "galvez",
    "hartmann", "ilustre", "jaramillo", "kowalczyk", "lindqvist", "magsaysay", "nakashima", "ocampo",
    "pellegrini", "quimbo", "rautenberg", "salonga", "takahara", "uy", "villafuerte", "weissmann",
];

const UNIVERSITIES: &[&str] = &[
    "kyoto imperial university", "university of santo tomas", "heidelberg university",
    "university of leiden", "tohoku imperial university", "university of bologna",
    "uppsala university", "university of coimbra",
];

const QUESTION_SHAPES: &[(&str, &str)] = &[
    (
        "What major did {person} study when entering {university} in {year}?",
        "{Person} entered {university} in {year}, enrolling to study {subject} before later work abroad.",
    ),
    (
        "Which subject did {person} teach at {university} starting in {year}?",
        "Starting in {year}, {person} taught {subject} at {university} for over a decade.",
    ),
    (
        "In what field did {person} receive a doctorate from {university} in {year}?",
        "{Person} received a doctorate in {subject} from {university} in {year}.",
    ),
];

const SHOP_WORDS_A: &[&str] = &["cotton", "golden", "happy", "urban", "sunny", "blue", "lucky", "prime", "maple", "island", "metro", "royal"];
const SHOP_WORDS_B: &[&str] = &["field", "mart", "corner", "depot", "hub", "outlet", "store", "bazaar", "house", "trading"];

fn title_case(words: &str) -> String {
    words
        .split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn word_count(s: &str) -> u64 {
    s.split(' ').filter(|w| !w.is_empty()).count() as u64
}

fn model_code(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    const LETTERS: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ";
    loop {
        let code: String = (0..5)
            .map(|i| {
                if i == 2 || i == 3 {
                    char::from(b'0' + rng.random_range(0..10u8))
                } else {
                    char::from(LETTERS[rng.random_range(0..LETTERS.len())])
                }
            })
            .collect();
        if used.insert(code.clone()) {
            return code;
        }
    }
}

fn draw_price(rng: &mut ChaCha8Rng, (lo, hi): (i64, i64)) -> Money {
    let units = rng.random_range(lo..=hi);
    let cents = if rng.random_bool(0.5) { 0 } else { rng.random_range(1..100) };
    Money::from_cents(units * 100 + cents)
}

/// Generate a full corpus.
pub fn generate(config: SynthConfig) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shop_count = config.shops.max(1);

    let mut used_ids = HashSet::new();
    let mut shop_ids = Vec::with_capacity(shop_count);
    while shop_ids.len() < shop_count {
        let id = rng.random_range(1_000_000u32..10_000_000).to_string();
        if used_ids.insert(id.clone()) {
            let name = title_case(&format!(
                "{} {}",
                SHOP_WORDS_A.choose(&mut rng).unwrap(),
                SHOP_WORDS_B.choose(&mut rng).unwrap()
            ));
            shop_ids.push((id, name));
        }
    }
    // Skewed shop sizes: weight ∝ 1/sqrt(rank).
    let weights: Vec<f64> = (0..shop_count).map(|r| 1.0 / ((r + 1) as f64).sqrt()).collect();
    let total_weight: f64 = weights.iter().sum();

    let mut codes = HashSet::new();
    let mut products = Vec::with_capacity(config.products);
    let mut ledger = Ledger {
        seed: config.seed,
        product_count: 0,
        shop_counts: BTreeMap::new(),
        category_counts: BTreeMap::new(),
        indexed_tokens: 0,
        fact_count: 0,
        snippet_count: 0,
    };

    for i in 0..config.products {
        // Round-robin categories keep strata balanced for sampling tests.
        let cat = &CATEGORIES[i % CATEGORIES.len()];
        let noun = *cat.nouns.choose(&mut rng).unwrap();
        let adjective = *cat.adjectives.choose(&mut rng).unwrap();
        let brand = *cat.brands.choose(&mut rng).unwrap();
        let code = model_code(&mut rng, &mut codes);
        let subject = (cat.name == "books").then(|| *SUBJECTS.choose(&mut rng).unwrap());
        let title_words = match subject {
            Some(subject) => format!("{brand} {adjective} {subject} {noun}"),
            None => format!("{brand} {adjective} {noun}"),
        };
        let title = format!("{} {}", title_case(&title_words), code);

        let mut names: Vec<&(&str, &[&str])> = cat.features.iter().collect();
        names.shuffle(&mut rng);
        let n_features = rng.random_range(2..=names.len().min(5));
        let mut features = BTreeMap::new();
        let mut feature_tokens = 0;
        for (name, values) in names.into_iter().take(n_features) {
            let value = *values.choose(&mut rng).unwrap();
            feature_tokens += word_count(name) + word_count(value);
            features.insert(name.to_string(), value.to_string());
        }

        let mut services = BTreeSet::new();
        for (svc, p) in [(Service::FlashSale, 0.35), (Service::FreeShipping, 0.45), (Service::Cod, 0.5), (Service::Official, 0.2)] {
            if rng.random_bool(p) {
                services.insert(svc);
            }
        }

        let mut pick = rng.random_range(0.0..total_weight);
        let mut shop_idx = 0;
        for (k, w) in weights.iter().enumerate() {
            if pick < *w {
                shop_idx = k;
                break;
            }
            pick -= w;
            shop_idx = k;
        }
        let (shop_id, shop_name) = shop_ids[shop_idx].clone();

        let product_id = loop {
            let id = rng.random_range(2_000_000_000u64..6_000_000_000).to_string();
            if used_ids.insert(id.clone()) {
                break id;
            }
        };
        let category_path = vec![cat.name.to_string(), cat.sub.to_string(), noun.to_string()];

        // Title words + code, twice; then brand, category labels, features.
        let title_tokens = word_count(&title_words) + 1;
        let other_tokens = word_count(brand) + category_path.iter().map(|l| word_count(l)).sum::<u64>() + feature_tokens;
        ledger.indexed_tokens += 2 * title_tokens + other_tokens;
        *ledger.shop_counts.entry(shop_id.clone()).or_default() += 1;
        *ledger.category_counts.entry(cat.name.to_string()).or_default() += 1;

        products.push(Product {
            product_id,
            title,
            price: draw_price(&mut rng, cat.price),
            shop_id,
            shop_name,
            category_path,
            brand: Some(title_case(brand)),
            features,
            services,
            description: Some(format!("{} {} by {}.", title_case(adjective), noun, title_case(brand))),
        });
    }
    ledger.product_count = products.len();

    let (facts, snippets) = generate_facts(&mut rng, &products, config.facts);
    ledger.fact_count = facts.len();
    ledger.snippet_count = snippets.len();
    SynthCorpus { products, facts, snippets, ledger }
}

fn generate_facts(rng: &mut ChaCha8Rng, products: &[Product], count: usize) -> (Vec<KnowledgeFact>, Vec<KnowledgeSnippet>) {
    let mut by_subject: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for p in products.iter().filter(|p| p.top_category() == "books") {
        let lower = p.title.to_lowercase();
        if let Some(s) = SUBJECTS.iter().find(|s| lower.split(' ').any(|w| w == **s)) {
            by_subject.entry(s).or_default().push(p.product_id.clone());
        }
    }
    let subjects: Vec<&str> = by_subject.keys().copied().collect();
    let mut facts = Vec::new();
    let mut snippets = Vec::new();
    if subjects.is_empty() {
        return (facts, snippets);
    }
    let mut people = HashSet::new();
    let max_people = FIRST_NAMES.len() * LAST_NAMES.len();
    while facts.len() < count.min(max_people) {
        let first = *FIRST_NAMES.choose(rng).unwrap();
        let last = *LAST_NAMES.choose(rng).unwrap();
        if !people.insert((first, last)) {
            continue;
        }
        let person = title_case(&format!("{first} {last}"));
        let university = title_case(UNIVERSITIES.choose(rng).unwrap());
        let year = rng.random_range(1900..1990).to_string();
        let subject = *subjects.choose(rng).unwrap();
        let (question, answer_text) = QUESTION_SHAPES.choose(rng).unwrap();
        let fill = |t: &str| {
            t.replace("{person}", &person)
                .replace("{Person}", &person)
                .replace("{university}", &university)
                .replace("{year}", &year)
                .replace("{subject}", subject)
        };
        let decoy = *subjects.iter().filter(|s| **s != subject).collect::<Vec<_>>().choose(rng).copied().unwrap_or(&subject);
        snippets.push(KnowledgeSnippet {
            title: format!("{person} - biography"),
            url: format!("https://kb.local/{}-{}", first, last),
            snippet: fill(answer_text),
        });
        snippets.push(KnowledgeSnippet {
            title: format!("{person} later career"),
            url: format!("https://kb.local/{}-{}/career", first, last),
            snippet: format!("{person} is remembered mostly for public lectures on {decoy}."),
        });
        facts.push(KnowledgeFact {
            question: fill(question),
            answer: subject.to_string(),
            product_ids: by_subject[subject].clone(),
        });
    }
    (facts, snippets)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

/// Files written by [`write_corpus`].
#[derive(Debug, Clone, Serialize)]
pub struct CorpusPaths {
    pub catalog: std::path::PathBuf,
    pub ledger: std::path::PathBuf,
    pub facts: std::path::PathBuf,
    pub snippets: std::path::PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> CorpusPaths {
        CorpusPaths {
            catalog: dir.join("catalog.jsonl"),
            ledger: dir.join("catalog.ledger.json"),
            facts: dir.join("facts.jsonl"),
            snippets: dir.join("snippets.jsonl"),
        }
    }
}

pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> io::Result<CorpusPaths> {
    fs::create_dir_all(dir)?;
    let paths = CorpusPaths::in_dir(dir);
    write_jsonl(&paths.catalog, &corpus.products)?;
    write_jsonl(&paths.facts, &corpus.facts)?;
    write_jsonl(&paths.snippets, &corpus.snippets)?;
    fs::write(&paths.ledger, serde_json::to_vec_pretty(&corpus.ledger).map_err(io::Error::other)?)?;
    Ok(paths)
}
