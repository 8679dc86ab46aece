//! Sparse retrieval over the catalog: inverted index, Okapi BM25 ranking,
//! structured filters and fixed-size pagination.
//!
//! ```text
//! score(D, Q) = Σ_{t ∈ Q} idf(t) · tf(t, D)·(k1 + 1) / (tf(t, D) + k1·(1 − b + b·|D|/avgdl))
//! idf(t)      = ln(1 + (N − n_t + 0.5) / (n_t + 0.5))
//! ```
//!
//! Query terms are counted with multiplicity, so a repeated term contributes
//! once per occurrence.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, Product, Service};
use crate::money::Money;
use crate::text::tokenize;

/// Results per page.
pub const PAGE_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("cannot index an empty corpus")]
    EmptyCatalog,
    #[error("unknown document {0}")]
    UnknownDoc(usize),
    #[error("invalid price band: {0}")]
    InvalidPriceBand(String),
    #[error("page must be >= 1")]
    InvalidPage,
    #[error("index was built for catalog {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("index file: {0}")]
    Io(#[from] std::io::Error),
    #[error("index file: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

/// Integer duplication factors per product field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldWeights {
    pub title: u32,
    pub other: u32,
}

impl Default for FieldWeights {
    fn default() -> Self {
        FieldWeights { title: 2, other: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Generic BM25 inverted index over pre-tokenized documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    total_length: u64,
    params: Bm25Params,
}

impl InvertedIndex {
    pub fn build<I, D>(docs: I, params: Bm25Params) -> InvertedIndex
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[String]>,
    {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::new();
        let mut total_length = 0u64;
        for (doc, tokens) in docs.into_iter().enumerate() {
            let tokens = tokens.as_ref();
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, count) in tf {
                postings
                    .entry(term.to_owned())
                    .or_default()
                    .push(Posting { doc: doc as u32, tf: count });
            }
            doc_lengths.push(tokens.len() as u32);
            total_length += tokens.len() as u64;
        }
        InvertedIndex { postings, doc_lengths, total_length, params }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn avg_doc_length(&self) -> f64 {
        if self.doc_lengths.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.doc_lengths.len() as f64
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &[Posting])> {
        self.postings.iter().map(|(t, p)| (t.as_str(), p.as_slice()))
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        bm25_idf(self.doc_count(), self.document_frequency(term))
    }

    fn contribution(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        bm25_term(idf, tf, doc_len, self.avg_doc_length(), self.params)
    }

    /// BM25 score of one document.
    pub fn score(&self, query_terms: &[String], doc: usize) -> Result<f64, SearchError> {
        let dl = *self.doc_lengths.get(doc).ok_or(SearchError::UnknownDoc(doc))?;
        let mut total = 0.0;
        for term in query_terms {
            let postings = self.postings(term);
            if let Ok(i) = postings.binary_search_by_key(&(doc as u32), |p| p.doc) {
                total += self.contribution(self.idf(term), postings[i].tf, dl);
            }
        }
        Ok(total)
    }

    /// Scores for every document matching at least one query term. Each
    /// document's sum is accumulated in query-term order.
    pub fn score_all(&self, query_terms: &[String]) -> HashMap<u32, f64> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in query_terms {
            let postings = self.postings(term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(term);
            for p in postings {
                let dl = self.doc_lengths[p.doc as usize];
                *acc.entry(p.doc).or_insert(0.0) += self.contribution(idf, p.tf, dl);
            }
        }
        acc
    }
}

pub fn bm25_idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

pub fn bm25_term(idf: f64, tf: u32, doc_len: u32, avg_doc_len: f64, params: Bm25Params) -> f64 {
    let tf = tf as f64;
    let norm = 1.0 - params.b + params.b * doc_len as f64 / avg_doc_len;
    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}

/// Indexed token stream for a product: title repeated by its weight, then
/// brand, category labels and flattened `name value` feature text.
pub fn product_tokens(product: &Product, weights: FieldWeights) -> Vec<String> {
    let title = tokenize(&product.title);
    let mut other = Vec::new();
    if let Some(brand) = &product.brand {
        other.extend(tokenize(brand));
    }
    for label in &product.category_path {
        other.extend(tokenize(label));
    }
    for (name, value) in &product.features {
        other.extend(tokenize(name));
        other.extend(tokenize(value));
    }
    let mut out = Vec::with_capacity(title.len() * weights.title as usize + other.len() * weights.other as usize);
    for _ in 0..weights.title {
        out.extend(title.iter().cloned());
    }
    for _ in 0..weights.other {
        out.extend(other.iter().cloned());
    }
    out
}

/// Inclusive price band; either side may be open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PriceBand {
    pub min: Option<Money>,
    pub max: Option<Money>,
}

impl PriceBand {
    pub fn new(min: Option<Money>, max: Option<Money>) -> Result<PriceBand, SearchError> {
        if let (Some(lo), Some(hi)) = (min, max) {
            if lo > hi {
                return Err(SearchError::InvalidPriceBand(format!("min {lo} exceeds max {hi}")));
            }
        }
        Ok(PriceBand { min, max })
    }

    pub fn contains(&self, price: Money) -> bool {
        self.min.is_none_or(|lo| price >= lo) && self.max.is_none_or(|hi| price <= hi)
    }
}

impl fmt::Display for PriceBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |m: Option<Money>| m.map(Money::to_compact).unwrap_or_default();
        write!(f, "{}-{}", side(self.min), side(self.max))
    }
}

impl FromStr for PriceBand {
    type Err = SearchError;

    /// Accepts `"115-"`, `"-200"`, `"100-200"` or a bare `"150"` (exact).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SearchError::InvalidPriceBand(s.to_owned());
        let t = s.trim();
        if t.is_empty() {
            return Err(bad());
        }
        let parse = |part: &str| -> Result<Option<Money>, SearchError> {
            let part = part.trim();
            if part.is_empty() {
                Ok(None)
            } else {
                part.parse::<Money>().map(Some).map_err(|_| bad())
            }
        };
        match t.split_once('-') {
            Some((lo, hi)) => {
                let band = PriceBand::new(parse(lo)?, parse(hi)?)?;
                if band.min.is_none() && band.max.is_none() {
                    return Err(bad());
                }
                Ok(band)
            }
            None => {
                let v = parse(t)?;
                PriceBand::new(v, v)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    #[default]
    Relevance,
    PriceAsc,
    PriceDesc,
}

impl FromStr for SortKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "relevance" | "default" => Ok(SortKey::Relevance),
            "price_asc" | "price asc" | "priceasc" => Ok(SortKey::PriceAsc),
            "price_desc" | "price desc" | "pricedesc" => Ok(SortKey::PriceDesc),
            other => Err(format!("unknown sort {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub q: String,
    pub page: usize,
    #[serde(default)]
    pub services: Vec<Service>,
    #[serde(default)]
    pub price: Option<PriceBand>,
    #[serde(default)]
    pub shop_id: Option<String>,
    #[serde(default)]
    pub sort: SortKey,
}

impl SearchQuery {
    pub fn new(q: impl Into<String>) -> Self {
        SearchQuery { q: q.into(), page: 1, services: Vec::new(), price: None, shop_id: None, sort: SortKey::Relevance }
    }

    pub fn matches_filters(&self, product: &Product) -> bool {
        self.services.iter().all(|s| product.services.contains(s))
            && self.price.is_none_or(|band| band.contains(product.price))
            && self.shop_id.as_deref().is_none_or(|shop| product.shop_id == shop)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchItem {
    pub product_id: String,
    pub title: String,
    pub price: Money,
    pub shop_id: String,
    pub services: Vec<Service>,
}

impl From<&Product> for SearchItem {
    fn from(p: &Product) -> Self {
        SearchItem {
            product_id: p.product_id.clone(),
            title: p.title.clone(),
            price: p.price,
            shop_id: p.shop_id.clone(),
            services: p.services.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchPage {
    pub items: Vec<SearchItem>,
    pub page: usize,
    pub total_hits: usize,
}

/// Sort `(doc, score)` hits by the active key, product_id last.
pub fn sort_hits(hits: &mut [(usize, f64)], products: &[Product], sort: SortKey) {
    hits.sort_by(|&(a, sa), &(b, sb)| {
        let (pa, pb) = (&products[a], &products[b]);
        let primary = match sort {
            SortKey::Relevance => sb.total_cmp(&sa),
            SortKey::PriceAsc => pa.price.cmp(&pb.price),
            SortKey::PriceDesc => pb.price.cmp(&pa.price),
        };
        primary.then_with(|| pa.product_id.cmp(&pb.product_id))
    });
}

pub fn paginate(hits: &[(usize, f64)], products: &[Product], page: usize) -> SearchPage {
    let start = (page - 1).saturating_mul(PAGE_SIZE);
    let items = hits
        .iter()
        .skip(start)
        .take(PAGE_SIZE)
        .map(|&(doc, _)| SearchItem::from(&products[doc]))
        .collect();
    SearchPage { items, page, total_hits: hits.len() }
}

#[derive(Debug, Serialize, Deserialize)]
struct PersistedIndex {
    catalog_digest: String,
    weights: FieldWeights,
    corpus: InvertedIndex,
}

/// BM25 index over a catalog. Document refs are catalog positions.
#[derive(Debug, Clone)]
pub struct ProductIndex {
    corpus: InvertedIndex,
    weights: FieldWeights,
    catalog_digest: String,
}

impl ProductIndex {
    pub fn build(catalog: &Catalog, weights: FieldWeights, params: Bm25Params) -> Result<ProductIndex, SearchError> {
        if catalog.is_empty() {
            return Err(SearchError::EmptyCatalog);
        }
        let docs = catalog.products().iter().map(|p| product_tokens(p, weights));
        Ok(ProductIndex {
            corpus: InvertedIndex::build(docs, params),
            weights,
            catalog_digest: catalog.digest().to_owned(),
        })
    }

    pub fn corpus(&self) -> &InvertedIndex {
        &self.corpus
    }

    pub fn weights(&self) -> FieldWeights {
        self.weights
    }

    pub fn score(&self, query_terms: &[String], doc: usize) -> Result<f64, SearchError> {
        self.corpus.score(query_terms, doc)
    }

    /// Filter, rank, then slice one page. Out-of-range pages are empty.
    pub fn search(&self, catalog: &Catalog, query: &SearchQuery) -> Result<SearchPage, SearchError> {
        if query.page == 0 {
            return Err(SearchError::InvalidPage);
        }
        if let Some(band) = query.price {
            PriceBand::new(band.min, band.max)?;
        }
        let products = catalog.products();
        let terms = tokenize(&query.q);
        let mut hits: Vec<(usize, f64)> = if terms.is_empty() {
            products
                .iter()
                .enumerate()
                .filter(|(_, p)| query.matches_filters(p))
                .map(|(i, _)| (i, 0.0))
                .collect()
        } else {
            self.corpus
                .score_all(&terms)
                .into_iter()
                .map(|(doc, s)| (doc as usize, s))
                .filter(|&(doc, _)| query.matches_filters(&products[doc]))
                .collect()
        };
        sort_hits(&mut hits, products, query.sort);
        Ok(paginate(&hits, products, query.page))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SearchError> {
        let persisted = PersistedIndex {
            catalog_digest: self.catalog_digest.clone(),
            weights: self.weights,
            corpus: self.corpus.clone(),
        };
        fs::write(path, serde_json::to_vec(&persisted)?)?;
        Ok(())
    }

    /// Load a persisted index, refusing one built for a different catalog.
    pub fn load(path: impl AsRef<Path>, catalog: &Catalog) -> Result<ProductIndex, SearchError> {
        let persisted: PersistedIndex = serde_json::from_slice(&fs::read(path)?)?;
        if persisted.catalog_digest != catalog.digest() {
            return Err(SearchError::DigestMismatch {
                expected: persisted.catalog_digest,
                actual: catalog.digest().to_owned(),
            });
        }
        Ok(ProductIndex { corpus: persisted.corpus, weights: persisted.weights, catalog_digest: persisted.catalog_digest })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn product(id: &str, title: &str, price: &str, shop: &str, services: &[Service]) -> Product {
        Product {
            product_id: id.into(),
            title: title.into(),
            price: price.parse().unwrap(),
            shop_id: shop.into(),
            shop_name: format!("shop {shop}"),
            category_path: vec![],
            brand: None,
            features: BTreeMap::new(),
            services: services.iter().copied().collect::<BTreeSet<_>>(),
            description: None,
        }
    }

    fn toy() -> Catalog {
        Catalog::from_products(vec![
            product("d1", "cotton yarn", "10", "s1", &[]),
            product("d2", "cotton shirt cotton", "20", "s1", &[Service::FlashSale]),
            product("d3", "paper yarn ball", "114", "s2", &[Service::FlashSale]),
        ])
        .unwrap()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn toy_postings_match_hand_enumeration() {
        // Title weight 2, no other fields:
        // d1 = cotton yarn ×2 (len 4), d2 = cotton shirt cotton ×2 (len 6),
        // d3 = paper yarn ball ×2 (len 6).
        let idx = ProductIndex::build(&toy(), FieldWeights::default(), Bm25Params::default()).unwrap();
        let c = idx.corpus();
        assert_eq!(c.doc_lengths(), &[4, 6, 6]);
        assert_eq!(c.postings("cotton"), &[Posting { doc: 0, tf: 2 }, Posting { doc: 1, tf: 4 }]);
        assert_eq!(c.postings("yarn"), &[Posting { doc: 0, tf: 2 }, Posting { doc: 2, tf: 2 }]);
        assert_eq!(c.postings("shirt"), &[Posting { doc: 1, tf: 2 }]);
        assert_eq!(c.postings("ball"), &[Posting { doc: 2, tf: 2 }]);
        assert!((c.avg_doc_length() - 16.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn toy_scores_match_scratch_evaluation() {
        // Values from an independent scratch evaluation of the BM25 formula
        // (k1 = 0.9, b = 0.4, N = 3, avgdl = 16/3):
        //   idf(cotton) = idf(yarn) = ln(1 + 1.5/2.5) = 0.47000362924573563
        //   d1: cotton tf2 dl4 + yarn tf2 dl4   = 1.27118419297779
        //   d2: cotton tf4 dl6                  = 0.7223513816516866
        //   d3: yarn tf2 dl6                    = 0.6064562958009491
        let idx = ProductIndex::build(&toy(), FieldWeights::default(), Bm25Params::default()).unwrap();
        let q = s(&["cotton", "yarn"]);
        let expect = [1.27118419297779, 0.7223513816516866, 0.6064562958009491];
        for (doc, e) in expect.iter().enumerate() {
            let got = idx.score(&q, doc).unwrap();
            assert!((got - e).abs() < 1e-12, "doc {doc}: {got} vs {e}");
        }
        assert_eq!(idx.score(&s(&["ball"]), 0).unwrap(), 0.0);
        assert!(matches!(idx.score(&q, 7), Err(SearchError::UnknownDoc(7))));
    }

    #[test]
    fn repeated_query_term_counts_twice() {
        let idx = ProductIndex::build(&toy(), FieldWeights::default(), Bm25Params::default()).unwrap();
        let once = idx.score(&s(&["yarn"]), 2).unwrap();
        let twice = idx.score(&s(&["yarn", "yarn"]), 2).unwrap();
        assert_eq!(twice, 2.0 * once);
    }

    #[test]
    fn single_document_average_is_its_length() {
        let cat = Catalog::from_products(vec![product("a", "one two three", "1", "s", &[])]).unwrap();
        let idx = ProductIndex::build(&cat, FieldWeights::default(), Bm25Params::default()).unwrap();
        assert_eq!(idx.corpus().avg_doc_length(), 6.0);
    }

    #[test]
    fn empty_catalog_is_rejected() {
        let cat = Catalog::from_products(vec![]).unwrap();
        assert!(matches!(
            ProductIndex::build(&cat, FieldWeights::default(), Bm25Params::default()),
            Err(SearchError::EmptyCatalog)
        ));
    }

    #[test]
    fn price_band_parsing() {
        let b: PriceBand = "115-".parse().unwrap();
        assert_eq!(b.min, Some(Money::from_units(115)));
        assert_eq!(b.max, None);
        assert!(!b.contains("114.00".parse().unwrap()));
        assert!(b.contains("115.00".parse().unwrap()));
        let b: PriceBand = "-200".parse().unwrap();
        assert_eq!(b.max, Some(Money::from_units(200)));
        assert!("300-200".parse::<PriceBand>().is_err());
        assert!("-".parse::<PriceBand>().is_err());
        assert!("abc-".parse::<PriceBand>().is_err());
        assert_eq!("100-200".parse::<PriceBand>().unwrap().to_string(), "100-200");
    }

    #[test]
    fn filters_and_pagination() {
        let cat = toy();
        let idx = ProductIndex::build(&cat, FieldWeights::default(), Bm25Params::default()).unwrap();
        let mut q = SearchQuery::new("yarn");
        q.price = Some("115-".parse().unwrap());
        let page = idx.search(&cat, &q).unwrap();
        assert_eq!(page.total_hits, 0);

        let mut q = SearchQuery::new("cotton yarn");
        q.services = vec![Service::FlashSale];
        let page = idx.search(&cat, &q).unwrap();
        let ids: Vec<_> = page.items.iter().map(|i| i.product_id.as_str()).collect();
        assert_eq!(ids, ["d2", "d3"]);

        q.page = 5;
        let page = idx.search(&cat, &q).unwrap();
        assert!(page.items.is_empty());
        assert_eq!(page.total_hits, 2);

        q.page = 0;
        assert!(idx.search(&cat, &q).is_err());
    }

    #[test]
    fn empty_query_browses_filtered_set_by_sort() {
        let cat = toy();
        let idx = ProductIndex::build(&cat, FieldWeights::default(), Bm25Params::default()).unwrap();
        let mut q = SearchQuery::new("");
        q.sort = SortKey::PriceDesc;
        let ids: Vec<_> = idx.search(&cat, &q).unwrap().items.into_iter().map(|i| i.product_id).collect();
        assert_eq!(ids, ["d3", "d2", "d1"]);
    }

    #[test]
    fn persisted_index_round_trips_and_checks_digest() {
        let cat = toy();
        let idx = ProductIndex::build(&cat, FieldWeights::default(), Bm25Params::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        idx.save(&path).unwrap();
        let back = ProductIndex::load(&path, &cat).unwrap();
        assert_eq!(back.corpus(), idx.corpus());
        let other = Catalog::from_products(vec![product("z", "z", "1", "s", &[])]).unwrap();
        assert!(matches!(ProductIndex::load(&path, &other), Err(SearchError::DigestMismatch { .. })));
    }
}
