//! Product catalog, shop directory and voucher settlement.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::money::Money;
use crate::text::normalize;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("failed to read catalog: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: duplicate product_id {product_id:?}")]
    DuplicateProductId { line: usize, product_id: String },
    #[error("line {line}: price must be positive, got {price}")]
    NegativePrice { line: usize, price: Money },
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("prices and shop ids differ in length ({prices} vs {shops})")]
    LengthMismatch { prices: usize, shops: usize },
}

/// Closed service vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Service {
    #[serde(rename = "flashsale")]
    FlashSale,
    #[serde(rename = "freeShipping")]
    FreeShipping,
    #[serde(rename = "COD")]
    Cod,
    #[serde(rename = "official")]
    Official,
}

impl Service {
    pub const ALL: [Service; 4] = [Service::FlashSale, Service::FreeShipping, Service::Cod, Service::Official];

    pub fn as_str(self) -> &'static str {
        match self {
            Service::FlashSale => "flashsale",
            Service::FreeShipping => "freeShipping",
            Service::Cod => "COD",
            Service::Official => "official",
        }
    }

    /// How the service reads in an instruction.
    pub fn phrase(self) -> &'static str {
        match self {
            Service::FlashSale => "flashsale deals",
            Service::FreeShipping => "free shipping",
            Service::Cod => "cash on delivery",
            Service::Official => "LazMall official store service",
        }
    }
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Service {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace([' ', '_', '-'], "").as_str() {
            "flashsale" => Ok(Service::FlashSale),
            "freeshipping" => Ok(Service::FreeShipping),
            "cod" | "cashondelivery" => Ok(Service::Cod),
            "official" | "lazmall" => Ok(Service::Official),
            _ => Err(format!("unknown service {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Product {
    pub product_id: String,
    pub title: String,
    pub price: Money,
    pub shop_id: String,
    pub shop_name: String,
    pub category_path: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    pub features: BTreeMap<String, String>,
    pub services: BTreeSet<Service>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Product {
    /// Renormalize feature keys and values in place.
    pub fn normalize_features(&mut self) {
        self.features = self
            .features
            .iter()
            .map(|(k, v)| (normalize(k), normalize(v)))
            .collect();
    }

    pub fn top_category(&self) -> &str {
        self.category_path.first().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shop {
    pub shop_id: String,
    pub shop_name: String,
    pub product_ids: BTreeSet<String>,
}

/// Same-shop fixed-discount promotion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoucherRule {
    pub min_total: Money,
    pub discount: Money,
    #[serde(default = "default_true")]
    pub same_shop_required: bool,
}

fn default_true() -> bool {
    true
}

impl VoucherRule {
    pub fn new(min_total: Money, discount: Money) -> Option<Self> {
        (Money::ZERO < discount && discount < min_total).then_some(VoucherRule {
            min_total,
            discount,
            same_shop_required: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub raw_total: Money,
    pub discount_applied: Money,
    pub final_total: Money,
    pub voucher_valid: bool,
}

/// Settle a basket. The voucher applies only when every item comes from one
/// shop and the raw total reaches the rule threshold.
pub fn apply_voucher(
    prices: &[Money],
    shop_ids: &[&str],
    rule: Option<&VoucherRule>,
) -> Result<Settlement, CatalogError> {
    if prices.len() != shop_ids.len() {
        return Err(CatalogError::LengthMismatch { prices: prices.len(), shops: shop_ids.len() });
    }
    let raw_total: Money = prices.iter().sum();
    let single_shop = shop_ids.first().is_some_and(|s| shop_ids.iter().all(|x| x == s));
    let voucher_valid = match rule {
        Some(r) => (single_shop || !r.same_shop_required) && !prices.is_empty() && raw_total >= r.min_total,
        None => false,
    };
    let discount_applied = match rule {
        Some(r) if voucher_valid => r.discount,
        _ => Money::ZERO,
    };
    Ok(Settlement {
        raw_total,
        discount_applied,
        final_total: raw_total - discount_applied,
        voucher_valid,
    })
}

/// Immutable, validated product catalog.
#[derive(Debug, Clone)]
pub struct Catalog {
    products: Vec<Product>,
    by_id: HashMap<String, usize>,
    shops: BTreeMap<String, Shop>,
    digest: String,
}

impl Catalog {
    pub fn load(path: impl AsRef<Path>) -> Result<Catalog, CatalogError> {
        let bytes = fs::read(path)?;
        Catalog::from_jsonl_bytes(&bytes)
    }

    pub fn from_jsonl_bytes(bytes: &[u8]) -> Result<Catalog, CatalogError> {
        let text = std::str::from_utf8(bytes).map_err(|e| CatalogError::MalformedRecord {
            line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
            reason: "invalid UTF-8".into(),
        })?;
        let mut products = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let product: Product = serde_json::from_str(raw)
                .map_err(|e| CatalogError::MalformedRecord { line, reason: e.to_string() })?;
            products.push((line, product));
        }
        let digest = hex::encode(Sha256::digest(bytes));
        Catalog::build(products, digest)
    }

    /// Build from in-memory products. The digest covers the canonical
    /// serialization.
    pub fn from_products(products: Vec<Product>) -> Result<Catalog, CatalogError> {
        let mut buf = Vec::new();
        for p in &products {
            buf.extend(serde_json::to_vec(p).expect("product serializes"));
            buf.push(b'\n');
        }
        let digest = hex::encode(Sha256::digest(&buf));
        Catalog::build(products.into_iter().enumerate().map(|(i, p)| (i + 1, p)).collect(), digest)
    }

    fn build(records: Vec<(usize, Product)>, digest: String) -> Result<Catalog, CatalogError> {
        let mut products = Vec::with_capacity(records.len());
        let mut by_id = HashMap::with_capacity(records.len());
        let mut shops: BTreeMap<String, Shop> = BTreeMap::new();
        for (line, mut p) in records {
            let malformed = |reason: &str| CatalogError::MalformedRecord { line, reason: reason.into() };
            if p.product_id.trim().is_empty() {
                return Err(malformed("empty product_id"));
            }
            if p.shop_id.trim().is_empty() {
                return Err(malformed("empty shop_id"));
            }
            if p.price <= Money::ZERO {
                return Err(CatalogError::NegativePrice { line, price: p.price });
            }
            if by_id.contains_key(&p.product_id) {
                return Err(CatalogError::DuplicateProductId { line, product_id: p.product_id });
            }
            p.normalize_features();
            let shop = shops.entry(p.shop_id.clone()).or_insert_with(|| Shop {
                shop_id: p.shop_id.clone(),
                shop_name: p.shop_name.clone(),
                product_ids: BTreeSet::new(),
            });
            shop.product_ids.insert(p.product_id.clone());
            by_id.insert(p.product_id.clone(), products.len());
            products.push(p);
        }
        Ok(Catalog { products, by_id, shops, digest })
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Products in load order.
    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn shops(&self) -> &BTreeMap<String, Shop> {
        &self.shops
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn position(&self, product_id: &str) -> Option<usize> {
        self.by_id.get(product_id).copied()
    }

    pub fn find(&self, product_id: &str) -> Option<&Product> {
        self.position(product_id).map(|i| &self.products[i])
    }

    pub fn get_product(&self, product_id: &str) -> Result<&Product, CatalogError> {
        self.find(product_id).ok_or_else(|| CatalogError::UnknownId(product_id.to_owned()))
    }

    /// Products of a shop ordered by product_id.
    pub fn list_shop_products(&self, shop_id: &str) -> Result<Vec<&Product>, CatalogError> {
        let shop = self.shops.get(shop_id).ok_or_else(|| CatalogError::UnknownId(shop_id.to_owned()))?;
        Ok(shop.product_ids.iter().map(|id| &self.products[self.by_id[id]]).collect())
    }

    /// Canonical line-delimited JSON serialization.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.products {
            out.push_str(&serde_json::to_string(p).expect("product serializes"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(s: &str) -> Money {
        s.parse().unwrap()
    }

    fn record(id: &str, shop: &str, price: &str) -> String {
        format!(
            r#"{{"product_id":"{id}","title":"Item {id}","price":"{price}","shop_id":"{shop}","shop_name":"Shop {shop}","category_path":["Crafts"],"features":{{"Color":"Natural!"}},"services":["COD"]}}"#
        )
    }

    #[test]
    fn loads_three_records_two_shops() {
        let text = [record("a", "s1", "10.00"), record("b", "s2", "5"), record("c", "s1", "7.50")].join("\n");
        let cat = Catalog::from_jsonl_bytes(text.as_bytes()).unwrap();
        assert_eq!(cat.len(), 3);
        assert_eq!(cat.shops().len(), 2);
        assert_eq!(cat.get_product("b").unwrap().price, m("5.00"));
        assert_eq!(cat.get_product("a").unwrap().features["color"], "natural");
    }

    #[test]
    fn duplicate_id_names_line_two() {
        let text = [record("42", "s1", "1"), record("42", "s1", "2")].join("\n");
        match Catalog::from_jsonl_bytes(text.as_bytes()) {
            Err(CatalogError::DuplicateProductId { line, product_id }) => {
                assert_eq!(line, 2);
                assert_eq!(product_id, "42");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_records() {
        let neg = record("a", "s", "-1.00");
        assert!(matches!(
            Catalog::from_jsonl_bytes(neg.as_bytes()),
            Err(CatalogError::NegativePrice { line: 1, .. })
        ));
        let bad_service = record("a", "s", "1").replace("COD", "teleport");
        assert!(matches!(
            Catalog::from_jsonl_bytes(bad_service.as_bytes()),
            Err(CatalogError::MalformedRecord { line: 1, .. })
        ));
        let text = format!("{}\n{{not json", record("a", "s", "1"));
        assert!(matches!(
            Catalog::from_jsonl_bytes(text.as_bytes()),
            Err(CatalogError::MalformedRecord { line: 2, .. })
        ));
        let empty_shop = record("a", "", "1");
        assert!(matches!(
            Catalog::from_jsonl_bytes(empty_shop.as_bytes()),
            Err(CatalogError::MalformedRecord { .. })
        ));
    }

    #[test]
    fn lookups() {
        let text = [record("c", "s", "1"), record("a", "s", "1"), record("b", "s", "1")].join("\n");
        let cat = Catalog::from_jsonl_bytes(text.as_bytes()).unwrap();
        assert!(matches!(cat.get_product("zzz"), Err(CatalogError::UnknownId(_))));
        let ids: Vec<_> = cat.list_shop_products("s").unwrap().iter().map(|p| p.product_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(cat.list_shop_products("nope").is_err());
    }

    #[test]
    fn load_is_deterministic() {
        let text = [record("x", "s1", "3"), record("y", "s2", "4")].join("\n");
        let a = Catalog::from_jsonl_bytes(text.as_bytes()).unwrap();
        let b = Catalog::from_jsonl_bytes(text.as_bytes()).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn voucher_settlement_examples() {
        let prices = [m("576.72"), m("599.00"), m("750.00"), m("799.00")];
        let rule = VoucherRule::new(m("2368"), m("392")).unwrap();
        let same = apply_voucher(&prices, &["2976842"; 4], Some(&rule)).unwrap();
        assert_eq!(
            same,
            Settlement { raw_total: m("2724.72"), discount_applied: m("392"), final_total: m("2332.72"), voucher_valid: true }
        );
        let mixed = apply_voucher(&prices, &["5770895", "2976842", "2976842", "2976842"], Some(&rule)).unwrap();
        assert_eq!(
            mixed,
            Settlement { raw_total: m("2724.72"), discount_applied: Money::ZERO, final_total: m("2724.72"), voucher_valid: false }
        );
        let empty = apply_voucher(&[], &[], Some(&rule)).unwrap();
        assert_eq!(empty.raw_total, Money::ZERO);
        assert!(!empty.voucher_valid);
        assert!(matches!(apply_voucher(&prices, &["a"], None), Err(CatalogError::LengthMismatch { .. })));
    }

    #[test]
    fn voucher_rule_invariant() {
        assert!(VoucherRule::new(m("100"), m("392")).is_none());
        assert!(VoucherRule::new(m("100"), m("0")).is_none());
        assert!(VoucherRule::new(m("100"), m("99.99")).is_some());
    }

    proptest! {
        #[test]
        fn settlement_conserves_total(cents in prop::collection::vec(1i64..500_000, 0..8), disc in 1i64..10_000, extra in 0i64..100_000) {
            let prices: Vec<Money> = cents.iter().map(|&c| Money::from_cents(c)).collect();
            let shops = vec!["s"; prices.len()];
            let rule = VoucherRule::new(Money::from_cents(disc + extra + 1), Money::from_cents(disc)).unwrap();
            let s = apply_voucher(&prices, &shops, Some(&rule)).unwrap();
            prop_assert_eq!(s.final_total + s.discount_applied, s.raw_total);
            prop_assert_eq!(s.final_total.to_string().parse::<Money>().unwrap(), s.final_total);
        }

        #[test]
        fn adding_same_shop_item_keeps_voucher(cents in prop::collection::vec(1i64..500_000, 1..6), more in 1i64..500_000, min in 2i64..1_000_000) {
            let mut prices: Vec<Money> = cents.iter().map(|&c| Money::from_cents(c)).collect();
            let rule = VoucherRule::new(Money::from_cents(min), Money::from_cents(1)).unwrap();
            let before = apply_voucher(&prices, &vec!["s"; prices.len()], Some(&rule)).unwrap();
            prices.push(Money::from_cents(more));
            let after = apply_voucher(&prices, &vec!["s"; prices.len()], Some(&rule)).unwrap();
            prop_assert!(!before.voucher_valid || after.voucher_valid);
        }
    }
}
