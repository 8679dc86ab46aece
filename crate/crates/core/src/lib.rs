//! Offline shopping sandbox for evaluating tool-using agents.

pub mod agents;
pub mod analysis;
pub mod catalog;
pub mod distill;
pub mod knowledge;
pub mod metrics;
pub mod money;
pub mod sandbox;
pub mod search;
pub mod synth;
pub mod taskgen;
pub mod text;

pub use catalog::{apply_voucher, Catalog, Product, Service, Settlement, VoucherRule};
pub use money::Money;
