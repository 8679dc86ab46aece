#![allow(dead_code)]

use std::sync::Arc;

use shopsandbox_core::knowledge::{DisabledBackend, FixtureStore};
use shopsandbox_core::sandbox::{EnvConfig, Environment};
use shopsandbox_core::search::{Bm25Params, FieldWeights, ProductIndex};
use shopsandbox_core::synth::{generate, SynthConfig, SynthCorpus};
use shopsandbox_core::taskgen::{generate_suite, FactStore, SuiteConfig, Task, TemplateRenderer};
use shopsandbox_core::Catalog;

pub struct World {
    pub corpus: SynthCorpus,
    pub catalog: Arc<Catalog>,
    pub facts: FactStore,
    pub env: Environment,
}

impl World {
    pub fn new(config: SynthConfig) -> World {
        let corpus = generate(config);
        let catalog = Arc::new(Catalog::from_products(corpus.products.clone()).expect("catalog"));
        let index = Arc::new(ProductIndex::build(&catalog, FieldWeights::default(), Bm25Params::default()).expect("index"));
        let facts = FactStore::new(corpus.facts.clone(), &catalog).expect("facts");
        let kb = Arc::new(FixtureStore::new(corpus.snippets.clone()));
        let env = Environment::new(catalog.clone(), index, kb, EnvConfig::default());
        World { corpus, catalog, facts, env }
    }

    pub fn small() -> World {
        World::new(SynthConfig::default())
    }

    pub fn without_web(&self) -> Environment {
        self.env.with_knowledge(Arc::new(DisabledBackend))
    }

    pub fn suite(&self, config: &SuiteConfig) -> Vec<Task> {
        generate_suite(&self.catalog, Some(&self.facts), config, &TemplateRenderer).expect("suite")
    }
}
