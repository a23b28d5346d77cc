//! Fixtures shared by the benchmarks.

use cafc_core::harness::config::Config;
use cafc_core::harness::dataset::{generate_toy_dataset, ToySample};
use cafc_core::harness::pipeline::Models;
use cafc_core::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default-sized models with freshly initialised parameters.
pub struct Fixture {
    pub cfg: Config,
    pub models: Models,
    pub store: ParamStore<f32>,
    pub samples: Vec<ToySample>,
}

pub fn fixture() -> Fixture {
    let cfg = Config::default();
    let models = Models::new(&cfg, 8).expect("default config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = models.tokenizer.init_params(&mut rng).expect("init");
    models.token_model.init_params(&mut store, &mut rng).expect("init");
    models.finetune.selector.init_params(&mut store, &mut rng).expect("init");
    models.finetune.classifier.head.init_params(&mut store, &mut rng).expect("init");
    Fixture {
        cfg,
        models,
        store,
        samples: generate_toy_dataset(0, 32),
    }
}
