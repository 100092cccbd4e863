//! Shared fixtures for the criterion benches.

use msq_core::data::{gen_corpus, ToySpec};
use msq_core::numerics::stream_rng;
use msq_core::{Corpus, Model, ModelKind, Preset, RunConfig};

pub fn desk_config() -> RunConfig {
    RunConfig::preset(Preset::Desk)
}

pub fn desk_corpus(cfg: &RunConfig, n: usize) -> Corpus {
    let spec = ToySpec::new(cfg.model.decoder.n_mels).expect("desk toy spec");
    gen_corpus(&spec, n, (5, 12), cfg.seed).expect("desk corpus")
}

pub fn fresh_model(cfg: &RunConfig, kind: ModelKind) -> Model {
    Model::new(kind, &cfg.model, &mut stream_rng(cfg.seed, 0)).expect("desk model")
}
