#![allow(dead_code)]

use mgms::config::RunConfig;
use mgms::data::{generate_split, Split};
use mgms::pipeline::{run_codec_stage, Model};
use mgms::PhotoSketchPair;

/// The repository's smoke-test configuration; every stage finishes in well
/// under a second.
pub fn tiny() -> RunConfig {
    RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml")).unwrap()
}

pub fn split(cfg: &RunConfig, s: Split) -> Vec<PhotoSketchPair> {
    generate_split(&cfg.corpus, s).unwrap()
}

/// A tiny model through stage 0.
pub fn codec_model(cfg: &RunConfig) -> Model {
    run_codec_stage(cfg, &split(cfg, Split::Pretrain), |_| {}).unwrap()
}
