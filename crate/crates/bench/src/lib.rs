//! Shared fixtures for the criterion benches.

use htnet::data::synth_generate;
use htnet::{ModelConfig, ModelParams, PoseSet};

/// A model and a synthetic batch of `frames` poses, both seeded.
pub fn fixture(channels: usize, mixers: usize, frames: usize) -> (ModelConfig, ModelParams, PoseSet) {
    let config = ModelConfig::default().with_channels(channels).with_mixers(mixers);
    let params = ModelParams::init(&config, 0).expect("valid bench config");
    (config, params, synth_generate(frames, 0, 0.0))
}
