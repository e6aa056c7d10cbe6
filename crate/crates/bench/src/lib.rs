//! Fixtures shared by the benchmarks.

use gvt2rpm::preprocess::{make_examples, Example};
use gvt2rpm::synthdata::{generate_clip, SynthPreset};
use gvt2rpm::ModelConfig;

/// The toy model of the planted-signal experiment: general configuration,
/// width 16, depths (1, 1, 2, 1).
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        base_width: 16,
        stage_depths: [1, 1, 2, 1],
        ..ModelConfig::general(true)
    }
}

/// `n` preprocessed single-window examples of simple-preset clips.
pub fn examples(cfg: &ModelConfig, n: u64) -> Vec<Example> {
    let [t, h, w] = cfg.input_dims;
    (0..n)
        .map(|s| {
            let lc = generate_clip(&SynthPreset::simple(), t.max(60), h, w, 30.0, s).expect("valid preset");
            make_examples(&format!("b{s}"), &lc.clip, &lc.trace, cfg).expect("clip fits the config").remove(0)
        })
        .collect()
}
