#![allow(dead_code)]

use oga_core::embedding::{generate_synthetic, EmbeddingSet, SyntheticSpec, TextClassifier};
use oga_core::harness::{ExperimentConfig, SyntheticSource};

/// Small fixture used for baseline numbers: K=5, d=16, 200 samples per class.
pub fn baseline_source() -> SyntheticSource {
    SyntheticSource {
        name: "baseline".into(),
        seed: 7,
        num_classes: 5,
        dim: 16,
        per_class: 200,
        dispersion: 0.3,
        text_noise: 0.1,
    }
}

/// Protocol fixture: K=20, d=32, 100 samples per class.
pub fn protocol_source() -> SyntheticSource {
    SyntheticSource {
        name: "protocol".into(),
        seed: 7,
        num_classes: 20,
        dim: 32,
        per_class: 100,
        dispersion: 0.3,
        text_noise: 0.15,
    }
}

pub fn generate(source: &SyntheticSource) -> (EmbeddingSet, TextClassifier) {
    let spec: SyntheticSpec = source.spec(oga_core::embedding::DEFAULT_TEMPERATURE);
    generate_synthetic(&spec).expect("fixture generation")
}

pub fn protocol_config() -> ExperimentConfig {
    ExperimentConfig::synthetic(protocol_source())
}
