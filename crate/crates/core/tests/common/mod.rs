#![allow(dead_code)]

use std::path::Path;

use ctc_distill::corpus::{synth_corpus, SynthConfig, SynthManifests};
use ctc_distill::trainer::{Dataset, PipelineConfig, Stage, TrainingConfig};

/// A corpus small enough for tests that train.
pub fn tiny_synth(train: usize, dev: usize) -> SynthConfig {
    SynthConfig {
        prototype_dim: 6,
        words: ["yes", "no", "stop", "all", "go"].iter().map(|w| w.to_string()).collect(),
        words_per_utterance: (1, 2),
        frames_per_char: (3, 4),
        noise_stddev: 0.3,
        train_utterances: train,
        dev_utterances: dev,
        seed: 5,
        ..SynthConfig::default()
    }
}

pub fn tiny_corpus(dir: &Path) -> SynthManifests {
    synth_corpus(&tiny_synth(24, 6), dir).unwrap()
}

pub fn tiny_data(m: &SynthManifests) -> Dataset {
    Dataset::load(&m.train, &m.dev, 3).unwrap()
}

pub fn tiny_stage(stage: Stage, m: &SynthManifests) -> TrainingConfig {
    TrainingConfig {
        stage,
        layers: 1,
        cells: 8,
        projection: 4,
        max_epochs: 2,
        learning_rate: 1e-3,
        train_manifest: Some(m.train.clone()),
        dev_manifest: Some(m.dev.clone()),
        ..TrainingConfig::default()
    }
}

pub fn tiny_pipeline(m: &SynthManifests) -> PipelineConfig {
    let text = format!(
        "train_manifest = {}\ndev_manifest = {}\nlayers = 1\ncells = 8\nprojection = 4\n\
         max_epochs = 2\nlearning_rate = 0.001\nfinetune.alpha = 0.05\n",
        m.train.display(),
        m.dev.display()
    );
    PipelineConfig::from_text(&text, "tiny").unwrap()
}
