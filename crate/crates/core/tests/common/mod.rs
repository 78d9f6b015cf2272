#![allow(dead_code)]

use mminr::model::decoder::DecoderConfig;
use mminr::model::encoder::EncoderConfig;
use mminr::model::kd::AttentionConfig;
use mminr::model::{ModelConfig, Preset};
use mminr::synth::{generate_phantom, PatchConfig, PhantomSpec, Subject};
use mminr::train::adam::AdamConfig;
use mminr::train::losses::LossWeights;
use mminr::train::{Setup, TrainConfig};

pub fn subject(seed: u64, n: usize) -> Subject {
    let p = generate_phantom(&PhantomSpec { grid_shape: [n; 3], seed, ..PhantomSpec::default() }).unwrap();
    Subject::new(format!("s{seed}"), p.t1, p.t2, p.seg).unwrap()
}

/// A model and schedule small enough for thousands of steps per second.
pub fn tiny_setup(preset: Preset, seed: u64) -> Setup {
    Setup {
        model: ModelConfig {
            encoder: EncoderConfig { channels: 4, blocks: 1, layers: 1, growth: 2, global_conv: false, ..EncoderConfig::default() },
            attention: AttentionConfig { pool_factor: [4, 4, 4], ..AttentionConfig::default() },
            decoder: DecoderConfig { hidden: 8, layers: 2, ..DecoderConfig::default() },
            pe_bands: 2,
            seed,
            ..ModelConfig::default()
        },
        weights: LossWeights { toggles: preset.toggles(), ..LossWeights::default() },
        train: TrainConfig {
            adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            batch_size: 2,
            iterations: 50,
            coords_per_patch: 64,
            seed,
            val_every: 10,
            val_patches: 1,
            patch: PatchConfig { patch_shape: [8, 8, 8], foreground_threshold: 0.0, ..PatchConfig::default() },
            ..TrainConfig::default()
        },
        ..Setup::default()
    }
}
