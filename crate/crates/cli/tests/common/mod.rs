use tpde::checkpoint::Checkpoint;
use tpde::netmodels::ModelConfig;
use tpde::training::{TrainConfig, Trainer};

/// Training config for a model small enough to edit in well under a second
/// per step.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        iterations: 2,
        resolution: 16,
        samples_per_ray: 8,
        model: ModelConfig {
            latent_dim: 8,
            generator_hidden: 16,
            channels: 4,
            resolution: 8,
            decoder_hidden: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Untrained two-latent checkpoint (`scene_0`, `scene_1`).
pub fn tiny_checkpoint() -> Checkpoint {
    Trainer::new(tiny_config(), 2).unwrap().into_checkpoint()
}
