//! End-to-end generator, T-PatchGAN discriminator, losses and toy training.

pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod generator;
pub mod loss;
pub mod optim;
pub mod train;

pub use config::{AdamConfig, DiscriminatorConfig, GeneratorConfig, LossWeights};
pub use discriminator::{discriminate, discriminator_specs};
pub use generator::{encode, generate, generator_param_count, generator_specs, GeneratorOutput, SpectralState};
pub use loss::{loss_gan, loss_reconstruction, total_loss, total_loss_value};
pub use optim::Adam;
pub use train::{init_discriminator, init_generator, train_toy, TraceRow, TrainConfig, TrainOutcome};
