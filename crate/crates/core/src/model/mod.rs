//! Generator, discriminators and their losses.

pub mod config;
pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod losses;
pub mod morphology;

pub use config::ModelConfig;
pub use discriminator::Discriminators;
pub use generator::{adain, GateOverride, Generator, SynthesisOutput};
pub use layers::BnMode;
pub use morphology::erode_background;
