//! Network building blocks and the reconstruction model.

pub mod checkpoint;
pub mod complex;
pub mod crunet;
pub mod im2col;
pub mod layers;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod sme;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use complex::{CTensor, Fourier};
pub use crunet::{CascadeFeatureStore, CrunetBlock};
pub use model::{Model, ModelConfig, ModelInput, ModelOutput};
pub use params::{Builder, ParamStore};
