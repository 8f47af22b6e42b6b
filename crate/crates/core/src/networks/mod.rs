//! Denoising networks, their parameters and the training loop.

pub mod object;
pub mod params;
pub mod scene;
pub mod train;

pub use object::{ObjectCondition, ObjectDenoiserConfig, ObjectSample};
pub use params::{Init, ParamStore};
pub use scene::{ControlFeatures, SceneNetConfig};
pub use train::{train, Adam, TrainConfig, TrainReport};
