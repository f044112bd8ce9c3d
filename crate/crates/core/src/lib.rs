//! Six-camera BEV training with single-front-camera inference: camera
//! geometry, synthetic scenes, the masking curriculum, a toy BEV encoder,
//! losses, nuScenes-style metrics and the training loop.

pub mod autograd;
pub mod bevmodel;
pub mod camgeom;
pub mod error;
pub mod losses;
pub mod maskcurriculum;
pub mod metrics;
pub mod scalar;
pub mod synthscene;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type BevModelF32 = bevmodel::BevModel<f32>;
pub type BevModelF64 = bevmodel::BevModel<f64>;
pub type CameraRigF64 = camgeom::CameraRig<f64>;
pub type TensorF32 = autograd::Tensor<f32>;
pub type TensorF64 = autograd::Tensor<f64>;
