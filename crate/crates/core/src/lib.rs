//! Semi-supervised image classification on a compact tensor core.

pub mod tensor;
pub mod model;
pub mod rng;
pub mod augment;
pub mod data;
pub mod ssl;
pub mod trainer;
