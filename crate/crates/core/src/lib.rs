//! Cross-view affordance grounding at desk scale.
//!
//! The crate learns where an object affords an action from image-level
//! labels only. Exocentric images (people using an object) and egocentric
//! images (the object alone) share a small convolutional backbone; a
//! non-negative factorization mines interaction-invariant structure from a
//! group of exocentric views, and that knowledge is transferred to the
//! egocentric branch through a feature alignment loss and a class
//! co-relation loss. At test time a class activation map over the
//! egocentric features localizes the affordance region.

pub mod ablate;
pub mod aim;
pub mod autodiff;
pub mod cam;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
