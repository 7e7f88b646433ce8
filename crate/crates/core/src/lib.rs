//! Federated prompt learning over a frozen dual encoder, at desk scale.
//!
//! The crate is organised bottom-up:
//! [`tensor`] and [`layers`] provide the numerics, [`backbone`] the frozen
//! model and its file format, [`prompt`] and [`trainer`] the trainable
//! objectives, [`partition`] and [`federation`] the simulated clients and
//! server, [`cost`] and [`metrics`] the accounting, and [`experiment`] the
//! config-driven runner behind the `fpl` binary.

pub mod backbone;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod layers;
pub mod metrics;
pub mod partition;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
