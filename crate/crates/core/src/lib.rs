//! Online controller adaptation with meta-learned performance models.
//!
//! A basis network maps controller gains, a task encoding and a short history
//! of measurements and inputs to a matrix `Φ`; performance metrics are
//! predicted as `Φ w` with a Gaussian belief over the last-layer weights `w`.
//! The belief is adapted online with an identity-dynamics Kalman filter whose
//! prior and noise covariances are meta-learned by differentiating through the
//! filter. The adapted model scores candidate gains in a particle random
//! search.
//!
//! Module map:
//!
//! - [`numkernel`]: dense matrices and the reverse-mode tape
//! - [`perfmodel`]: basis network, weight belief, checkpoints
//! - [`adapt`]: Kalman update of the weight belief
//! - [`metatrain`]: pretraining and meta-training
//! - [`gainopt`]: uncertainty-aware acquisition and particle search
//! - [`envs`]: Branin, Hartmann and the 2D race car
//! - [`harness`]: dataset generation, online sessions, aggregation, CLI plumbing
//!
//! The `book/` directory next to the workspace root walks through each piece.

pub mod adapt;
pub mod envs;
pub mod gainopt;
pub mod harness;
pub mod metatrain;
pub mod numkernel;
pub mod perfmodel;

mod codec;
mod error;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    pub mod tape {}
    #[doc = include_str!("../../../book/src/basis_model.md")]
    pub mod basis_model {}
    #[doc = include_str!("../../../book/src/kalman.md")]
    pub mod kalman {}
    #[doc = include_str!("../../../book/src/meta_training.md")]
    pub mod meta_training {}
    #[doc = include_str!("../../../book/src/gain_search.md")]
    pub mod gain_search {}
    #[doc = include_str!("../../../book/src/environments.md")]
    pub mod environments {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
