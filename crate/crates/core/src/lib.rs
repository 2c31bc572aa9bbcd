//! Latent-variable generative modeling with a diffusion prior.
//!
//! A time-dependent Gaussian encoder `q_t(z | x_t)` is combined with a
//! pretrained unconditional score model through Bayes' rule for scores,
//!
//! ```text
//! ∇ ln p(x_t | z) = ∇ ln p(z | x_t) + ∇ ln p(x_t)
//! ```
//!
//! which yields a conditional score that drives a reverse-time SDE from
//! noise to a reconstruction of the encoded sample. The prior is trained
//! first and frozen; only the encoder (and optionally a residual corrector)
//! is trained afterwards.
//!
//! Module map:
//!
//! - [`diffproc`]: forward process, perturbation kernel, reverse sampler
//! - [`ndiff`]: matrices, dense networks, reverse-mode differentiation
//! - [`models`]: score model, time-dependent encoder, corrector, VAE decoder
//! - [`compose`]: the Bayes-rule score composition and reconstruction
//! - [`objectives`]: every training loss and the likelihood bound
//! - [`oracle`]: a linear-Gaussian world where every score is closed-form
//! - [`data`]: toy generators and the IDX container
//! - [`harness`]: configs, training loops, checkpoints, evaluation

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod compose;
pub mod data;
pub mod diffproc;
mod error;
pub mod harness;
pub mod models;
pub mod ndiff;
pub mod objectives;
pub mod oracle;
pub mod random;

pub use error::{Error, Result};
pub use ndiff::Mat;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/forward-process.md")]
    mod forward_process {}
    #[doc = include_str!("../../../book/src/differentiation.md")]
    mod differentiation {}
    #[doc = include_str!("../../../book/src/composition.md")]
    mod composition {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
