//! Adversarial domain adaptation for extractive question answering over
//! ASR transcripts.
//!
//! A source model reads clean text, a target model reads noisy
//! transcripts, and the two share a configurable subset of their layers.
//! A Wasserstein critic with gradient penalty scores encoder outputs of
//! both domains, and the shared encoder is trained against it.
//!
//! - [`autodiff`]: tensors, the tape, Adam and finite-difference checks.
//! - [`model`]: the QANet-style reader and checkpoints.
//! - [`adversarial`]: layer tying, the critic, the losses and the trainer.
//! - [`data`]: SQuAD files, synthetic corpora and the ASR noise channel.
//! - [`eval`]: exact match and F1.
//! - [`run`]: configuration files and training runs.
//! - [`verify`]: gradient check suites.
//!
//! ```
//! use advqa::eval::f1;
//!
//! assert_eq!(f1("the red fox", &["a red fox".into()])?, 1.0);
//! # Ok::<(), advqa::Error>(())
//! ```

pub mod adversarial;
pub mod autodiff;
pub mod data;
pub mod eval;
mod error;
pub mod model;
pub mod run;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/adversarial.md")]
    mod adversarial {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/eval.md")]
    mod eval {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
