//! Domain-adversarial training of a source/target model pair.
//!
//! A [`Discriminator`] scores encoder outputs; it minimises `L_dis`
//! while the adversarial layers minimise `L_enc = L_qa − λ_G·L_dis` and
//! every other layer minimises `L_qa`. [`AdversarialTrainer`] alternates
//! the two phases.

mod discriminator;
mod loss;
mod training;
mod tying;

pub use discriminator::{Conv1d, Discriminator, DiscriminatorConfig, ResidualBlock};
pub use loss::{
    dis_loss, enc_loss, enc_loss_node, example_dis_term, gradient_penalty, AdversarialMode, LossBundle,
    PROB_CLAMP,
};
pub use training::{attach_features, AdversarialConfig, AdversarialTrainer, Features};
pub use tying::{tie_layers, GanAttach, PairedModel, TyingConfig, STUDIED_TYINGS};
