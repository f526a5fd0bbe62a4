//! Variational recurrent models (VRMs) with a soft actor-critic controller for
//! partially observable continuous control.
//!
//! The agent learns two action-conditioned recurrent latent-variable models of
//! its environment. One is pre-trained on early experience and frozen, the
//! other keeps training. Their recurrent states, together with the current
//! observation, form the belief state that the actor and critics consume.

pub mod cli;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod replay;
pub mod rng;
pub mod sac;
pub mod trainer;
pub mod vrm;

pub use error::{Error, Result};
