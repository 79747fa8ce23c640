//! Multimodal entity linking with text, visual and cross-modal interaction units.
//!
//! Mentions and entities are encoded into global and local text/image
//! features by a shared backend, scored by three parallel interaction units
//! (text global-local, dual-gated visual, cross-modal fusion), trained with a
//! unit-consistent in-batch contrastive objective and evaluated by ranking
//! every knowledge-base entity.

pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod interaction;
pub mod nn;
pub mod objective;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
