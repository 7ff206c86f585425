//! Multi-modal entailment classification and entailment-enhanced
//! image-text retrieval training, at desk scale.

pub mod augment;
pub mod datapipe;
pub mod diffcore;
pub mod encoders;
pub mod entailment;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod trainstrat;

pub use error::{Error, Result};
