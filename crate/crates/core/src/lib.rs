//! Constraint-guided visual question generation trained with modality-specific
//! contrastive margins, on a synthetic grid-world.

mod error;

pub mod auxiliary;
pub mod checkpoint;
pub mod constraints;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod toyworld;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
