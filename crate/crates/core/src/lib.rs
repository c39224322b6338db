//! Masked image modeling as a composable pipeline: a teacher produces
//! per-patch targets from the full image, a target normalisation is applied,
//! and a masked vision-transformer student with a linear head regresses those
//! targets at the masked positions.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod objective;
pub mod patch;
pub mod teacher;
pub mod train;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor};
