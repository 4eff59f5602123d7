//! Reverse-mode differentiation, gradient checking and the Adam optimizer.

mod adam;
mod gradcheck;
mod tape;

pub use adam::Adam;
pub use gradcheck::{away_from_zero, finite_diff_check, GradCheck};
pub use tape::{Tape, Var};
