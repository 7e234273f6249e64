//! Numerical substrate: matrices, masks, seeded randomness and a gradient tape.

mod gradcheck;
mod mask;
mod matrix;
mod rng;
mod tape;

pub use gradcheck::grad_check;
pub use mask::{masked_where, SparseMask};
pub use matrix::{Matrix, Matrix2D, Scalar};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var, RMS_EPS};
