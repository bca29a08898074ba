//! Dense matrix arithmetic, small linear algebra, and a reverse-mode
//! automatic differentiation tape. Everything downstream trains through this.

mod linalg;
mod matrix;
mod tape;

pub use linalg::{lu_factor, sym_eig_min, Lu};
pub use matrix::Matrix;
pub use tape::{finite_diff_check, Activation, NodeId, Tape};
