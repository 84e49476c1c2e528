//! Dense tensors, reverse-mode differentiation, optimizer and numeric I/O.

pub mod gradcheck;
pub mod param;
pub mod rng;
pub mod rtf;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckReport, Stencil};
pub use param::{Adam, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, l2_normalize, softmax_rows, Real, Tensor, NORM_EPS};
