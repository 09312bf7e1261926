//! Dense tensors, linear algebra, stable special functions and the
//! reverse-mode gradient engine.

mod fd;
pub mod linalg;
pub mod special;
pub mod tape;
mod tensor;

pub use fd::finite_diff_gradient;
pub use linalg::{inverse, logdet_lu, Lu, Sign};
pub use special::{log_std_normal, logsumexp, softmax, LN_2PI};
pub use tape::{gradient_of, GradTape, Var};
pub use tensor::Tensor;
