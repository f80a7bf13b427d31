//! Dense arrays, a reverse-mode tape for the handful of layer kinds the
//! models need, softmax cross-entropy, momentum SGD and a central-difference
//! gradient checker.

mod array;
mod gradcheck;
mod loss;
mod optim;
mod params;
mod scalar;
pub(crate) mod tape;

pub use array::DenseArray;
pub use gradcheck::{finite_diff_check, Differentiable, GradCheckConfig};
pub use loss::{loss_and_grad, softmax, softmax_cross_entropy};
pub use optim::{Sgd, SgdConfig};
pub use params::{GradMap, ParamHandle, ParamId, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tape::{OpKind, Tape, TapeGrads, Var};
