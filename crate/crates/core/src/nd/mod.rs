//! Dense tensors, a define-by-run autodiff tape, and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck, ParamSet};
pub use tape::{pearson, CustomBackward, Tape, Var, LAYER_NORM_EPS, PCC_EPS};
pub use tensor::Tensor;
