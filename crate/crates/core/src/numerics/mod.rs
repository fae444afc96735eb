//! Dense `f64` tensors, a recording graph with reverse-mode gradients, and a
//! finite-difference checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use params::{Init, ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::{Mask, Tensor};
