//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Trace`] records forward operations; [`Trace::backward`] sweeps them in
//! reverse. Model weights live in a [`ParamStore`] and enter a trace through
//! [`Trace::param`]; gradients are routed back with
//! [`Trace::accumulate_into`] and consumed by an [`OptimizerState`].
//!
//! ```
//! use wst_autograd::{Matrix, Trace};
//!
//! let mut t = Trace::new();
//! let x = t.variable(Matrix::row_vector(vec![3.0]));
//! let sq = t.mul(x, x).unwrap();
//! let loss = t.sum(sq);
//! t.backward(loss).unwrap();
//! assert_eq!(t.grad(x).unwrap(), &[6.0]);
//! ```

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod trace;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use error::{Result, TensorError};
pub use gradcheck::{
    check_input_gradient, finite_difference_check, finite_difference_check_with, relative_error, GradCheckReport, Stencil,
};
pub use matrix::{argmax, Matrix, Shape};
pub use optim::{clip_gradients, OptimizerState, StepReport, UpdateRule};
pub use params::{Init, Param, ParamId, ParamStore, StoreId, Tensor};
pub use trace::{softmax_rows, Trace, Var};
