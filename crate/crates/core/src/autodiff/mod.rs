//! Reverse-mode differentiation over dense tensors.
//!
//! [`Graph`] records primitive applications as they are evaluated and
//! replays them backward; [`ParamStore`] owns trainable arrays across graphs;
//! [`check_gradients`] compares tape gradients against central differences.

mod gradcheck;
mod graph;
mod lstm;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_sampled, ElementCheck, GradCheckReport};
pub use graph::{Graph, Var};
pub use lstm::{lstm_cell_step, LstmLayer, LstmStack, LstmState};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

