//! Forward execution with activation caching, and reverse-mode propagation
//! of an output gradient back to a chosen layer. Only activation gradients
//! are computed; parameter gradients are never materialized.

mod backward;
mod forward;
pub mod gradcheck;
mod ops;
pub mod reference;

pub use backward::{backward_between, backward_to_layer};
pub use forward::{forward, forward_from, predict, ForwardTrace, Prediction};
pub use gradcheck::finite_diff_gradient;
pub use ops::{node_forward, node_vjp};
