//! Dense tensors, feed-forward networks with hand-written reverse mode, and
//! the Adam optimizer. Every learned model in the crate is built from these.

mod adam;
mod mlp;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use mlp::{Activation, Dense, ForwardCache, Gradients, Mlp};
pub use tensor::Tensor;
