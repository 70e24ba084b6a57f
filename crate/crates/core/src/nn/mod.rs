//! Dense tensors and a small fixed menu of layers with hand-written
//! backward passes. A party's network is one layer list split into an
//! embedding network and a decision network.

mod gradcheck;
mod layers;
mod loss;
mod network;
mod tensor;

pub use gradcheck::{finite_diff_gradient, finite_diff_scalar, relative_error};
pub use layers::{ImageShape, LayerSpec};
pub use loss::{accuracy, softmax_cross_entropy};
pub use network::{
    argmax_rows, backward_decision, backward_embedding, backward_full, forward_decision,
    forward_embedding, forward_full, Architecture, ForwardTrace, InputShape, LayerDescriptor,
    NetworkSpec, NetworkState, Part,
};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("forward trace does not belong to this network state")]
    StaleTrace,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid network: {0}")]
    InvalidSpec(String),
}
