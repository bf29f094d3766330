//! Dense tensors with reverse-mode gradients, learned blocks and Adam.

mod gradcheck;
mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_params};
pub use nn::{
    loss_focal_binary, loss_smooth_l1, maxpool_set, Activation, Linear, Mlp, MlpSpec, TransformerLayer,
    TransformerLayerSpec,
};
pub use optim::OptimizerState;
pub use params::{load_into, read_checkpoint, write_checkpoint, Param, ParamId, ParamStore};
pub use tape::{focal_value, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
