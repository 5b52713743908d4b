//! The CNN + Inception + LSTM sequence model.

pub mod checkpoint;
mod config;
pub mod model;
mod params;
mod sequence;

pub use config::{ConvSpec, HeadKind, InceptionSpec, NetworkConfig, STEERING_SCALE_DEG};
pub use model::{
    assemble_input, build_graph, build_spatial, classify, decide, forward, forward_batch, forward_with_maps,
    frame_features, BatchOutput, ForwardOutput, Graph, ParamVars,
};
pub use params::{
    init_hidden_random, init_parameters, param_specs, xavier_bound, ParamGroup, ParamSpec, Parameters, HIDDEN_NOISE_STD,
};
pub use sequence::{Frames, HiddenState, ImageSequence, Label, LayerState, Target};

pub use checkpoint::{load_checkpoint, save_checkpoint};

use thiserror::Error;

use crate::container::ContainerError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: String },
    #[error("head mismatch: {0}")]
    HeadMismatch(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}
