//! Minimal neural-network engine: masked convolutions, ReLU, a recorded
//! computation graph with exact gradients, Adam and finite differences.

mod graph;
mod layer;
mod optim;

pub use graph::{mse_loss, Gradients, Graph, NodeId, ParamSet};
pub use layer::{conv2d_same, conv2d_same_input_grad, conv2d_same_weight_grad, relu, ConvLayer};
pub use optim::{adam_step, decayed_rate, finite_diff, finite_diff_grad, AdamConfig, AdamState};
