//! Dense tensors, a reverse-mode tape, parameter storage and the MLP / MPNN
//! building blocks used by the policy and the mean-field baselines.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::max_relative_error;
pub use layers::{LayerNorm, Linear, MessageGraph, Mlp, MpnnLayer, OutAct};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Checkpoint, Gradients, Init, NamedTensor, ParamId, ParamStore, CHECKPOINT_FORMAT};
pub use tape::{layer_norm, log_sum_exp, softmax, Tape, Var, LN_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
