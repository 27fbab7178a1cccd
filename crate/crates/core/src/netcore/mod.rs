//! Minimal differentiable-network substrate: parameter stores, dense layers
//! (plain and null-space constrained), reverse-mode gradients, SGD.

pub mod checkpoint;
pub mod dense;
pub mod optim;
pub mod tape;

pub use dense::{
    assembled_weight, forward, init_params, tape_apply, tape_layers, Activation, DenseNetSpec, FrozenNet, NetGrad,
    NetTape, ParamStore, ParamVars, Wrt, EPS_W,
};
pub use optim::{clip_global_norm, sgd_step, step_lr};
pub use tape::{loose_saturation, tanh, GradTape, Grads, Var};

/// Gradient of the scalar output recorded in `tape`.
pub fn grad(tape: &NetTape, wrt: Wrt) -> crate::error::Result<NetGrad> {
    tape.grad(wrt)
}
