//! Minimal reverse-mode differentiable array engine.

mod array;
mod flops;
pub mod gradcheck;
mod ops;
mod rng;
mod tape;

pub use array::Array;
pub use flops::{FlopCounter, FlopScope};
pub use ops::LAYER_NORM_EPS;
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};

pub mod flop_costs {
    pub use super::flops::{
        ADD_PER_ELEM, AFFINE_PER_ELEM, CLAMP_PER_ELEM, CROSS_ENTROPY_PER_LOGIT, CUMSUM_PER_ELEM, GELU_PER_ELEM,
        LAYER_NORM_PER_ELEM, MUL_PER_ELEM, SOFTMAX_PER_ELEM, SUM_PER_ELEM,
    };
}
