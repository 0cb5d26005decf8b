//! Minimal dense-tensor reverse-mode autodiff with the layers used by the
//! generative stack: MLP blocks, batch normalization, hard Gumbel-softmax,
//! and Adam.

pub mod adam;
pub mod gradcheck;
pub mod gumbel;
pub mod layers;
pub mod params;
pub mod tape;

pub use adam::Adam;
pub use gumbel::hard_gumbel_softmax;
pub use layers::{agg, BatchNorm, Linear, Mlp, WrappedMlp, BN_MOMENTUM, LEAKY_SLOPE};
pub use params::{apply_bn_updates, Checkpoint, Ctx, ParamStore};
pub use tape::{Grads, NodeId, Op, Tape};
