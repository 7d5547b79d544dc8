//! A toy-scale learned depth refiner with hand-written backpropagation.
//!
//! Pipeline: a four-stage strided encoder is applied to every augmented
//! slice, each feature volume passes a residual 3-D decoder to a one-channel
//! volume `R_n`, the upsampled `R_n` are fused by a 3-D convolution and a
//! mean over slices into `G`, and a multi-level ConvGRU refines a
//! soft-argmax initial depth through residual updates
//! `D_t = D_{t-1} + Delta D_t`, each convex-upsampled to full resolution.
//!
//! All arithmetic is `f64`. Parameters are drawn uniformly in
//! `+-1/sqrt(fan_in)` from a ChaCha8 stream seeded with
//! [`RefinerConfig::seed`].

mod config;
pub mod gradcheck;
mod model;
mod params;
mod tape;
mod tensor;
mod train;

pub use config::RefinerConfig;
pub use gradcheck::{grad_check, grad_check_all, GradCheckRow, GradTarget};
pub use model::{
    decode_volume, encode_features, forward, fuse_volume, gru_input_channels, gru_params, gru_step,
    parameter_layout, refine_depth, stack_tensor, Forward, Prediction, Refinement, Refiner, DECODER_BLOCKS,
    MIN_INPUT_SIDE,
};
pub use params::{Bound, Params, TensorGrad, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{conv2d_forward, conv3d_forward, convex_upsample_forward, loss_weights, resize_forward, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{train_from, train_overfit, TrainReport, MAX_OVERFIT_SIDE};
