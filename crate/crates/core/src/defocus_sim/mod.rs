//! Thin-lens defocus simulation.
//!
//! A scene is an all-in-focus image plus a positive depth map. The blur
//! radius of a point at depth `z` seen with focus at `z_f` is
//! `|z - z_f| / z * C` pixels, where `C` folds aperture and focal length
//! together. Spatially varying blur is approximated by cutting depth into
//! equal-width layers, blurring each layer (and its matte) with a Gaussian,
//! and compositing with normalized mattes.

mod render;
mod scenes;
mod types;

pub use render::{
    add_noise, constant_depth, depth_layers, layer_weights, render_slice, render_stack, sigma_map,
    DepthLayer, DEFAULT_LAYERS,
};
pub use scenes::{
    ramp_depth, ramp_scene, step_depth, step_scene, synthetic_aif, uniform_blur_stack, CHECKER_CELL,
};
pub use types::{blur_radius, CameraModel, DepthMap, DepthUnit, FocalStack, Scene};
