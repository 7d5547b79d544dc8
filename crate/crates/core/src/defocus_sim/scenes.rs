//! Built-in synthetic scenes.

use super::render::{constant_depth, render_stack};
use super::types::{CameraModel, DepthMap, DepthUnit, FocalStack, Scene};
use crate::error::{Error, Result};
use crate::imgcore::Image;

/// Checker cell size of the default synthetic texture, in pixels.
pub const CHECKER_CELL: usize = 2;

/// Gray checkerboard over a radial gradient, values in `[0.1, 0.9]`.
///
/// The checker is offset by half a cell so its period divides any even
/// size without an edge on the raster border, and the gradient peaks at
/// the center, which keeps the texture close to periodic.
pub fn synthetic_aif(height: usize, width: usize, cell: usize) -> Result<Image> {
    if cell == 0 {
        return Err(Error::Invalid("checker cell must be >= 1".into()));
    }
    let half = cell / 2;
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let r_max = (cy * cy + cx * cx).sqrt();
    Image::from_fn(height, width, 1, |y, x, _| {
        let checker = (((y + half) / cell) + ((x + half) / cell)) % 2;
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let radial = 1.0 - (dy * dy + dx * dx).sqrt() / r_max;
        0.1 + 0.5 * checker as f64 + 0.3 * radial
    })
}

/// Left half at `near`, right half at `far`.
pub fn step_depth(height: usize, width: usize, near: f64, far: f64) -> Result<DepthMap> {
    DepthMap::from_fn(height, width, DepthUnit::SceneUnits, |_, x| {
        if x < width / 2 {
            near
        } else {
            far
        }
    })
}

/// Depth rising linearly from `near` at the left edge to `far` at the right.
pub fn ramp_depth(height: usize, width: usize, near: f64, far: f64) -> Result<DepthMap> {
    let denom = (width.max(2) - 1) as f64;
    DepthMap::from_fn(height, width, DepthUnit::SceneUnits, |_, x| {
        near + (far - near) * x as f64 / denom
    })
}

pub fn step_scene(size: usize, near: f64, far: f64) -> Result<Scene> {
    Scene::new(synthetic_aif(size, size, CHECKER_CELL)?, step_depth(size, size, near, far)?)
}

pub fn ramp_scene(size: usize, near: f64, far: f64) -> Result<Scene> {
    Scene::new(synthetic_aif(size, size, CHECKER_CELL)?, ramp_depth(size, size, near, far)?)
}

/// Uniformly blurred copies of the synthetic AiF, one per `sigma`.
///
/// Realized as a constant-depth scene at `z = 1` with focus distances
/// `1 + sigma / C`, so every slice is an exact uniform Gaussian blur and
/// the manifest stays physically consistent.
pub fn uniform_blur_stack(size: usize, sigmas: &[f64], blur_constant: f64) -> Result<FocalStack> {
    if sigmas.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::Invalid("sigmas must be >= 0".into()));
    }
    let scene = Scene::new(synthetic_aif(size, size, CHECKER_CELL)?, constant_depth(size, size, 1.0)?)?;
    let camera = CameraModel::new(
        blur_constant,
        sigmas.iter().map(|s| 1.0 + s / blur_constant).collect(),
    )?;
    render_stack(&scene, &camera, 1)
}
