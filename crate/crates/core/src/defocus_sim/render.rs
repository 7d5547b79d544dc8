use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::types::{blur_radius, check_positive, CameraModel, DepthMap, DepthUnit, FocalStack, Scene};
use crate::error::{Error, Result};
use crate::imgcore::{convolve2d, gaussian_kernel, Border, Image, Precision};

pub const DEFAULT_LAYERS: usize = 16;

/// Per-pixel blur radius for a scene-unit depth map.
pub fn sigma_map(depth: &DepthMap, z_f: f64, blur_constant: f64) -> Result<Image> {
    if !(z_f > 0.0) || !z_f.is_finite() {
        return Err(Error::Invalid(format!("focus distance must be > 0, got {z_f}")));
    }
    if !(blur_constant > 0.0) || !blur_constant.is_finite() {
        return Err(Error::Invalid(format!(
            "blur constant must be > 0, got {blur_constant}"
        )));
    }
    check_positive(depth)?;
    Image::new(
        depth.height(),
        depth.width(),
        1,
        depth
            .values()
            .iter()
            .map(|&z| blur_radius(z, z_f, blur_constant))
            .collect(),
        Precision::Double,
    )
}

/// One depth bin of a layered render.
#[derive(Clone, Debug)]
pub struct DepthLayer {
    /// Mean blur radius over the bin's pixels.
    pub sigma: f64,
    /// 1 inside the bin, 0 elsewhere.
    pub mask: Image,
}

/// Splits the depth range into `layers` equal-width bins and returns the
/// non-empty ones, nearest first.
pub fn depth_layers(
    depth: &DepthMap,
    z_f: f64,
    blur_constant: f64,
    layers: usize,
) -> Result<Vec<DepthLayer>> {
    if layers == 0 {
        return Err(Error::Invalid("layer count must be >= 1".into()));
    }
    let sigmas = sigma_map(depth, z_f, blur_constant)?;
    let (lo, hi) = depth.min_max();
    let span = hi - lo;
    let bin_of = |z: f64| -> usize {
        if span <= 0.0 {
            0
        } else {
            (((z - lo) / span * layers as f64) as usize).min(layers - 1)
        }
    };
    let (h, w) = (depth.height(), depth.width());
    let mut sums = vec![0.0; layers];
    let mut counts = vec![0usize; layers];
    let mut masks = vec![vec![0.0; h * w]; layers];
    for (i, &z) in depth.values().iter().enumerate() {
        let b = bin_of(z);
        sums[b] += sigmas.data()[i];
        counts[b] += 1;
        masks[b][i] = 1.0;
    }
    masks
        .into_iter()
        .enumerate()
        .filter(|(b, _)| counts[*b] > 0)
        .map(|(b, mask)| {
            Ok(DepthLayer {
                sigma: sums[b] / counts[b] as f64,
                mask: Image::new(h, w, 1, mask, Precision::Double)?,
            })
        })
        .collect()
}

/// Normalized compositing weight of every layer at every pixel.
///
/// Each layer mask is blurred with its own kernel; the blurred mattes are
/// divided by their per-pixel sum so the weights form a partition of unity.
pub fn layer_weights(layers: &[DepthLayer]) -> Result<Vec<Image>> {
    let blurred = layers
        .iter()
        .map(|l| convolve2d(&l.mask, &gaussian_kernel(l.sigma)?, Border::Replicate))
        .collect::<Result<Vec<_>>>()?;
    let n = blurred.first().map_or(0, |b| b.len());
    let mut total = vec![0.0; n];
    for b in &blurred {
        for (t, v) in total.iter_mut().zip(b.data()) {
            *t += v;
        }
    }
    blurred
        .iter()
        .map(|b| {
            let data = b.data().iter().zip(&total).map(|(v, t)| v / t).collect();
            Image::new(b.height(), b.width(), 1, data, Precision::Double)
        })
        .collect()
}

/// Renders the slice focused at `z_f`.
///
/// Depth is cut into `layers` equal-width bins, each bin blurred with the
/// Gaussian of its mean blur radius and composited through normalized
/// blurred mattes. A scene whose depth falls in one bin is rendered as one
/// uniform convolution, so constant-depth scenes are exact.
pub fn render_slice(scene: &Scene, z_f: f64, camera: &CameraModel, layers: usize) -> Result<Image> {
    let parts = depth_layers(scene.depth(), z_f, camera.blur_constant(), layers)?;
    let aif = scene.aif();
    if parts.len() == 1 {
        return convolve2d(aif, &gaussian_kernel(parts[0].sigma)?, Border::Replicate);
    }
    let (h, w, ch) = (aif.height(), aif.width(), aif.channels());
    let mut numer = vec![0.0; h * w * ch];
    let mut denom = vec![0.0; h * w];
    for layer in &parts {
        let kernel = gaussian_kernel(layer.sigma)?;
        let content = Image::from_fn(h, w, ch, |y, x, c| aif.get(y, x, c) * layer.mask.get(y, x, 0))?;
        let content = convolve2d(&content, &kernel, Border::Replicate)?;
        let matte = convolve2d(&layer.mask, &kernel, Border::Replicate)?;
        for (n, v) in numer.iter_mut().zip(content.data()) {
            *n += v;
        }
        for (d, v) in denom.iter_mut().zip(matte.data()) {
            *d += v;
        }
    }
    for (i, n) in numer.iter_mut().enumerate() {
        *n /= denom[i / ch];
    }
    Image::new(h, w, ch, numer, aif.precision())
}

/// One slice per focus distance of `camera`, with ground truth attached.
pub fn render_stack(scene: &Scene, camera: &CameraModel, layers: usize) -> Result<FocalStack> {
    let slices = camera
        .focus_distances()
        .iter()
        .map(|&z_f| render_slice(scene, z_f, camera, layers))
        .collect::<Result<Vec<_>>>()?;
    FocalStack::new(slices, camera.clone())?
        .with_ground_truth(Some(scene.depth().clone()), Some(scene.aif().clone()))
}

/// Adds i.i.d. Gaussian noise to every slice sample and clamps to `[0, 1]`.
///
/// Slices draw from one ChaCha8 stream seeded with `seed`, in slice order.
pub fn add_noise(stack: &FocalStack, std: f64, seed: u64) -> Result<FocalStack> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Invalid(format!("noise std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(stack.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slices = Vec::with_capacity(stack.len());
    for s in stack.slices() {
        let data = s
            .data()
            .iter()
            .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        slices.push(Image::new(s.height(), s.width(), s.channels(), data, s.precision())?);
    }
    FocalStack::new(slices, stack.camera().clone())?
        .with_ground_truth(stack.gt_depth().cloned(), stack.gt_aif().cloned())
}

/// Constant-depth scene helper: the depth map every pixel of which is `z`.
pub fn constant_depth(height: usize, width: usize, z: f64) -> Result<DepthMap> {
    DepthMap::new(height, width, vec![z; height * width], DepthUnit::SceneUnits)
}
