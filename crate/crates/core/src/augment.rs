//! Focal-stack augmentation: directional Laplacian focus measure,
//! softmax-weighted all-in-focus estimate, and energy-of-difference maps.
//!
//! For slices `I_z` the augmented stack is `(I_1..I_Z, S, E_1..E_Z)` with
//! `S = sum_z softmax_z(F_z / T) * I_z` and `E_z = (I_z - S)^2`, all per
//! channel.

use crate::defocus_sim::FocalStack;
use crate::error::{Error, Result};
use crate::imgcore::{convolve2d, Border, Image, Kernel2D, Precision};

/// Second-difference kernels at 0, 45, 90 and 135 degrees.
///
/// The diagonal kernels carry a factor 1/2 for the squared `sqrt(2)`
/// sample spacing, so a pure second derivative reads the same along every
/// orientation.
pub fn directional_kernels() -> [Kernel2D; 4] {
    let k0 = Kernel2D::from_rows3([[0.0, 0.0, 0.0], [1.0, -2.0, 1.0], [0.0, 0.0, 0.0]]);
    let k45 = Kernel2D::from_rows3([[0.0, 0.0, 0.5], [0.0, -1.0, 0.0], [0.5, 0.0, 0.0]]);
    let k90 = k0.transpose();
    let k135 = Kernel2D::from_rows3([[0.5, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.5]]);
    [k0, k45, k90, k135]
}

/// Nonnegative per-channel focus response of one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusMeasureMap(Image);

impl FocusMeasureMap {
    pub fn new(img: Image) -> Result<Self> {
        if img.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("focus measure must be nonnegative".into()));
        }
        Ok(FocusMeasureMap(img))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }
}

/// `F(p) = sum_theta |img * K_theta|(p)`, per channel, replicate border.
pub fn directional_fm(img: &Image) -> Result<FocusMeasureMap> {
    let mut acc = vec![0.0; img.len()];
    for k in directional_kernels() {
        let response = convolve2d(img, &k, Border::Replicate)?;
        for (a, r) in acc.iter_mut().zip(response.data()) {
            *a += r.abs();
        }
    }
    Ok(FocusMeasureMap(Image::new(
        img.height(),
        img.width(),
        img.channels(),
        acc,
        img.precision(),
    )?))
}

/// 3x3 box mean, replicate border.
pub fn box_smooth3(img: &Image) -> Result<Image> {
    let k = Kernel2D::new(1, vec![1.0 / 9.0; 9])?;
    convolve2d(img, &k, Border::Replicate)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AifOptions {
    /// Softmax temperature applied to the focus measures.
    pub temperature: f64,
    /// Smooth each focus measure with a 3x3 mean before the softmax.
    pub smooth: bool,
}

impl Default for AifOptions {
    fn default() -> Self {
        AifOptions {
            temperature: 1.0,
            smooth: false,
        }
    }
}

/// Softmax fusion result.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub aif: Image,
    /// One weight map per slice, same shape as the slices.
    pub weights: Vec<Image>,
}

/// Fuses `slices` with weights `softmax_z(focus[z] / temperature)` taken
/// independently at every pixel and channel.
pub fn softmax_fusion(slices: &[Image], focus: &[Image], temperature: f64) -> Result<Fusion> {
    if slices.len() < 2 {
        return Err(Error::Invalid(format!(
            "fusion needs at least 2 slices, got {}",
            slices.len()
        )));
    }
    if focus.len() != slices.len() {
        return Err(Error::Invalid("one focus map per slice required".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Invalid(format!("temperature must be > 0, got {temperature}")));
    }
    for (s, f) in slices.iter().zip(focus) {
        slices[0].check_same_shape(s, "fusion slices")?;
        slices[0].check_same_shape(f, "fusion focus maps")?;
    }
    let n = slices[0].len();
    let z = slices.len();
    let mut aif = vec![0.0; n];
    let mut weights = vec![vec![0.0; n]; z];
    let mut w = vec![0.0; z];
    for i in 0..n {
        let max = focus.iter().map(|f| f.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (k, f) in focus.iter().enumerate() {
            w[k] = ((f.data()[i] - max) / temperature).exp();
            total += w[k];
        }
        let mut acc = 0.0;
        for k in 0..z {
            let wk = w[k] / total;
            weights[k][i] = wk;
            acc += wk * slices[k].data()[i];
        }
        aif[i] = acc;
    }
    let (h, wd, c, p) = (
        slices[0].height(),
        slices[0].width(),
        slices[0].channels(),
        slices[0].precision(),
    );
    Ok(Fusion {
        aif: Image::new(h, wd, c, aif, p)?,
        weights: weights
            .into_iter()
            .map(|d| Image::new(h, wd, c, d, Precision::Double))
            .collect::<Result<_>>()?,
    })
}

/// Focus maps of every slice, optionally box-smoothed.
pub fn focus_measures(stack: &FocalStack, smooth: bool) -> Result<Vec<Image>> {
    stack
        .slices()
        .iter()
        .map(|s| {
            let fm = directional_fm(s)?.into_image();
            if smooth {
                box_smooth3(&fm)
            } else {
                Ok(fm)
            }
        })
        .collect()
}

/// AiF estimate with its per-slice weights.
pub fn fuse_stack(stack: &FocalStack, opts: &AifOptions) -> Result<Fusion> {
    let focus = focus_measures(stack, opts.smooth)?;
    softmax_fusion(stack.slices(), &focus, opts.temperature)
}

pub fn estimate_aif(stack: &FocalStack, opts: &AifOptions) -> Result<Image> {
    fuse_stack(stack, opts).map(|f| f.aif)
}

/// `E(p) = (slice(p) - aif(p))^2`, per channel.
pub fn eod_map(slice: &Image, aif: &Image) -> Result<Image> {
    slice.check_same_shape(aif, "eod")?;
    slice.zip_map(aif, |a, b| (a - b) * (a - b))
}

/// Rec. 601 luma of a gray or RGB image.
pub fn luminance(img: &Image) -> Result<Image> {
    match img.channels() {
        1 => Ok(img.clone()),
        _ => Image::from_fn(img.height(), img.width(), 1, |y, x, _| {
            0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2)
        })
        .map(|l| l.with_precision(img.precision())),
    }
}

/// EOD of the luma difference, broadcast back to every channel.
pub fn eod_map_luminance(slice: &Image, aif: &Image) -> Result<Image> {
    slice.check_same_shape(aif, "eod")?;
    let e = eod_map(&luminance(slice)?, &luminance(aif)?)?;
    let c = slice.channels();
    Image::from_fn(slice.height(), slice.width(), c, |y, x, _| e.get(y, x, 0))
        .map(|img| img.with_precision(slice.precision()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EodMode {
    #[default]
    PerChannel,
    Luminance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentOptions {
    pub aif: AifOptions,
    pub eod: EodMode,
}

/// Which part of the augmented stack a component image is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Slice(usize),
    Aif,
    Eod(usize),
}

/// Input slices with their AiF estimate and EOD maps.
#[derive(Clone, Debug)]
pub struct AugmentedStack {
    slices: Vec<Image>,
    aif: Image,
    eods: Vec<Image>,
    focus_distances: Vec<f64>,
}

impl AugmentedStack {
    pub fn new(slices: Vec<Image>, aif: Image, eods: Vec<Image>, focus_distances: Vec<f64>) -> Result<Self> {
        if slices.len() < 2 || eods.len() != slices.len() || focus_distances.len() != slices.len() {
            return Err(Error::Invalid(format!(
                "augmented stack needs Z >= 2 slices, Z eods and Z focus distances (got {}, {}, {})",
                slices.len(),
                eods.len(),
                focus_distances.len()
            )));
        }
        for img in slices.iter().chain(&eods) {
            aif.check_same_shape(img, "augmented stack")?;
        }
        if eods.iter().any(|e| e.data().iter().any(|&v| v < 0.0)) {
            return Err(Error::Invalid("eod values must be nonnegative".into()));
        }
        Ok(AugmentedStack {
            slices,
            aif,
            eods,
            focus_distances,
        })
    }

    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }

    pub fn height(&self) -> usize {
        self.aif.height()
    }

    pub fn width(&self) -> usize {
        self.aif.width()
    }

    pub fn channels(&self) -> usize {
        self.aif.channels()
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn aif(&self) -> &Image {
        &self.aif
    }

    pub fn eods(&self) -> &[Image] {
        &self.eods
    }

    pub fn focus_distances(&self) -> &[f64] {
        &self.focus_distances
    }

    /// All `2Z + 1` images in concatenation order: slices, AiF, EODs.
    pub fn components(&self) -> Vec<(Component, &Image)> {
        let mut out: Vec<(Component, &Image)> = Vec::with_capacity(2 * self.slices.len() + 1);
        out.extend(self.slices.iter().enumerate().map(|(i, s)| (Component::Slice(i), s)));
        out.push((Component::Aif, &self.aif));
        out.extend(self.eods.iter().enumerate().map(|(i, e)| (Component::Eod(i), e)));
        out
    }

    /// Per-slice channel stack `cat(I_z, S, E_z)`: `Z x 3C x H x W` values,
    /// slice-major then channel then row.
    pub fn per_slice_channels(&self) -> (usize, usize, usize, usize, Vec<f64>) {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let z = self.slices.len();
        let mut data = Vec::with_capacity(z * 3 * c * h * w);
        for k in 0..z {
            for img in [&self.slices[k], &self.aif, &self.eods[k]] {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            data.push(img.get(y, x, ch));
                        }
                    }
                }
            }
        }
        (z, 3 * c, h, w, data)
    }
}

pub fn augment_stack(stack: &FocalStack, opts: &AugmentOptions) -> Result<AugmentedStack> {
    let aif = estimate_aif(stack, &opts.aif)?;
    let eods = stack
        .slices()
        .iter()
        .map(|s| match opts.eod {
            EodMode::PerChannel => eod_map(s, &aif),
            EodMode::Luminance => eod_map_luminance(s, &aif),
        })
        .collect::<Result<Vec<_>>>()?;
    AugmentedStack::new(stack.slices().to_vec(), aif, eods, stack.focus_distances().to_vec())
}
