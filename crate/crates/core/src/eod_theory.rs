//! Energy-of-difference under Gaussian blur, in the frequency and the
//! spatial domain.
//!
//! With `H(u, v) = exp(-2 pi^2 sigma^2 (u^2 + v^2))` (frequencies in cycles
//! per pixel), the total squared difference between an image and its blur is
//!
//! ```text
//! E(sigma) = 1/(H W) * sum_{u,v} |S(u,v)|^2 (1 - H(u,v))^2
//! ```
//!
//! which is nondecreasing in `sigma` bin by bin and zero at `sigma = 0`.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::directional_fm;
use crate::error::{Error, Result};
use crate::imgcore::{dft2d, gaussian_blur, idft2d, Image, Spectrum};

/// Gaussian transfer function at squared radial frequency `w`.
#[inline]
pub fn gaussian_transfer(sigma: f64, w: f64) -> f64 {
    (-2.0 * PI * PI * sigma * sigma * w).exp()
}

fn check_args(img: &Image, sigma: f64) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::Channels(img.channels()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// EOD energy from the spectrum of `aif` alone.
pub fn spectral_eod_energy(aif: &Image, sigma: f64) -> Result<f64> {
    check_args(aif, sigma)?;
    if sigma == 0.0 {
        return Ok(0.0);
    }
    Ok(spectral_energy_of(&dft2d(aif)?, sigma))
}

fn spectral_energy_of(spec: &Spectrum, sigma: f64) -> f64 {
    let n = (spec.height() * spec.width()) as f64;
    let weighted = spec.scale_by(|fu, fv| 1.0 - gaussian_transfer(sigma, fu * fu + fv * fv));
    weighted.energy() / n
}

/// Circular Gaussian blur applied through the DFT.
pub fn circular_blur(img: &Image, sigma: f64) -> Result<Image> {
    check_args(img, sigma)?;
    let spec = dft2d(img)?.scale_by(|fu, fv| gaussian_transfer(sigma, fu * fu + fv * fv));
    idft2d(&spec)
}

/// `sum_p (blur(aif) - aif)^2` with the blur done as a circular convolution.
pub fn spatial_eod_energy(aif: &Image, sigma: f64) -> Result<f64> {
    check_args(aif, sigma)?;
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let blurred = circular_blur(aif, sigma)?;
    Ok(blurred
        .data()
        .iter()
        .zip(aif.data())
        .map(|(b, s)| (b - s) * (b - s))
        .sum())
}

/// Same energy with the truncated spatial kernel and replicate border.
pub fn truncated_eod_energy(aif: &Image, sigma: f64) -> Result<f64> {
    check_args(aif, sigma)?;
    let blurred = gaussian_blur(aif, sigma)?;
    Ok(blurred
        .data()
        .iter()
        .zip(aif.data())
        .map(|(b, s)| (b - s) * (b - s))
        .sum())
}

/// Upper bound on the energy: all non-DC spectral energy over `H W`.
pub fn eod_energy_bound(aif: &Image) -> Result<f64> {
    check_args(aif, 0.0)?;
    let spec = dft2d(aif)?;
    let n = (spec.height() * spec.width()) as f64;
    Ok((spec.energy() - spec.get(0, 0).norm_sqr()) / n)
}

/// EOD and focus-measure response of an image across blur levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    pub sigmas: Vec<f64>,
    pub eod_energy: Vec<f64>,
    /// Mean directional Laplacian focus measure of the blurred image.
    pub fm_energy: Vec<f64>,
}

impl EnergyCurve {
    pub fn eod_strictly_increasing(&self) -> bool {
        self.eod_energy.windows(2).all(|w| w[1] > w[0])
    }

    pub fn fm_strictly_decreasing(&self) -> bool {
        self.fm_energy.windows(2).all(|w| w[1] < w[0])
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "sigma,eod_energy,fm_energy")?;
        for i in 0..self.sigmas.len() {
            writeln!(
                out,
                "{},{},{}",
                self.sigmas[i], self.eod_energy[i], self.fm_energy[i]
            )?;
        }
        Ok(())
    }
}

pub fn energy_curve(aif: &Image, sigmas: &[f64]) -> Result<EnergyCurve> {
    if sigmas.len() < 2 {
        return Err(Error::Invalid("energy curve needs at least 2 sigmas".into()));
    }
    if sigmas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("sigmas must be strictly increasing".into()));
    }
    check_args(aif, sigmas[0])?;
    let spec = dft2d(aif)?;
    let mut eod_energy = Vec::with_capacity(sigmas.len());
    let mut fm_energy = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        eod_energy.push(if s == 0.0 { 0.0 } else { spectral_energy_of(&spec, s) });
        let blurred = gaussian_blur(aif, s)?;
        fm_energy.push(directional_fm(&blurred)?.image().mean());
    }
    Ok(EnergyCurve {
        sigmas: sigmas.to_vec(),
        eod_energy,
        fm_energy,
    })
}

/// Summary emitted by the `verify` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub monotone_eod: bool,
    pub monotone_fm_decreasing: bool,
    pub parseval_max_rel_err: f64,
}

/// Largest relative gap between the spatial and spectral energies over
/// `sigmas` (zero-energy pairs must agree exactly).
pub fn parseval_max_rel_err(aif: &Image, sigmas: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &s in sigmas {
        let spectral = spectral_eod_energy(aif, s)?;
        let spatial = spatial_eod_energy(aif, s)?;
        let err = if spectral == 0.0 && spatial == 0.0 {
            0.0
        } else {
            (spatial - spectral).abs() / spectral.abs().max(spatial.abs())
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn verify(aif: &Image, sigmas: &[f64]) -> Result<(EnergyCurve, Verdict)> {
    let curve = energy_curve(aif, sigmas)?;
    let verdict = Verdict {
        monotone_eod: curve.eod_strictly_increasing(),
        monotone_fm_decreasing: curve.fm_strictly_decreasing(),
        parseval_max_rel_err: parseval_max_rel_err(aif, sigmas)?,
    };
    Ok((curve, verdict))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defocus_sim::{synthetic_aif, CHECKER_CELL};
    use crate::test_util::random_image;

    const FIG1_SIGMAS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

    #[test]
    fn zero_blur_zero_energy() {
        let img = random_image(8, 8, 1, 0);
        assert_eq!(spectral_eod_energy(&img, 0.0).unwrap(), 0.0);
        assert_eq!(spatial_eod_energy(&img, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_image_has_no_energy() {
        let img = Image::filled(8, 8, 1, 0.6);
        for s in [0.5, 1.0, 3.0] {
            assert!(spectral_eod_energy(&img, s).unwrap().abs() < 1e-20);
        }
    }

    #[test]
    fn rejects_color_and_negative_sigma() {
        assert!(spectral_eod_energy(&Image::zeros(4, 4, 3), 1.0).is_err());
        assert!(spatial_eod_energy(&Image::zeros(4, 4, 1), -1.0).is_err());
    }

    #[test]
    fn synthetic_aif_energy_is_increasing() {
        let aif = synthetic_aif(64, 64, CHECKER_CELL).unwrap();
        let e: Vec<f64> = FIG1_SIGMAS.iter().map(|&s| spectral_eod_energy(&aif, s).unwrap()).collect();
        assert!(e.windows(2).all(|w| w[1] > w[0]), "{e:?}");
        let bound = eod_energy_bound(&aif).unwrap();
        assert!(e.iter().all(|&v| v <= bound));
        assert!(spectral_eod_energy(&aif, 200.0).unwrap() > 0.999 * bound);
    }

    #[test]
    fn parseval_on_random_images() {
        for seed in 0..5 {
            let img = random_image(16, 12, 1, seed);
            for s in FIG1_SIGMAS {
                let a = spectral_eod_energy(&img, s).unwrap();
                let b = spatial_eod_energy(&img, s).unwrap();
                assert!(((a - b) / a).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn truncated_kernel_close_to_spectral() {
        let aif = synthetic_aif(64, 64, CHECKER_CELL).unwrap();
        let spectral = spectral_eod_energy(&aif, 1.0).unwrap();
        let truncated = truncated_eod_energy(&aif, 1.0).unwrap();
        let rel = ((truncated - spectral) / spectral).abs();
        assert!(rel < 0.02, "relative gap {rel}");
    }

    #[test]
    fn sinusoid_closed_form() {
        // cos at bin (2, 5) of a 16x20 raster: two spectral peaks of
        // magnitude HW/2, so |S|^2 summed is 2 (HW/2)^2
        let (h, w) = (16usize, 20usize);
        let img = Image::from_fn(h, w, 1, |y, x, _| {
            (2.0 * PI * (2.0 * y as f64 / h as f64 + 5.0 * x as f64 / w as f64)).cos()
        })
        .unwrap();
        let w0 = (2.0f64 / 16.0).powi(2) + (5.0f64 / 20.0).powi(2);
        for s in [0.3, 0.8, 1.7] {
            let hw = (h * w) as f64;
            let expected = 2.0 * (hw / 2.0).powi(2) * (1.0 - gaussian_transfer(s, w0)).powi(2) / hw;
            let got = energy_curve(&img, &[0.0, s]).unwrap().eod_energy[1];
            assert!(((got - expected) / expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn curve_shape_and_csv() {
        let aif = synthetic_aif(64, 64, CHECKER_CELL).unwrap();
        let curve = energy_curve(&aif, &FIG1_SIGMAS).unwrap();
        assert!(curve.eod_strictly_increasing());
        assert!(curve.fm_strictly_decreasing());
        let with_zero = energy_curve(&aif, &[0.0, 0.5]).unwrap();
        assert_eq!(with_zero.eod_energy[0], 0.0);
        let mut csv = Vec::new();
        curve.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("sigma,eod_energy,fm_energy\n0.5,"));
        assert!(energy_curve(&aif, &[1.0, 0.5]).is_err());
        assert!(energy_curve(&aif, &[1.0]).is_err());
    }
}
