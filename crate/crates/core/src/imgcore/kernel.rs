use crate::error::{Error, Result};
use crate::imgcore::{Image, Precision};

/// Square `(2r+1)x(2r+1)` convolution kernel, taps row-major with the
/// center at `(r, r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    radius: usize,
    taps: Vec<f64>,
}

/// How samples outside the raster are synthesized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Border {
    /// Clamp to the nearest edge pixel.
    #[default]
    Replicate,
    Zero,
}

impl Kernel2D {
    pub fn new(radius: usize, taps: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if taps.len() != side * side {
            return Err(Error::Shape(format!(
                "kernel radius {radius} needs {} taps, got {}",
                side * side,
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("non-finite kernel tap".into()));
        }
        Ok(Kernel2D { radius, taps })
    }

    /// 3x3 kernel from rows listed top to bottom.
    pub fn from_rows3(rows: [[f64; 3]; 3]) -> Self {
        Kernel2D {
            radius: 1,
            taps: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn identity(radius: usize) -> Self {
        let side = 2 * radius + 1;
        let mut taps = vec![0.0; side * side];
        taps[radius * side + radius] = 1.0;
        Kernel2D { radius, taps }
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.radius
    }

    #[inline]
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at offset `(dy, dx)` from the center.
    #[inline]
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.taps[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    pub fn transpose(&self) -> Kernel2D {
        let side = self.side();
        let mut taps = vec![0.0; side * side];
        for i in 0..side {
            for j in 0..side {
                taps[j * side + i] = self.taps[i * side + j];
            }
        }
        Kernel2D {
            radius: self.radius,
            taps,
        }
    }
}

/// Normalized Gaussian blur kernel truncated at `max(1, ceil(3 sigma))`.
///
/// `sigma == 0` gives the radius-1 identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel2D> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Invalid(format!("gaussian sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Kernel2D::identity(1));
    }
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let side = 2 * radius + 1;
    let r = radius as isize;
    let denom = 2.0 * sigma * sigma;
    let mut taps = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            taps.push((-((dx * dx + dy * dy) as f64) / denom).exp());
        }
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(Kernel2D { radius, taps })
}

/// 2-D convolution `out(p) = sum_q k(q) img(p - q)`, per channel.
///
/// The kernel is flipped relative to a correlation, so a unit impulse
/// reproduces the kernel taps around its position.
pub fn convolve2d(img: &Image, kernel: &Kernel2D, border: Border) -> Result<Image> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let r = kernel.radius();
    if r >= h.min(w) {
        return Err(Error::KernelTooLarge {
            radius: r,
            height: h,
            width: w,
        });
    }
    let ri = r as isize;
    let data = img.data();
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * ch;
            for dy in -ri..=ri {
                let sy = y as isize - dy;
                let sy = match border {
                    Border::Replicate => sy.clamp(0, h as isize - 1),
                    Border::Zero if sy < 0 || sy >= h as isize => continue,
                    Border::Zero => sy,
                } as usize;
                for dx in -ri..=ri {
                    let tap = kernel.at(dy, dx);
                    if tap == 0.0 {
                        continue;
                    }
                    let sx = x as isize - dx;
                    let sx = match border {
                        Border::Replicate => sx.clamp(0, w as isize - 1),
                        Border::Zero if sx < 0 || sx >= w as isize => continue,
                        Border::Zero => sx,
                    } as usize;
                    let src = (sy * w + sx) * ch;
                    for c in 0..ch {
                        out[base + c] += tap * data[src + c];
                    }
                }
            }
        }
    }
    Image::new(h, w, ch, out, img.precision())
}

/// Convolves with a Gaussian of width `sigma`, replicate border.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    convolve2d(img, &gaussian_kernel(sigma)?, Border::Replicate)
}

/// Checks the partition-of-unity property at the given precision.
pub fn is_normalized(kernel: &Kernel2D, precision: Precision) -> bool {
    (kernel.sum() - 1.0).abs() <= precision.unit_tolerance()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::random_image;

    #[test]
    fn identity_kernel_is_exact() {
        let img = random_image(9, 7, 3, 1);
        let out = convolve2d(&img, &Kernel2D::identity(2), Border::Replicate).unwrap();
        assert_eq!(out, img);
        let out = convolve2d(&img, &Kernel2D::identity(1), Border::Zero).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_survives_blur_with_replicate() {
        let img = Image::filled(12, 10, 1, 0.37);
        let out = gaussian_blur(&img, 1.3).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_response_reproduces_kernel() {
        // out(c + d) = k(d) for an impulse at c; a correlation would give k(-d)
        let img = Image::from_fn(5, 5, 1, |y, x, _| if (y, x) == (2, 2) { 1.0 } else { 0.0 }).unwrap();
        let k = Kernel2D::from_rows3([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]);
        let out = convolve2d(&img, &k, Border::Zero).unwrap();
        let expected = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        for (i, row) in expected.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(out.get(1 + i, 1 + j, 0), v);
            }
        }
        // a correlation would have placed 9 at the top-left of the window
        assert_ne!(out.get(1, 1, 0), 9.0);
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn kernel_too_large_is_rejected() {
        let img = Image::zeros(4, 8, 1);
        let err = convolve2d(&img, &Kernel2D::identity(4), Border::Replicate).unwrap_err();
        assert!(matches!(err, Error::KernelTooLarge { radius: 4, .. }));
    }

    #[test]
    fn gaussian_shape_and_errors() {
        assert_eq!(gaussian_kernel(0.0).unwrap(), Kernel2D::identity(1));
        assert!(gaussian_kernel(-0.1).is_err());
        assert!(gaussian_kernel(f64::NAN).is_err());
        assert_eq!(gaussian_kernel(0.2).unwrap().radius(), 1);
        assert_eq!(gaussian_kernel(1.0).unwrap().radius(), 3);
        assert_eq!(gaussian_kernel(1.5).unwrap().radius(), 5);
        for s in [0.3, 0.5, 1.0, 1.7, 2.0, 4.2] {
            let k = gaussian_kernel(s).unwrap();
            assert!(is_normalized(&k, Precision::Double), "sigma {s}");
            let r = k.radius() as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let t = k.at(dy, dx);
                    assert!(t >= 0.0);
                    assert_eq!(t, k.at(-dy, -dx));
                    assert_eq!(t, k.at(dx, dy));
                }
            }
        }
    }

    #[test]
    fn gaussian_center_tap_sigma_one() {
        // independent evaluation: the 7x7 grid sum of exp(-(x^2+y^2)/2) is the
        // square of the 1-D sum over -3..=3 since the exponent separates
        let row: f64 = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).sum();
        let expected = 1.0 / (row * row);
        let k = gaussian_kernel(1.0).unwrap();
        assert!((k.at(0, 0) - expected).abs() < 1e-15);
        // frozen: 1 / (1 + 2e^-0.5 + 2e^-2 + 2e^-4.5)^2
        assert!((k.at(0, 0) - 0.159241125690702).abs() < 1e-13);
    }
}
