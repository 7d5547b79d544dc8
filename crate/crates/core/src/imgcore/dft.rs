use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::imgcore::{Image, Precision};

/// Complex 2-D spectrum, row-major over `(u, v)` with `u` along height.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, bins: Vec<Complex64>) -> Result<Self> {
        if bins.len() != height * width {
            return Err(Error::Shape(format!(
                "spectrum {height}x{width} needs {} bins, got {}",
                height * width,
                bins.len()
            )));
        }
        Ok(Spectrum { height, width, bins })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.bins[u * self.width + v]
    }

    /// Multiplies every bin by `f(u_freq, v_freq)` where the frequencies are
    /// normalized to `[-1/2, 1/2)` cycles per pixel.
    pub fn scale_by(&self, f: impl Fn(f64, f64) -> f64) -> Spectrum {
        let mut bins = self.bins.clone();
        for u in 0..self.height {
            let fu = normalized_frequency(u, self.height);
            for v in 0..self.width {
                let fv = normalized_frequency(v, self.width);
                bins[u * self.width + v] *= f(fu, fv);
            }
        }
        Spectrum {
            height: self.height,
            width: self.width,
            bins,
        }
    }

    /// `sum |X(u,v)|^2`.
    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Maps DFT bin `k` of an `n`-point transform to `[-1/2, 1/2)`.
#[inline]
pub fn normalized_frequency(k: usize, n: usize) -> f64 {
    if 2 * k < n {
        k as f64 / n as f64
    } else {
        k as f64 / n as f64 - 1.0
    }
}

fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

// direct n-point transform of a strided line into `out`
fn dft_line(line: &[Complex64], table: &[Complex64], out: &mut [Complex64]) {
    let n = line.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        let mut idx = 0usize;
        for x in line {
            acc += x * table[idx];
            idx += k;
            if idx >= n {
                idx -= n;
            }
        }
        *o = acc;
    }
}

fn transform(height: usize, width: usize, data: &mut [Complex64], sign: f64) {
    let row_table = twiddles(width, sign);
    let col_table = twiddles(height, sign);
    let mut out = vec![Complex64::new(0.0, 0.0); width.max(height)];
    for row in data.chunks_exact_mut(width) {
        dft_line(row, &row_table, &mut out[..width]);
        row.copy_from_slice(&out[..width]);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for v in 0..width {
        for u in 0..height {
            column[u] = data[u * width + v];
        }
        dft_line(&column, &col_table, &mut out[..height]);
        for u in 0..height {
            data[u * width + v] = out[u];
        }
    }
}

/// Unnormalized forward DFT of a single-channel image.
pub fn dft2d(img: &Image) -> Result<Spectrum> {
    if img.channels() != 1 {
        return Err(Error::Channels(img.channels()));
    }
    let (h, w) = (img.height(), img.width());
    let mut bins: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(h, w, &mut bins, -1.0);
    Spectrum::new(h, w, bins)
}

/// Inverse DFT with the `1/(H*W)` factor; returns the real part.
pub fn idft2d(spec: &Spectrum) -> Result<Image> {
    let (h, w) = (spec.height, spec.width);
    let mut bins = spec.bins.clone();
    transform(h, w, &mut bins, 1.0);
    let scale = 1.0 / (h * w) as f64;
    Image::new(
        h,
        w,
        1,
        bins.iter().map(|c| c.re * scale).collect(),
        Precision::Double,
    )
}
