use crate::error::{Error, Result};

/// Storage precision of an [`Image`].
///
/// Values are always held as `f64`. A `Single` image rounds every value
/// through `f32` whenever it is constructed, so it carries exactly what a
/// single-precision pipeline (or a PFM file) would hold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Double => v,
            Precision::Single => v as f32 as f64,
        }
    }

    /// Tolerance for partition-of-unity checks at this precision.
    pub fn unit_tolerance(self) -> f64 {
        match self {
            Precision::Double => 1e-12,
            Precision::Single => 1e-6,
        }
    }
}

/// Row-major, channel-interleaved raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    precision: Precision,
    data: Vec<f64>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Channels(channels));
        }
        if data.len() != height * width * channels {
            return Err(Error::DataLength {
                height,
                width,
                channels,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut data = data;
        if precision == Precision::Single {
            data.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        Ok(Image {
            height,
            width,
            channels,
            precision,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert!(value.is_finite());
        Image {
            height,
            width,
            channels,
            precision: Precision::Double,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a double-precision image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data, Precision::Double)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    /// Reads with coordinates clamped into the raster.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Returns a copy stored at `precision`.
    pub fn with_precision(&self, precision: Precision) -> Image {
        let mut out = self.clone();
        out.precision = precision;
        if precision == Precision::Single {
            out.data.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        out
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            precision: self.precision,
            data,
        }
    }

    /// Sums channels into a single-channel image.
    pub fn channel_sum(&self) -> Image {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum())
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            precision: self.precision,
            data,
        }
    }

    /// Applies `f` elementwise, keeping shape and precision.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
            self.precision,
        )
    }

    /// Combines two same-shaped images elementwise.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.check_same_shape(other, "zip_map")?;
        let precision = if self.precision == Precision::Double || other.precision == Precision::Double
        {
            Precision::Double
        } else {
            Precision::Single
        };
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            precision,
        )
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Root-mean-square difference against a same-shaped image.
    pub fn rmse(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "rmse")?;
        let n = self.data.len().max(1) as f64;
        let sq: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok((sq / n).sqrt())
    }
}
