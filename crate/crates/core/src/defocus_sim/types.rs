use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image, Precision};

/// What the values of a [`DepthMap`] are measured in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthUnit {
    #[default]
    SceneUnits,
    SliceIndex,
    FocusDistance,
}

impl std::str::FromStr for DepthUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene_units" | "scene" => Ok(DepthUnit::SceneUnits),
            "slice_index" => Ok(DepthUnit::SliceIndex),
            "focus_distance" => Ok(DepthUnit::FocusDistance),
            other => Err(Error::Invalid(format!("unknown depth unit {other:?}"))),
        }
    }
}

/// Per-pixel depth with a unit tag fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    unit: DepthUnit,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, unit: DepthUnit) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DataLength {
                height,
                width,
                channels: 1,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(DepthMap {
            height,
            width,
            values,
            unit,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        unit: DepthUnit,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values, unit)
    }

    /// Wraps a single-channel image.
    pub fn from_image(img: &Image, unit: DepthUnit) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::Channels(img.channels()));
        }
        Self::new(img.height(), img.width(), img.data().to_vec(), unit)
    }

    pub fn to_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            1,
            self.values.clone(),
            Precision::Double,
        )
        .expect("depth values are finite")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn unit(&self) -> DepthUnit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Re-expresses the map in scene units.
    ///
    /// Focus distances already are scene distances, so that conversion only
    /// changes the tag. Slice indices (0-based, possibly fractional) are
    /// linearly interpolated into `focus_distances`.
    pub fn to_scene_units(&self, focus_distances: &[f64]) -> Result<DepthMap> {
        let values = match self.unit {
            DepthUnit::SceneUnits | DepthUnit::FocusDistance => self.values.clone(),
            DepthUnit::SliceIndex => {
                if focus_distances.is_empty() {
                    return Err(Error::Invalid("no focus distances to map slice indices".into()));
                }
                let last = (focus_distances.len() - 1) as f64;
                self.values
                    .iter()
                    .map(|&i| {
                        let i = i.clamp(0.0, last);
                        let lo = i.floor() as usize;
                        let hi = (lo + 1).min(focus_distances.len() - 1);
                        let t = i - lo as f64;
                        focus_distances[lo] * (1.0 - t) + focus_distances[hi] * t
                    })
                    .collect()
            }
        };
        DepthMap::new(self.height, self.width, values, DepthUnit::SceneUnits)
    }
}

/// Aggregate thin-lens term and the focus distance of every slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    blur_constant: f64,
    focus_distances: Vec<f64>,
}

impl CameraModel {
    pub fn new(blur_constant: f64, focus_distances: Vec<f64>) -> Result<Self> {
        if !(blur_constant > 0.0) || !blur_constant.is_finite() {
            return Err(Error::Invalid(format!(
                "blur constant must be > 0, got {blur_constant}"
            )));
        }
        if focus_distances.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Invalid("focus distances must be positive".into()));
        }
        if focus_distances.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(
                "focus distances must be strictly increasing".into(),
            ));
        }
        Ok(CameraModel {
            blur_constant,
            focus_distances,
        })
    }

    pub fn blur_constant(&self) -> f64 {
        self.blur_constant
    }

    pub fn focus_distances(&self) -> &[f64] {
        &self.focus_distances
    }

    /// Blur radius in pixels of a point at depth `z` with focus at `z_f`.
    #[inline]
    pub fn sigma(&self, z: f64, z_f: f64) -> f64 {
        blur_radius(z, z_f, self.blur_constant)
    }
}

/// `|z - z_f| / z * C`.
#[inline]
pub fn blur_radius(z: f64, z_f: f64, blur_constant: f64) -> f64 {
    (z - z_f).abs() / z * blur_constant
}

/// Ground-truth AiF image with its scene-unit depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    aif: Image,
    depth: DepthMap,
}

impl Scene {
    pub fn new(aif: Image, depth: DepthMap) -> Result<Self> {
        if aif.height() != depth.height() || aif.width() != depth.width() {
            return Err(Error::Shape(format!(
                "aif {}x{} vs depth {}x{}",
                aif.height(),
                aif.width(),
                depth.height(),
                depth.width()
            )));
        }
        if depth.unit() != DepthUnit::SceneUnits {
            return Err(Error::Invalid("scene depth must be in scene units".into()));
        }
        check_positive(&depth)?;
        Ok(Scene { aif, depth })
    }

    pub fn aif(&self) -> &Image {
        &self.aif
    }

    pub fn depth(&self) -> &DepthMap {
        &self.depth
    }
}

pub(crate) fn check_positive(depth: &DepthMap) -> Result<()> {
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let value = depth.get(y, x);
            if !(value > 0.0) {
                return Err(Error::NonPositiveDepth { row: y, col: x, value });
            }
        }
    }
    Ok(())
}

/// Ordered slices sharing one camera, optionally with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalStack {
    slices: Vec<Image>,
    camera: CameraModel,
    gt_depth: Option<DepthMap>,
    gt_aif: Option<Image>,
}

impl FocalStack {
    pub fn new(slices: Vec<Image>, camera: CameraModel) -> Result<Self> {
        if slices.len() < 2 {
            return Err(Error::Invalid(format!(
                "a focal stack needs at least 2 slices, got {}",
                slices.len()
            )));
        }
        if slices.len() != camera.focus_distances().len() {
            return Err(Error::Invalid(format!(
                "{} slices but {} focus distances",
                slices.len(),
                camera.focus_distances().len()
            )));
        }
        for s in &slices[1..] {
            slices[0].check_same_shape(s, "stack slices")?;
        }
        Ok(FocalStack {
            slices,
            camera,
            gt_depth: None,
            gt_aif: None,
        })
    }

    pub fn with_ground_truth(mut self, depth: Option<DepthMap>, aif: Option<Image>) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if let Some(d) = &depth {
            if (d.height(), d.width()) != (h, w) {
                return Err(Error::Shape("ground-truth depth size".into()));
            }
        }
        if let Some(a) = &aif {
            a.check_same_shape(&self.slices[0], "ground-truth aif")?;
        }
        self.gt_depth = depth;
        self.gt_aif = aif;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height()
    }

    pub fn width(&self) -> usize {
        self.slices[0].width()
    }

    pub fn channels(&self) -> usize {
        self.slices[0].channels()
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn focus_distances(&self) -> &[f64] {
        self.camera.focus_distances()
    }

    pub fn gt_depth(&self) -> Option<&DepthMap> {
        self.gt_depth.as_ref()
    }

    pub fn gt_aif(&self) -> Option<&Image> {
        self.gt_aif.as_ref()
    }

    /// Sub-stack from 1-based slice indices, e.g. `[5, 11]` out of 15.
    pub fn select(&self, indices: &[usize]) -> Result<FocalStack> {
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("slice indices must be strictly increasing".into()));
        }
        let mut slices = Vec::with_capacity(indices.len());
        let mut distances = Vec::with_capacity(indices.len());
        for &i in indices {
            if i == 0 || i > self.len() {
                return Err(Error::Invalid(format!(
                    "slice index {i} outside 1..={}",
                    self.len()
                )));
            }
            slices.push(self.slices[i - 1].clone());
            distances.push(self.focus_distances()[i - 1]);
        }
        let camera = CameraModel::new(self.camera.blur_constant(), distances)?;
        FocalStack::new(slices, camera)?.with_ground_truth(self.gt_depth.clone(), self.gt_aif.clone())
    }

    pub fn map_slices(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<FocalStack> {
        let slices = self.slices.iter().map(f).collect::<Result<Vec<_>>>()?;
        FocalStack::new(slices, self.camera.clone())?
            .with_ground_truth(self.gt_depth.clone(), self.gt_aif.clone())
    }
}
