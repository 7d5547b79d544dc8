//! JSON manifests that wire the pipeline stages together through files.
//!
//! Paths inside a manifest are kept exactly as written and resolved against
//! the manifest's directory, so loading and saving a manifest reproduces it
//! byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedStack, Component};
use crate::defocus_sim::{CameraModel, DepthMap, DepthUnit, FocalStack};
use crate::error::{Error, Result};
use crate::imgcore::{read_pfm, read_png, write_pfm, write_png, Image, PngDepth};

fn is_scene_units(u: &DepthUnit) -> bool {
    *u == DepthUnit::SceneUnits
}

/// A focal stack on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub slices: Vec<PathBuf>,
    pub focus_distances: Vec<f64>,
    pub blur_constant: f64,
    pub gt_depth: Option<PathBuf>,
    pub gt_aif: Option<PathBuf>,
    /// Unit of `gt_depth`; omitted when it is scene units.
    #[serde(default, skip_serializing_if = "is_scene_units")]
    pub gt_depth_unit: DepthUnit,
}

/// Reads a PNG or PFM image, chosen by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => read_png(path),
        Some("pfm") => read_pfm(path),
        _ => Err(Error::Invalid(format!("{}: expected a .png or .pfm file", path.display()))),
    }
}

pub fn read_depth(path: &Path, unit: DepthUnit) -> Result<DepthMap> {
    DepthMap::from_image(&read_pfm(path)?, unit)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl StackManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::new(self.blur_constant, self.focus_distances.clone())
    }

    /// Reads every referenced file, resolving paths against `base`.
    pub fn read_stack(&self, base: &Path) -> Result<FocalStack> {
        if self.slices.len() != self.focus_distances.len() {
            return Err(Error::Invalid(format!(
                "{} slices but {} focus distances",
                self.slices.len(),
                self.focus_distances.len()
            )));
        }
        let slices = self
            .slices
            .iter()
            .map(|p| read_image(&base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let depth = self
            .gt_depth
            .as_ref()
            .map(|p| read_depth(&base.join(p), self.gt_depth_unit))
            .transpose()?;
        let aif = self.gt_aif.as_ref().map(|p| read_image(&base.join(p))).transpose()?;
        FocalStack::new(slices, self.camera()?)?.with_ground_truth(depth, aif)
    }
}

/// Loads a stack manifest and the stack it describes.
pub fn load_stack(path: impl AsRef<Path>) -> Result<(StackManifest, FocalStack)> {
    let path = path.as_ref();
    let m = StackManifest::load(path)?;
    let stack = m.read_stack(&base_dir(path))?;
    Ok((m, stack))
}

/// Writes `stack` into `dir` as PFM slices (lossless for single precision)
/// with PNG previews, plus ground truth when present, and a `stack.json`
/// manifest. Returns the manifest path.
pub fn write_stack(dir: &Path, stack: &FocalStack) -> Result<PathBuf> {
    let mut slices = Vec::with_capacity(stack.len());
    for (i, s) in stack.slices().iter().enumerate() {
        let name = format!("slice_{:02}", i + 1);
        write_pfm(dir.join(format!("{name}.pfm")), s)?;
        write_png(dir.join(format!("{name}.png")), s, PngDepth::Sixteen)?;
        slices.push(PathBuf::from(format!("{name}.pfm")));
    }
    let gt_depth = match stack.gt_depth() {
        Some(d) => {
            write_pfm(dir.join("gt_depth.pfm"), &d.to_image())?;
            Some(PathBuf::from("gt_depth.pfm"))
        }
        None => None,
    };
    let gt_aif = match stack.gt_aif() {
        Some(a) => {
            write_pfm(dir.join("gt_aif.pfm"), a)?;
            write_png(dir.join("gt_aif.png"), a, PngDepth::Sixteen)?;
            Some(PathBuf::from("gt_aif.pfm"))
        }
        None => None,
    };
    let manifest = StackManifest {
        slices,
        focus_distances: stack.focus_distances().to_vec(),
        blur_constant: stack.camera().blur_constant(),
        gt_depth,
        gt_aif,
        gt_depth_unit: stack.gt_depth().map_or(DepthUnit::SceneUnits, DepthMap::unit),
    };
    let path = dir.join("stack.json");
    manifest.save(&path)?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Slice,
    Aif,
    Eod,
}

/// One image of the augmented stack; `index` is the 0-based slice for
/// slices and EOD maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEntry {
    pub kind: ComponentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub path: PathBuf,
}

/// The augmented stack on disk, components in concatenation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedManifest {
    pub focus_distances: Vec<f64>,
    pub components: Vec<ComponentEntry>,
    pub temperature: f64,
    pub gt_depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "is_scene_units")]
    pub gt_depth_unit: DepthUnit,
}

impl AugmentedManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path.as_ref())?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn read_stack(&self, base: &Path) -> Result<(AugmentedStack, Option<DepthMap>)> {
        let z = self.focus_distances.len();
        let mut slices: Vec<Option<Image>> = vec![None; z];
        let mut eods: Vec<Option<Image>> = vec![None; z];
        let mut aif = None;
        for c in &self.components {
            let img = read_image(&base.join(&c.path))?;
            let slot = match (c.kind, c.index) {
                (ComponentKind::Aif, None) => &mut aif,
                (ComponentKind::Slice, Some(i)) if i < z => &mut slices[i],
                (ComponentKind::Eod, Some(i)) if i < z => &mut eods[i],
                _ => return Err(Error::Invalid(format!("bad component entry {c:?}"))),
            };
            if slot.replace(img).is_some() {
                return Err(Error::Invalid(format!("duplicate component {c:?}")));
            }
        }
        let missing = || Error::Invalid("augmented manifest is missing components".into());
        let slices = slices.into_iter().collect::<Option<Vec<_>>>().ok_or_else(missing)?;
        let eods = eods.into_iter().collect::<Option<Vec<_>>>().ok_or_else(missing)?;
        let stack = AugmentedStack::new(slices, aif.ok_or_else(missing)?, eods, self.focus_distances.clone())?;
        let depth = self
            .gt_depth
            .as_ref()
            .map(|p| read_depth(&base.join(p), self.gt_depth_unit))
            .transpose()?;
        Ok((stack, depth))
    }
}

pub fn load_augmented(path: impl AsRef<Path>) -> Result<(AugmentedManifest, AugmentedStack, Option<DepthMap>)> {
    let path = path.as_ref();
    let m = AugmentedManifest::load(path)?;
    let (stack, depth) = m.read_stack(&base_dir(path))?;
    Ok((m, stack, depth))
}

/// Writes the AiF (PNG and PFM), EOD maps (PFM), the input slices (PFM) and
/// `augmented.json` into `dir`. Returns the manifest path.
pub fn write_augmented(
    dir: &Path,
    aug: &AugmentedStack,
    temperature: f64,
    gt_depth: Option<&DepthMap>,
) -> Result<PathBuf> {
    let mut components = Vec::with_capacity(2 * aug.slice_count() + 1);
    for (component, img) in aug.components() {
        let (kind, index, name) = match component {
            Component::Slice(i) => (ComponentKind::Slice, Some(i), format!("input_{:02}.pfm", i + 1)),
            Component::Aif => (ComponentKind::Aif, None, "aif.pfm".to_string()),
            Component::Eod(i) => (ComponentKind::Eod, Some(i), format!("eod_{:02}.pfm", i + 1)),
        };
        write_pfm(dir.join(&name), img)?;
        if kind == ComponentKind::Aif {
            write_png(dir.join("aif.png"), img, PngDepth::Sixteen)?;
        }
        components.push(ComponentEntry {
            kind,
            index,
            path: PathBuf::from(name),
        });
    }
    let gt = match gt_depth {
        Some(d) => {
            write_pfm(dir.join("gt_depth.pfm"), &d.to_image())?;
            Some(PathBuf::from("gt_depth.pfm"))
        }
        None => None,
    };
    let manifest = AugmentedManifest {
        focus_distances: aug.focus_distances().to_vec(),
        components,
        temperature,
        gt_depth: gt,
        gt_depth_unit: gt_depth.map_or(DepthUnit::SceneUnits, DepthMap::unit),
    };
    let path = dir.join("augmented.json");
    manifest.save(&path)?;
    Ok(path)
}
