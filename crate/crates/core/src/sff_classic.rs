//! Classical shape from focus and the depth-metric suite.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::directional_fm;
use crate::defocus_sim::{DepthMap, DepthUnit, FocalStack};
use crate::error::{Error, Result};
use crate::imgcore::Image;

/// `Z x H x W` focus responses, slice-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusVolume {
    slices: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    focus_distances: Vec<f64>,
}

impl FocusVolume {
    pub fn new(
        slices: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        focus_distances: Vec<f64>,
    ) -> Result<Self> {
        if slices == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid("empty focus volume".into()));
        }
        if data.len() != slices * height * width {
            return Err(Error::Shape(format!(
                "focus volume {slices}x{height}x{width} needs {} values, got {}",
                slices * height * width,
                data.len()
            )));
        }
        if focus_distances.len() != slices {
            return Err(Error::Shape("one focus distance per slice required".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(FocusVolume {
            slices,
            height,
            width,
            data,
            focus_distances,
        })
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn focus_distances(&self) -> &[f64] {
        &self.focus_distances
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.height + y) * self.width + x]
    }

    /// Responses of every slice at one pixel.
    pub fn column(&self, y: usize, x: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.slices).map(move |z| self.get(z, y, x))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<FocusVolume> {
        FocusVolume::new(
            self.slices,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
            self.focus_distances.clone(),
        )
    }
}

/// Channel-summed directional focus measure of every slice.
pub fn build_focus_volume(stack: &FocalStack) -> Result<FocusVolume> {
    let (h, w) = (stack.height(), stack.width());
    let mut data = Vec::with_capacity(stack.len() * h * w);
    for s in stack.slices() {
        data.extend_from_slice(directional_fm(s)?.image().channel_sum().data());
    }
    FocusVolume::new(stack.len(), h, w, data, stack.focus_distances().to_vec())
}

/// Per pixel, the focus distance of the strongest slice; ties go to the
/// lowest index.
pub fn wta_depth(fv: &FocusVolume) -> Result<DepthMap> {
    DepthMap::from_fn(fv.height, fv.width, DepthUnit::FocusDistance, |y, x| {
        let mut best = 0;
        let mut best_v = fv.get(0, y, x);
        for z in 1..fv.slices {
            let v = fv.get(z, y, x);
            if v > best_v {
                best = z;
                best_v = v;
            }
        }
        fv.focus_distances[best]
    })
}

/// Expected focus distance under `softmax_z(fv / temperature)`.
pub fn soft_argmax_depth(fv: &FocusVolume, temperature: f64) -> Result<DepthMap> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let mut weights = vec![0.0; fv.slices];
    DepthMap::from_fn(fv.height, fv.width, DepthUnit::FocusDistance, |y, x| {
        let max = fv.column(y, x).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (z, w) in weights.iter_mut().enumerate() {
            *w = ((fv.get(z, y, x) - max) / temperature).exp();
            total += *w;
        }
        weights
            .iter()
            .zip(&fv.focus_distances)
            .map(|(w, d)| w / total * d)
            .sum()
    })
}

/// Window median with replicate border. Even-sized windows never occur:
/// the window is always `(2r+1)^2`.
pub fn median_filter(d: &DepthMap, radius: usize) -> Result<DepthMap> {
    if radius == 0 {
        return Err(Error::Invalid("median radius must be >= 1".into()));
    }
    let r = radius as isize;
    let (h, w) = (d.height() as isize, d.width() as isize);
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    DepthMap::from_fn(d.height(), d.width(), d.unit(), |y, x| {
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                let sy = (y as isize + dy).clamp(0, h - 1) as usize;
                let sx = (x as isize + dx).clamp(0, w - 1) as usize;
                window.push(d.get(sy, sx));
            }
        }
        window.sort_by(f64::total_cmp);
        window[window.len() / 2]
    })
}

/// Error statistics over the valid pixels; deltas are percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rms: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8}",
            "MAE", "RMS", "AbsRel", "SqRel", "d1", "d2", "d3"
        )?;
        write!(
            f,
            "{:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>8.2} {:>8.2} {:>8.2}",
            self.mae, self.rms, self.abs_rel, self.sq_rel, self.delta1, self.delta2, self.delta3
        )
    }
}

pub const DELTA_BASE: f64 = 1.25;

/// Compares `pred` against `gt` over the pixels where `mask` is true (all
/// pixels when `None`).
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, mask: Option<&[bool]>) -> Result<MetricReport> {
    if pred.unit() != gt.unit() {
        return Err(Error::UnitMismatch {
            pred: pred.unit(),
            gt: gt.unit(),
        });
    }
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.values().len() {
            return Err(Error::Shape("mask size".into()));
        }
    }
    let thresholds = [DELTA_BASE, DELTA_BASE.powi(2), DELTA_BASE.powi(3)];
    let (mut abs, mut sq, mut rel, mut sq_rel) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for (i, (&d, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if !(g > 0.0) {
            return Err(Error::Invalid(format!(
                "ground truth {g} at pixel {i} must be masked for relative metrics"
            )));
        }
        let e = d - g;
        abs += e.abs();
        sq += e * e;
        rel += e.abs() / g;
        sq_rel += e * e / g;
        let ratio = if d > 0.0 { (d / g).max(g / d) } else { f64::INFINITY };
        for (hit, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *hit += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("no valid pixels".into()));
    }
    let nf = n as f64;
    Ok(MetricReport {
        mae: abs / nf,
        rms: (sq / nf).sqrt(),
        abs_rel: rel / nf,
        sq_rel: sq_rel / nf,
        delta1: 100.0 * hits[0] as f64 / nf,
        delta2: 100.0 * hits[1] as f64 / nf,
        delta3: 100.0 * hits[2] as f64 / nf,
    })
}

/// Neighbouring depths differing by more than this fraction of the larger
/// one form a depth edge; smooth slopes stay edge-free.
pub const EDGE_REL_JUMP: f64 = 0.05;

/// Pixels that are textured in `aif` and more than `margin` pixels
/// (Chebyshev distance) from any depth edge of `depth`.
///
/// Texture is a channel-summed directional focus measure of `aif` above
/// `threshold`.
pub fn textured_interior_mask(aif: &Image, depth: &DepthMap, margin: usize, threshold: f64) -> Result<Vec<bool>> {
    let (h, w) = (depth.height(), depth.width());
    if (aif.height(), aif.width()) != (h, w) {
        return Err(Error::Shape("aif and depth sizes differ".into()));
    }
    let fm = directional_fm(aif)?.into_image().channel_sum();
    let jump = |a: f64, b: f64| (a - b).abs() > EDGE_REL_JUMP * a.abs().max(b.abs());
    let mut edge = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = depth.get(y, x);
            if x + 1 < w && jump(v, depth.get(y, x + 1)) {
                edge[y * w + x] = true;
                edge[y * w + x + 1] = true;
            }
            if y + 1 < h && jump(v, depth.get(y + 1, x)) {
                edge[y * w + x] = true;
                edge[(y + 1) * w + x] = true;
            }
        }
    }
    let m = margin as isize;
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if fm.get(y, x, 0) <= threshold {
                continue;
            }
            let mut near_edge = false;
            'scan: for dy in -m..=m {
                for dx in -m..=m {
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && edge[sy as usize * w + sx as usize] {
                        near_edge = true;
                        break 'scan;
                    }
                }
            }
            mask[y * w + x] = !near_edge;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defocus_sim::{render_stack, step_scene, CameraModel, DEFAULT_LAYERS};
    use crate::test_util::random_image;
    use proptest::prelude::*;

    fn volume(columns: &[&[f64]], distances: &[f64]) -> FocusVolume {
        // each column becomes one pixel of a 1 x N volume
        let z = distances.len();
        let n = columns.len();
        let mut data = vec![0.0; z * n];
        for (x, col) in columns.iter().enumerate() {
            for k in 0..z {
                data[k * n + x] = col[k];
            }
        }
        FocusVolume::new(z, 1, n, data, distances.to_vec()).unwrap()
    }

    #[test]
    fn volume_shape_and_constant_slices() {
        let flat = Image::filled(6, 7, 3, 0.3);
        let stack = FocalStack::new(vec![flat.clone(), flat], CameraModel::new(1.0, vec![1.0, 2.0]).unwrap()).unwrap();
        let fv = build_focus_volume(&stack).unwrap();
        assert_eq!((fv.slices(), fv.height(), fv.width()), (2, 6, 7));
        assert!(fv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wta_examples() {
        let fv = volume(&[&[0.0, 0.0, 1.0], &[0.5, 0.5, 0.5]], &[1.0, 2.0, 4.0]);
        let d = wta_depth(&fv).unwrap();
        assert_eq!(d.values(), &[4.0, 1.0]);
        assert_eq!(d.unit(), DepthUnit::FocusDistance);
    }

    #[test]
    fn soft_argmax_examples() {
        let fv = volume(&[&[100.0, 0.0], &[0.0, 100.0], &[1.0, 1.0], &[2.0, 1.0]], &[1.0, 3.0]);
        let d = soft_argmax_depth(&fv, 1.0).unwrap();
        assert!((d.values()[0] - 1.0).abs() < 1e-6);
        assert!((d.values()[1] - 3.0).abs() < 1e-6);
        assert_eq!(d.values()[2], 2.0);
        // sigmoid(1) * 1 + sigmoid(-1) * 3
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = s * 1.0 + (1.0 - s) * 3.0;
        assert!((d.values()[3] - expected).abs() < 1e-12);
        assert!((d.values()[3] - 1.5379).abs() < 1e-4);
        assert!(soft_argmax_depth(&fv, 0.0).is_err());
    }

    #[test]
    fn median_examples() {
        let flat = DepthMap::new(5, 5, vec![2.0; 25], DepthUnit::SceneUnits).unwrap();
        assert_eq!(median_filter(&flat, 1).unwrap(), flat);
        let mut v = vec![2.0; 25];
        v[12] = 9.0;
        let spike = DepthMap::new(5, 5, v, DepthUnit::SceneUnits).unwrap();
        assert_eq!(median_filter(&spike, 1).unwrap(), flat);
        assert!(median_filter(&flat, 0).is_err());
    }

    #[test]
    fn median_values_come_from_window() {
        let img = random_image(9, 8, 1, 77);
        let d = DepthMap::from_image(&img, DepthUnit::SceneUnits).unwrap();
        let m = median_filter(&d, 2).unwrap();
        for y in 0..9isize {
            for x in 0..8isize {
                let v = m.get(y as usize, x as usize);
                let mut found = false;
                for dy in -2..=2isize {
                    for dx in -2..=2isize {
                        let sy = (y + dy).clamp(0, 8) as usize;
                        let sx = (x + dx).clamp(0, 7) as usize;
                        found |= d.get(sy, sx) == v;
                    }
                }
                assert!(found);
            }
        }
    }

    #[test]
    fn metric_examples() {
        let gt = DepthMap::new(10, 10, vec![2.0; 100], DepthUnit::SceneUnits).unwrap();
        let perfect = compute_metrics(&gt, &gt, None).unwrap();
        assert_eq!(perfect, MetricReport { mae: 0.0, rms: 0.0, abs_rel: 0.0, sq_rel: 0.0, delta1: 100.0, delta2: 100.0, delta3: 100.0 });

        let scaled = DepthMap::new(10, 10, vec![2.6; 100], DepthUnit::SceneUnits).unwrap();
        let r = compute_metrics(&scaled, &gt, None).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 100.0, 100.0));

        let offset = DepthMap::new(10, 10, vec![2.5; 100], DepthUnit::SceneUnits).unwrap();
        let r = compute_metrics(&offset, &gt, None).unwrap();
        assert_eq!((r.mae, r.rms, r.abs_rel, r.sq_rel), (0.5, 0.5, 0.25, 0.125));
    }

    #[test]
    fn metric_errors() {
        let gt = DepthMap::new(1, 2, vec![0.0, 1.0], DepthUnit::SceneUnits).unwrap();
        let pred = DepthMap::new(1, 2, vec![1.0, 1.0], DepthUnit::SceneUnits).unwrap();
        assert!(compute_metrics(&pred, &gt, None).is_err());
        assert!(compute_metrics(&pred, &gt, Some(&[false, true])).is_ok());
        let other = DepthMap::new(1, 2, vec![1.0, 1.0], DepthUnit::SliceIndex).unwrap();
        let err = compute_metrics(&other, &pred, None).unwrap_err();
        assert!(err.to_string().contains("unit mismatch"));
    }

    #[test]
    fn step_stack_wta_is_correct_on_textured_interiors() {
        let scene = step_scene(64, 1.0, 3.0).unwrap();
        let stack = render_stack(&scene, &CameraModel::new(2.0, vec![1.0, 3.0]).unwrap(), DEFAULT_LAYERS).unwrap();
        let fv = build_focus_volume(&stack).unwrap();
        let depth = wta_depth(&fv).unwrap();
        // widest blur in this stack is 4 px
        let mask = textured_interior_mask(scene.aif(), scene.depth(), 12, 1e-6).unwrap();
        let (mut ok, mut n) = (0, 0);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                n += 1;
                ok += (depth.values()[i] == scene.depth().values()[i]) as usize;
            }
        }
        assert!(n > 500);
        assert!(ok as f64 >= 0.95 * n as f64, "{ok}/{n}");
    }

    #[test]
    fn interior_mask_excludes_only_jumps() {
        let step = step_scene(16, 1.0, 3.0).unwrap();
        let mask = textured_interior_mask(step.aif(), step.depth(), 2, 1e-6).unwrap();
        // edge pixels sit at columns 7 and 8; margin 2 also drops 5, 6, 9, 10
        for y in 0..16 {
            for x in 5..=10 {
                assert!(!mask[y * 16 + x]);
            }
        }
        assert!(mask.iter().filter(|&&m| m).count() > 100);
        let ramp = crate::defocus_sim::ramp_scene(64, 1.0, 3.0).unwrap();
        let mask = textured_interior_mask(ramp.aif(), ramp.depth(), 4, -1.0).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    proptest! {
        #[test]
        fn wta_invariant_under_monotone_transform(vals in prop::collection::vec(0.0f64..10.0, 3 * 16)) {
            let fv = FocusVolume::new(3, 4, 4, vals, vec![1.0, 2.0, 3.0]).unwrap();
            let a = wta_depth(&fv).unwrap();
            let b = wta_depth(&fv.map(|v| (v * 0.5).exp() + 3.0).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn soft_argmax_is_convex_and_sharpens_to_wta(vals in prop::collection::vec(0.0f64..1.0, 4 * 9)) {
            let fv = FocusVolume::new(4, 3, 3, vals, vec![0.5, 1.0, 2.5, 4.0]).unwrap();
            let soft = soft_argmax_depth(&fv, 0.7).unwrap();
            prop_assert!(soft.values().iter().all(|&d| (0.5..=4.0).contains(&d)));
            let sharp = soft_argmax_depth(&fv, 1e-4).unwrap();
            let wta = wta_depth(&fv).unwrap();
            for y in 0..3 {
                for x in 0..3 {
                    let mut col: Vec<f64> = fv.column(y, x).collect();
                    col.sort_by(|a, b| b.total_cmp(a));
                    if col[0] - col[1] > 1e-2 {
                        prop_assert!((sharp.get(y, x) - wta.get(y, x)).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn metric_laws(p in prop::collection::vec(0.1f64..5.0, 12), g in prop::collection::vec(0.1f64..5.0, 12)) {
            let pred = DepthMap::new(3, 4, p, DepthUnit::SceneUnits).unwrap();
            let gt = DepthMap::new(3, 4, g, DepthUnit::SceneUnits).unwrap();
            let a = compute_metrics(&pred, &gt, None).unwrap();
            let b = compute_metrics(&gt, &pred, None).unwrap();
            prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
            prop_assert!(a.mae <= a.rms + 1e-12);
            prop_assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3 && a.delta3 <= 100.0);
            let own = compute_metrics(&gt, &gt, None).unwrap();
            prop_assert_eq!(own.mae, 0.0);
            prop_assert_eq!(own.delta1, 100.0);
        }
    }
}
