//! Analytic gradients against central finite differences.
//!
//! Each target builds a small graph from random inputs, contracts its output
//! with a random cotangent and compares, per input tensor, the analytic
//! gradient with `(f(x + h) - f(x - h)) / 2h` at `h = 1e-5`. The reported
//! error of a tensor is `|g_a - g_fd| / max(|g_a|, |g_fd|)` in the L2 norm.
//! Entries whose perturbation straddles a ReLU kink are detected from
//! disagreeing one-sided slopes and excluded; their count is reported.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RefinerConfig;
use super::model::{decode_volume, encode_features, fuse_volume, gru_params, gru_step, refine_depth, Refiner};
use super::params::{Bound, Params};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const LINEAR_TOL: f64 = 1e-7;
pub const SMOOTH_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;

/// Norms below this are treated as an exactly zero gradient.
const ZERO_NORM: f64 = 1e-9;
/// Relative disagreement of the one-sided slopes that marks a kink. Smooth
/// functions differ by about `f'' * FD_STEP`.
const KINK_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Conv2d,
    Conv3d,
    Resample,
    Loss,
    Gru,
    SoftArgmax,
    ConvexUpsample,
    /// Encoder, residual decoder and slice fusion at 16x16.
    FocusVolume,
    /// `refine_depth` with `T = 2`, `K = 2` on 8x8 inputs.
    Refiner,
}

impl GradTarget {
    pub const ALL: [GradTarget; 9] = [
        GradTarget::Conv2d,
        GradTarget::Conv3d,
        GradTarget::Resample,
        GradTarget::Loss,
        GradTarget::Gru,
        GradTarget::SoftArgmax,
        GradTarget::ConvexUpsample,
        GradTarget::FocusVolume,
        GradTarget::Refiner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Conv2d => "conv2d",
            GradTarget::Conv3d => "conv3d",
            GradTarget::Resample => "resample",
            GradTarget::Loss => "loss",
            GradTarget::Gru => "gru_step",
            GradTarget::SoftArgmax => "soft_argmax",
            GradTarget::ConvexUpsample => "convex_upsample",
            GradTarget::FocusVolume => "focus_volume",
            GradTarget::Refiner => "refine_depth",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            GradTarget::Conv2d | GradTarget::Conv3d | GradTarget::Resample | GradTarget::Loss => LINEAR_TOL,
            GradTarget::Gru | GradTarget::SoftArgmax | GradTarget::ConvexUpsample => SMOOTH_TOL,
            GradTarget::FocusVolume | GradTarget::Refiner => COMPOSED_TOL,
        }
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown gradient check target {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckRow {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Scalar inputs perturbed.
    pub scalars: usize,
    /// Of those, skipped as kink-straddling.
    pub kinks: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl fmt::Display for GradCheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} {:>12.3e} {:>10.0e} {:>8} {:>6} {}",
            self.op,
            self.max_rel_err,
            self.tolerance,
            self.scalars,
            self.kinks,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_raw(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Comparison of one input tensor's gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TensorCheck {
    pub rel_err: f64,
    pub scalars: usize,
    /// Entries left out because the two one-sided slopes disagree, i.e. the
    /// step straddles a ReLU kink and the central difference is meaningless.
    pub kinks: usize,
}

/// Worst tensor error of `build` over all `inputs`, with the totals of
/// perturbed scalars and skipped kinks.
pub fn check_graph(
    inputs: Vec<Tensor>,
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(f64, usize, usize)> {
    let checks = tensor_errors(inputs, seed, build)?;
    Ok(checks.iter().fold((0.0, 0, 0), |(e, s, k), c| (f64::max(e, c.rel_err), s + c.scalars, k + c.kinks)))
}

/// Per-input comparison of analytic and finite-difference gradients.
pub fn tensor_errors(
    mut inputs: Vec<Tensor>,
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Vec<TensorCheck>> {
    let eval = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(&inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let cotangent = random(&mut rng, tape.shape(out), 1.0);
    let base = tape.value(out).dot(&cotangent);
    let grads = tape.backward_with(out, cotangent.clone())?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let project = |inputs: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = eval(inputs)?;
        Ok(tape.value(out).dot(&cotangent))
    };
    let mut checks = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
        let mut kinks = 0;
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + FD_STEP;
            let plus = project(&inputs)?;
            inputs[i].data_mut()[j] = x0 - FD_STEP;
            let minus = project(&inputs)?;
            inputs[i].data_mut()[j] = x0;
            let (right, left) = ((plus - base) / FD_STEP, (base - minus) / FD_STEP);
            if (right - left).abs() > KINK_TOL * right.abs().max(left.abs()).max(1.0) {
                kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            diff2 += (fd - a) * (fd - a);
            a2 += a * a;
            f2 += fd * fd;
        }
        let scale = a2.max(f2).sqrt();
        let rel_err = if scale < ZERO_NORM { diff2.sqrt() } else { diff2.sqrt() / scale };
        checks.push(TensorCheck {
            rel_err,
            scalars: inputs[i].len(),
            kinks,
        });
    }
    Ok(checks)
}

fn params_inputs(params: &Params) -> (Vec<String>, Vec<Tensor>) {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), t.value.clone()))
        .unzip()
}

fn bound(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_names(names.iter().map(String::as_str), vars.to_vec())
}

/// Runs one target with inputs drawn from `seed`.
pub fn grad_check(target: GradTarget, seed: u64) -> Result<GradCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (max_rel_err, scalars, kinks) = match target {
        GradTarget::Conv2d => {
            let inputs = vec![
                random(&mut rng, [2, 3, 7, 6], 1.0),
                random(&mut rng, [4, 3, 3, 3], 0.5),
                random(&mut rng, [1, 4, 1, 1], 0.5),
            ];
            let strided = check_graph(inputs.clone(), seed, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1))?;
            let valid = check_graph(inputs, seed, |t, v| t.conv2d(v[0], v[1], v[2], 1, 0))?;
            (strided.0.max(valid.0), strided.1 + valid.1, strided.2 + valid.2)
        }
        GradTarget::Conv3d => {
            let inputs = vec![
                random(&mut rng, [3, 2, 5, 4], 1.0),
                random(&mut rng, [3, 2, 3, 9], 0.5),
                random(&mut rng, [1, 3, 1, 1], 0.5),
            ];
            check_graph(inputs, seed, |t, v| t.conv3d(v[0], v[1], v[2]))?
        }
        GradTarget::Resample => {
            let inputs = vec![random(&mut rng, [2, 2, 4, 6], 1.0), random(&mut rng, [2, 2, 8, 6], 1.0)];
            check_graph(inputs, seed, |t, v| {
                let up = t.resize(v[0], 8, 6)?;
                let cat = t.concat(&[up, v[1]])?;
                let pooled = t.avg_pool(cat, 2)?;
                Ok(t.mean_slices(pooled))
            })?
        }
        GradTarget::Loss => {
            let gt = random(&mut rng, [1, 1, 4, 4], 2.0);
            let inputs = (0..3).map(|_| random(&mut rng, [1, 1, 4, 4], 2.0)).collect();
            check_graph(inputs, seed, |t, v| t.loss(v, &gt, 0.9))?
        }
        GradTarget::Gru => {
            let params = gru_params("gru", 4, 4, seed)?;
            let (names, mut inputs) = params_inputs(&params);
            inputs.push(random(&mut rng, [1, 4, 6, 6], 0.9));
            inputs.push(random(&mut rng, [1, 4, 6, 6], 1.0));
            let n = names.len();
            check_graph(inputs, seed, |t, v| gru_step(t, &bound(&names, &v[..n]), "gru", v[n], v[n + 1]))?
        }
        GradTarget::SoftArgmax => {
            let inputs = vec![random(&mut rng, [4, 1, 5, 5], 2.0)];
            check_graph(inputs, seed, |t, v| t.soft_argmax(v[0], &[0.5, 1.0, 2.5, 4.0]))?
        }
        GradTarget::ConvexUpsample => {
            let inputs = vec![random(&mut rng, [1, 1, 4, 5], 2.0), random(&mut rng, [1, 36, 4, 5], 2.0)];
            check_graph(inputs, seed, |t, v| t.convex_upsample(v[0], v[1], 2))?
        }
        GradTarget::FocusVolume => {
            let config = RefinerConfig {
                fused_channels: 2,
                hidden_channels: 2,
                encoder_channels: [2, 2, 2, 2],
                ..RefinerConfig::small(seed)
            };
            let refiner = Refiner::new(config, 3)?;
            let (names, mut inputs) = params_inputs(refiner.params());
            inputs.push(random(&mut rng, [2, 3, 16, 16], 1.0));
            let n = names.len();
            check_graph(inputs, seed, |t, v| {
                let p = bound(&names, &v[..n]);
                let feats = encode_features(t, &p, v[n])?;
                let mut decoded = Vec::new();
                for (i, &a) in feats.iter().enumerate() {
                    let r = decode_volume(t, &p, i + 1, a)?;
                    decoded.push(t.resize(r, 16, 16)?);
                }
                fuse_volume(t, &p, &decoded)
            })?
        }
        GradTarget::Refiner => {
            let config = RefinerConfig {
                iterations: 2,
                gru_levels: 2,
                hidden_channels: 4,
                fused_channels: 4,
                encoder_channels: [2, 2, 2, 2],
                ..RefinerConfig::small(seed)
            };
            let refiner = Refiner::new(config.clone(), 3)?;
            let used: Params = {
                let mut p = Params::new();
                for (name, t) in refiner.params().iter() {
                    if !name.starts_with("enc") && !name.starts_with("dec") && !name.starts_with("fuse") {
                        p.insert(name, t.value.clone())?;
                    }
                }
                p
            };
            let (names, mut inputs) = params_inputs(&used);
            inputs.push(random(&mut rng, [1, 4, 8, 8], 1.0));
            inputs.push(random(&mut rng, [2, 1, 8, 8], 1.5));
            let n = names.len();
            let gt = random(&mut rng, [1, 1, 8, 8], 1.0).map(|v| v + 2.0);
            check_graph(inputs, seed, |t, v| {
                let p = bound(&names, &v[..n]);
                let out = refine_depth(t, &p, &config, v[n], v[n + 1], &[1.0, 3.0])?;
                t.loss(&out.preds, &gt, config.alpha)
            })?
        }
    };
    Ok(GradCheckRow {
        op: target.name(),
        max_rel_err,
        tolerance: target.tolerance(),
        scalars,
        kinks,
    })
}

pub fn grad_check_all(seed: u64) -> Result<Vec<GradCheckRow>> {
    GradTarget::ALL.iter().map(|&t| grad_check(t, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for t in GradTarget::ALL {
            assert_eq!(t.name().parse::<GradTarget>().unwrap(), t);
        }
        assert!("nope".parse::<GradTarget>().is_err());
    }

    #[test]
    fn linear_ops_match_finite_differences() {
        for t in [GradTarget::Conv2d, GradTarget::Conv3d, GradTarget::Resample, GradTarget::Loss] {
            let row = grad_check(t, 1).unwrap();
            assert!(row.passed(), "{row}");
        }
    }

    #[test]
    fn smooth_ops_match_finite_differences() {
        for t in [GradTarget::Gru, GradTarget::SoftArgmax, GradTarget::ConvexUpsample] {
            let row = grad_check(t, 2).unwrap();
            assert!(row.passed(), "{row}");
        }
    }

    #[test]
    fn unused_input_has_zero_error() {
        let inputs = vec![
            Tensor::new([1, 1, 1, 2], vec![-0.5, 0.7]).unwrap(),
            Tensor::new([1, 1, 1, 2], vec![3.0, 4.0]).unwrap(),
        ];
        let (err, scalars, kinks) = check_graph(inputs, 0, |t, v| {
            let r = t.relu(v[0]);
            t.mul(r, r)
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
        assert_eq!((scalars, kinks), (4, 0));
    }

    #[test]
    fn kinks_are_skipped_not_compared() {
        // |x| at x = 0 has one-sided slopes -1 and 1
        let inputs = vec![Tensor::new([1, 1, 1, 3], vec![0.0, 0.4, -0.3]).unwrap()];
        let (err, _, kinks) = check_graph(inputs, 3, |t, v| {
            let r = t.relu(v[0]);
            let s = t.sub(r, v[0])?;
            t.add(r, s)
        })
        .unwrap();
        assert_eq!(kinks, 1);
        assert!(err < 1e-9, "{err}");
    }
}
