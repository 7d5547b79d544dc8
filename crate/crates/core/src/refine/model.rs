//! Deep focus volume and recurrent depth refinement.
//!
//! The layer functions take a [`Tape`] and a [`Bound`] parameter set so the
//! same code serves inference, training and gradient checks.

use super::config::RefinerConfig;
use super::params::{Bound, Params};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::augment::AugmentedStack;
use crate::defocus_sim::{DepthMap, DepthUnit};
use crate::error::{Error, Result};

/// Smallest input side the four stride-2 stages accept.
pub const MIN_INPUT_SIDE: usize = 16;
pub const DECODER_BLOCKS: usize = 2;

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    tape.conv2d(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?, stride, pad)
}

fn conv3(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    tape.conv3d(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?)
}

/// Four feature volumes `A_1..A_4`, each stage a stride-2 3x3 convolution
/// and ReLU applied to every slice with shared weights.
pub fn encode_features(tape: &mut Tape, p: &Bound, input: Var) -> Result<[Var; 4]> {
    let [_, _, h, w] = tape.shape(input);
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(Error::Shape(format!(
            "input {h}x{w} is below the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} encoder minimum"
        )));
    }
    let mut x = input;
    let mut out = [input; 4];
    for (n, slot) in out.iter_mut().enumerate() {
        let y = conv(tape, p, &format!("enc{}", n + 1), x, 2, 1)?;
        x = tape.relu(y);
        *slot = x;
    }
    Ok(out)
}

/// Residual 3-D decoder of one feature volume, projected to one channel:
/// `Z x C_n x H_n x W_n` to `R_n` of shape `Z x 1 x H_n x W_n`.
pub fn decode_volume(tape: &mut Tape, p: &Bound, level: usize, a: Var) -> Result<Var> {
    let mut x = a;
    for j in 1..=DECODER_BLOCKS {
        let prefix = format!("dec{level}.blk{j}");
        let y = conv3(tape, p, &format!("{prefix}.c1"), x)?;
        let y = tape.relu(y);
        let y = conv3(tape, p, &format!("{prefix}.c2"), y)?;
        let s = tape.add(x, y)?;
        x = tape.relu(s);
    }
    conv3(tape, p, &format!("dec{level}.proj"), x)
}

/// `G`: the decoded volumes stacked as channels, projected by a 3-D
/// convolution to `J` and averaged over slices.
pub fn fuse_volume(tape: &mut Tape, p: &Bound, decoded: &[Var]) -> Result<Var> {
    let first = tape.shape(*decoded.first().ok_or_else(|| Error::Invalid("nothing to fuse".into()))?);
    for &r in decoded {
        let s = tape.shape(r);
        if s != [first[0], 1, first[2], first[3]] {
            return Err(Error::Shape(format!("decoded volumes differ: {first:?} vs {s:?}")));
        }
    }
    let stacked = tape.concat(decoded)?;
    let j = conv3(tape, p, "fuse", stacked)?;
    Ok(tape.mean_slices(j))
}

/// One ConvGRU update of hidden state `h` with input `x`.
pub fn gru_step(tape: &mut Tape, p: &Bound, prefix: &str, h: Var, x: Var) -> Result<Var> {
    let hx = tape.concat(&[h, x])?;
    let z = conv(tape, p, &format!("{prefix}.z"), hx, 1, 1)?;
    let z = tape.sigmoid(z);
    let r = conv(tape, p, &format!("{prefix}.r"), hx, 1, 1)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let rhx = tape.concat(&[rh, x])?;
    let q = conv(tape, p, &format!("{prefix}.q"), rhx, 1, 1)?;
    let q = tape.tanh(q);
    // h + z (q - h) == (1 - z) h + z q
    let d = tape.sub(q, h)?;
    let zd = tape.mul(z, d)?;
    tape.add(h, zd)
}

/// Everything the refinement loop produces, as tape handles.
pub struct Refinement {
    /// Initial depth at full resolution.
    pub d0_full: Var,
    /// Initial depth at working resolution.
    pub d0: Var,
    /// `D_t` at working resolution.
    pub depths: Vec<Var>,
    /// `Delta D_t` at working resolution.
    pub deltas: Vec<Var>,
    /// Convex-upsampling logits of each iteration.
    pub masks: Vec<Var>,
    /// Convex-upsampled `D_t`.
    pub preds: Vec<Var>,
    /// Hidden states after each iteration, finest level first.
    pub hidden: Vec<Vec<Var>>,
}

/// Coarse-to-fine ConvGRU refinement seeded by a soft-argmax over `r1`.
///
/// Per iteration, level `K` sees the pooled previous hidden state of level
/// `K-1`; middle levels see that plus the bilinearly upsampled fresh state
/// of the level above; level 1 sees the upsampled level-2 state and the
/// focus-depth features `B = relu(conv(cat(G, D)))`.
pub fn refine_depth(
    tape: &mut Tape,
    p: &Bound,
    config: &RefinerConfig,
    g: Var,
    r1: Var,
    hypotheses: &[f64],
) -> Result<Refinement> {
    config.validate()?;
    let [_, gc, h, w] = tape.shape(g);
    let rs = tape.shape(r1);
    if (rs[2], rs[3]) != (h, w) || tape.shape(g)[0] != 1 {
        return Err(Error::Shape(format!("G {:?} and R1 {rs:?} disagree", tape.shape(g))));
    }
    if gc != config.fused_channels {
        return Err(Error::Shape(format!("G has {gc} channels, config says {}", config.fused_channels)));
    }
    let m = config.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not a multiple of {m}")));
    }
    let f = config.downsample_factor;
    let k_levels = config.gru_levels;
    let ch = config.hidden_channels;

    let d0_full = tape.soft_argmax(r1, hypotheses)?;
    let d0 = tape.avg_pool(d0_full, f)?;
    let g_work = tape.avg_pool(g, f)?;
    let (hw, ww) = (h / f, w / f);
    let mut hidden: Vec<Var> = (0..k_levels)
        .map(|k| tape.leaf(Tensor::zeros([1, ch, hw >> k, ww >> k])))
        .collect();

    let mut d = d0;
    let mut out = Refinement {
        d0_full,
        d0,
        depths: Vec::new(),
        deltas: Vec::new(),
        masks: Vec::new(),
        preds: Vec::new(),
        hidden: Vec::new(),
    };
    for _ in 0..config.iterations {
        let gd = tape.concat(&[g_work, d])?;
        let b = conv(tape, p, "ctx", gd, 1, 1)?;
        let b = tape.relu(b);
        let mut fresh = hidden.clone();
        for k in (0..k_levels).rev() {
            let (hk, wk) = (hw >> k, ww >> k);
            let mut parts = Vec::with_capacity(2);
            if k == 0 {
                parts.push(b);
            } else {
                parts.push(tape.avg_pool(hidden[k - 1], 2)?);
            }
            if k + 1 < k_levels {
                parts.push(tape.resize(fresh[k + 1], hk, wk)?);
            }
            let x = tape.concat(&parts)?;
            fresh[k] = gru_step(tape, p, &format!("gru{}", k + 1), hidden[k], x)?;
        }
        hidden = fresh;

        let y = conv(tape, p, "head.c1", hidden[0], 1, 1)?;
        let y = tape.relu(y);
        let delta = conv(tape, p, "head.c2", y, 1, 1)?;
        d = tape.add(d, delta)?;

        let y = conv(tape, p, "mask.c1", hidden[0], 1, 1)?;
        let y = tape.relu(y);
        let mask = conv(tape, p, "mask.c2", y, 1, 0)?;
        let pred = tape.convex_upsample(d, mask, f)?;

        out.depths.push(d);
        out.deltas.push(delta);
        out.masks.push(mask);
        out.preds.push(pred);
        out.hidden.push(hidden.clone());
    }
    Ok(out)
}

/// Handles of a full forward pass.
pub struct Forward {
    pub features: [Var; 4],
    /// `R_1..R_4` at input resolution.
    pub decoded: Vec<Var>,
    pub fused: Var,
    pub refinement: Refinement,
}

/// Encoder, decoder, fusion and refinement on a `Z x C_in x H x W` input.
pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    config: &RefinerConfig,
    input: Var,
    hypotheses: &[f64],
) -> Result<Forward> {
    let [_, _, h, w] = tape.shape(input);
    let features = encode_features(tape, p, input)?;
    let mut decoded = Vec::with_capacity(4);
    for (n, &a) in features.iter().enumerate() {
        let r = decode_volume(tape, p, n + 1, a)?;
        decoded.push(tape.resize(r, h, w)?);
    }
    let fused = fuse_volume(tape, p, &decoded)?;
    let refinement = refine_depth(tape, p, config, fused, decoded[0], hypotheses)?;
    Ok(Forward {
        features,
        decoded,
        fused,
        refinement,
    })
}

fn conv_shape(cout: usize, cin: usize, k: usize) -> [usize; 4] {
    [cout, cin, k, k]
}

fn conv3_shape(cout: usize, cin: usize) -> [usize; 4] {
    [cout, cin, 3, 9]
}

/// Parameter names and weight shapes in registration order.
pub fn parameter_layout(config: &RefinerConfig, in_channels: usize) -> Vec<(String, [usize; 4])> {
    let mut layout = Vec::new();
    let mut add = |name: String, shape: [usize; 4]| {
        layout.push((format!("{name}.w"), shape));
        layout.push((format!("{name}.b"), [1, shape[0], 1, 1]));
    };
    let enc = config.encoder_channels;
    let mut cin = in_channels;
    for (n, &c) in enc.iter().enumerate() {
        add(format!("enc{}", n + 1), conv_shape(c, cin, 3));
        cin = c;
    }
    for (n, &c) in enc.iter().enumerate() {
        for j in 1..=DECODER_BLOCKS {
            add(format!("dec{}.blk{j}.c1", n + 1), conv3_shape(c, c));
            add(format!("dec{}.blk{j}.c2", n + 1), conv3_shape(c, c));
        }
        add(format!("dec{}.proj", n + 1), conv3_shape(1, c));
    }
    add("fuse".into(), conv3_shape(config.fused_channels, 4));
    add(
        "ctx".into(),
        conv_shape(config.fused_channels, config.fused_channels + 1, 3),
    );
    layout.extend(gru_layout(config));
    let ch = config.hidden_channels;
    let f = config.downsample_factor;
    let mut add = |name: &str, shape: [usize; 4]| {
        layout.push((format!("{name}.w"), shape));
        layout.push((format!("{name}.b"), [1, shape[0], 1, 1]));
    };
    add("head.c1", conv_shape(ch, ch, 3));
    add("head.c2", conv_shape(1, ch, 3));
    add("mask.c1", conv_shape(ch, ch, 3));
    add("mask.c2", conv_shape(9 * f * f, ch, 1));
    layout
}

/// Input channels of ConvGRU level `k` (1-based).
pub fn gru_input_channels(config: &RefinerConfig, k: usize) -> usize {
    let ch = config.hidden_channels;
    let from_above = if k < config.gru_levels { ch } else { 0 };
    let own = if k == 1 { config.fused_channels } else { ch };
    own + from_above
}

fn gru_layout(config: &RefinerConfig) -> Vec<(String, [usize; 4])> {
    let ch = config.hidden_channels;
    let mut layout = Vec::new();
    for k in 1..=config.gru_levels {
        let cin = ch + gru_input_channels(config, k);
        for gate in ["z", "r", "q"] {
            layout.push((format!("gru{k}.{gate}.w"), conv_shape(ch, cin, 3)));
            layout.push((format!("gru{k}.{gate}.b"), [1, ch, 1, 1]));
        }
    }
    layout
}

/// Allocates `layout` and draws every tensor with the fan-in of its layer,
/// the product of the weight's trailing dims.
fn init_params(layout: &[(String, [usize; 4])], seed: u64) -> Result<Params> {
    let mut params = Params::new();
    for (name, shape) in layout {
        params.insert(name.clone(), Tensor::zeros(*shape))?;
    }
    let fans: std::collections::HashMap<String, usize> = layout
        .iter()
        .filter(|(n, _)| n.ends_with(".w"))
        .map(|(n, s)| (n.trim_end_matches(".w").to_string(), s[1] * s[2] * s[3]))
        .collect();
    params.init_uniform(seed, |name| {
        let base = name.rsplit_once('.').map_or(name, |(b, _)| b);
        fans.get(base).copied().unwrap_or(1)
    });
    Ok(params)
}

/// Parameters of a single ConvGRU with `in_channels` inputs, named
/// `{prefix}.{z,r,q}.{w,b}`.
pub fn gru_params(prefix: &str, hidden: usize, in_channels: usize, seed: u64) -> Result<Params> {
    let mut layout = Vec::new();
    for gate in ["z", "r", "q"] {
        layout.push((format!("{prefix}.{gate}.w"), conv_shape(hidden, hidden + in_channels, 3)));
        layout.push((format!("{prefix}.{gate}.b"), [1, hidden, 1, 1]));
    }
    init_params(&layout, seed)
}

/// Full-resolution depth estimates of one forward pass, `D_1..D_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub initial: DepthMap,
    pub iterations: Vec<DepthMap>,
}

impl Prediction {
    pub fn last(&self) -> &DepthMap {
        self.iterations.last().expect("at least one iteration")
    }
}

/// The refiner with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    config: RefinerConfig,
    in_channels: usize,
    params: Params,
}

pub(crate) fn depth_from_tensor(t: &Tensor) -> Result<DepthMap> {
    DepthMap::new(t.h(), t.w(), t.data().to_vec(), DepthUnit::FocusDistance)
}

impl Refiner {
    /// Fresh parameters initialized from `config.seed`.
    pub fn new(config: RefinerConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        if in_channels == 0 {
            return Err(Error::Invalid("refiner needs at least one input channel".into()));
        }
        let params = init_params(&parameter_layout(&config, in_channels), config.seed)?;
        Ok(Refiner {
            config,
            in_channels,
            params,
        })
    }

    /// Uses `params` after checking names and shapes against the layout.
    pub fn with_params(config: RefinerConfig, in_channels: usize, params: &Params) -> Result<Self> {
        let mut r = Refiner::new(config, in_channels)?;
        r.params.assign_from(params)?;
        Ok(r)
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_input(&self, input: &Tensor, hypotheses: &[f64]) -> Result<()> {
        if input.c() != self.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, refiner expects {}",
                input.c(),
                self.in_channels
            )));
        }
        if input.n() != hypotheses.len() || input.n() < 2 {
            return Err(Error::Shape(format!(
                "{} slices with {} focus distances",
                input.n(),
                hypotheses.len()
            )));
        }
        Ok(())
    }

    /// Records a forward pass; the returned [`Bound`] maps parameters to
    /// their tape leaves.
    pub fn record(&self, tape: &mut Tape, input: &Tensor, hypotheses: &[f64]) -> Result<(Bound, Var, Forward)> {
        self.check_input(input, hypotheses)?;
        let bound = self.params.bind(tape);
        let x = tape.leaf(input.clone());
        let fwd = forward(tape, &bound, &self.config, x, hypotheses)?;
        Ok((bound, x, fwd))
    }

    pub fn predict_tensor(&self, input: &Tensor, hypotheses: &[f64]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let (_, _, fwd) = self.record(&mut tape, input, hypotheses)?;
        let r = &fwd.refinement;
        Ok(Prediction {
            initial: depth_from_tensor(tape.value(r.d0_full))?,
            iterations: r
                .preds
                .iter()
                .map(|&v| depth_from_tensor(tape.value(v)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn predict(&self, aug: &AugmentedStack) -> Result<Prediction> {
        self.predict_tensor(&stack_tensor(aug)?, aug.focus_distances())
    }

    /// Loss of one forward pass; gradients are added to the parameters'
    /// `grad` fields.
    pub fn loss_and_grad(&mut self, input: &Tensor, hypotheses: &[f64], gt: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (bound, _, fwd) = self.record(&mut tape, input, hypotheses)?;
        let loss = tape.loss(&fwd.refinement.preds, gt, self.config.alpha)?;
        let value = tape.value(loss).data()[0];
        if value.is_finite() {
            let grads = tape.backward(loss)?;
            self.params.accumulate(&bound, &grads);
        }
        Ok(value)
    }
}

/// `Z x 3C x H x W` input tensor: each slice followed by the AiF and its EOD.
pub fn stack_tensor(aug: &AugmentedStack) -> Result<Tensor> {
    let (z, c, h, w, data) = aug.per_slice_channels();
    Tensor::new([z, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::tape::{conv2d_forward, convex_upsample_forward};
    use crate::test_util::random_image;

    fn random_tensor(shape: [usize; 4], seed: u64, scale: f64) -> Tensor {
        let img = random_image(shape.iter().product(), 1, 1, seed);
        Tensor::new(shape, img.data().iter().map(|v| (2.0 * v - 1.0) * scale).collect()).unwrap()
    }

    fn tiny() -> RefinerConfig {
        RefinerConfig {
            hidden_channels: 4,
            fused_channels: 3,
            encoder_channels: [2, 3, 3, 2],
            ..RefinerConfig::small(5)
        }
    }

    #[test]
    fn layout_matches_gru_inputs() {
        let c = RefinerConfig::default();
        assert_eq!(gru_input_channels(&c, 1), 64 + 128);
        assert_eq!(gru_input_channels(&c, 2), 256);
        assert_eq!(gru_input_channels(&c, 3), 128);
        let single = RefinerConfig { gru_levels: 1, ..c };
        assert_eq!(gru_input_channels(&single, 1), 64);
    }

    #[test]
    fn init_is_seeded() {
        let a = Refiner::new(tiny(), 3).unwrap();
        let b = Refiner::new(tiny(), 3).unwrap();
        assert_eq!(a, b);
        let c = Refiner::new(RefinerConfig { seed: 6, ..tiny() }, 3).unwrap();
        assert_ne!(a.params(), c.params());
        assert!(Refiner::with_params(tiny(), 9, a.params()).is_err());
    }

    #[test]
    fn encoder_shapes_and_minimum() {
        let r = Refiner::new(tiny(), 3).unwrap();
        for z in [2, 3] {
            let mut tape = Tape::new();
            let p = r.params().bind(&mut tape);
            let x = tape.leaf(random_tensor([z, 3, 32, 16], 1, 1.0));
            let a = encode_features(&mut tape, &p, x).unwrap();
            let shapes: Vec<[usize; 4]> = a.iter().map(|&v| tape.shape(v)).collect();
            assert_eq!(shapes, vec![[z, 2, 16, 8], [z, 3, 8, 4], [z, 3, 4, 2], [z, 2, 2, 1]]);
        }
        let mut tape = Tape::new();
        let p = r.params().bind(&mut tape);
        let small = tape.leaf(Tensor::zeros([2, 3, 15, 32]));
        assert!(encode_features(&mut tape, &p, small).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut r = Refiner::new(tiny(), 3).unwrap();
        for (name, t) in r.params_mut().iter_mut() {
            if name.starts_with("enc") && name.ends_with(".b") {
                t.value.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let p = r.params().bind(&mut tape);
        let x = tape.leaf(Tensor::zeros([2, 3, 16, 16]));
        for a in encode_features(&mut tape, &p, x).unwrap() {
            assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fused_shape_is_independent_of_slice_count() {
        let r = Refiner::new(tiny(), 3).unwrap();
        for z in [2, 3, 5] {
            let mut tape = Tape::new();
            let p = r.params().bind(&mut tape);
            let x = tape.leaf(random_tensor([z, 3, 16, 16], z as u64, 1.0));
            let hyp: Vec<f64> = (1..=z).map(|v| v as f64).collect();
            let fwd = forward(&mut tape, &p, r.config(), x, &hyp).unwrap();
            assert_eq!(tape.shape(fwd.fused), [1, 3, 16, 16]);
            for &d in &fwd.decoded {
                assert_eq!(tape.shape(d), [z, 1, 16, 16]);
            }
        }
    }

    #[test]
    fn slice_mean_examples() {
        let mut tape = Tape::new();
        let one = random_tensor([1, 3, 4, 4], 9, 1.0);
        let same = Tensor::new([3, 3, 4, 4], one.data().repeat(3)).unwrap();
        let v = tape.leaf(same);
        let g = tape.mean_slices(v);
        assert!(tape.value(g).max_abs_diff(&one) < 1e-15);

        let j = random_tensor([3, 2, 4, 4], 10, 1.0);
        let mut doubled = Vec::new();
        for s in 0..3 {
            let block = &j.data()[s * 32..(s + 1) * 32];
            doubled.extend_from_slice(block);
            doubled.extend_from_slice(block);
        }
        let a = tape.leaf(j);
        let b = tape.leaf(Tensor::new([6, 2, 4, 4], doubled).unwrap());
        let (ga, gb) = (tape.mean_slices(a), tape.mean_slices(b));
        assert!(tape.value(ga).max_abs_diff(tape.value(gb)) < 1e-6);
    }

    #[test]
    fn fuse_rejects_mismatched_resolutions() {
        let r = Refiner::new(tiny(), 3).unwrap();
        let mut tape = Tape::new();
        let p = r.params().bind(&mut tape);
        let a = tape.leaf(Tensor::zeros([2, 1, 8, 8]));
        let b = tape.leaf(Tensor::zeros([2, 1, 4, 4]));
        assert!(fuse_volume(&mut tape, &p, &[a, a, a, b]).is_err());
    }

    #[test]
    fn gru_zero_params_example() {
        let p = gru_params("g", 2, 3, 0).unwrap();
        let mut zero = p.clone();
        for (_, t) in zero.iter_mut() {
            t.value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = zero.bind(&mut tape);
        let h = tape.leaf(Tensor::zeros([1, 2, 4, 4]));
        let x = tape.leaf(Tensor::zeros([1, 3, 4, 4]));
        let out = gru_step(&mut tape, &b, "g", h, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_hidden_stays_in_open_interval() {
        let mut p = gru_params("g", 3, 2, 4).unwrap();
        // strong but not saturating in f64, where tanh rounds to exactly 1
        for (_, t) in p.iter_mut() {
            t.value = t.value.map(|v| v * 4.0);
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let mut h = tape.leaf(random_tensor([1, 3, 5, 5], 1, 0.999));
        for step in 0..6 {
            let x = tape.leaf(random_tensor([1, 2, 5, 5], 100 + step, 3.0));
            h = gru_step(&mut tape, &b, "g", h, x).unwrap();
            assert!(tape.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    fn refine_inputs(tape: &mut Tape, c: &RefinerConfig, z: usize, side: usize) -> (Var, Var, Vec<f64>) {
        let g = tape.leaf(random_tensor([1, c.fused_channels, side, side], 11, 1.0));
        let r1 = tape.leaf(random_tensor([z, 1, side, side], 12, 2.0));
        (g, r1, (0..z).map(|i| 1.0 + i as f64).collect())
    }

    #[test]
    fn telescoping_and_hidden_bounds() {
        let c = tiny();
        let r = Refiner::new(c.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let p = r.params().bind(&mut tape);
        let (g, r1, hyp) = refine_inputs(&mut tape, &c, 3, 16);
        let out = refine_depth(&mut tape, &p, &c, g, r1, &hyp).unwrap();
        assert_eq!(out.preds.len(), 4);
        let d0 = tape.value(out.d0).clone();
        let mut sum = d0.clone();
        for &dd in &out.deltas {
            sum.add_assign(tape.value(dd));
        }
        let last = tape.value(*out.depths.last().unwrap());
        assert!(sum.max_abs_diff(last) < 1e-6);
        for level in out.hidden.iter().flatten() {
            assert!(tape.value(*level).data().iter().all(|v| v.abs() < 1.0));
        }
        assert_eq!(tape.shape(out.preds[0]), [1, 1, 16, 16]);
    }

    #[test]
    fn zero_head_keeps_initial_depth() {
        let c = tiny();
        let mut r = Refiner::new(c.clone(), 3).unwrap();
        for name in ["head.c2.w", "head.c2.b"] {
            r.params_mut().get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = r.params().bind(&mut tape);
        let (g, r1, hyp) = refine_inputs(&mut tape, &c, 2, 16);
        let out = refine_depth(&mut tape, &p, &c, g, r1, &hyp).unwrap();
        for (&pred, &mask) in out.preds.iter().zip(&out.masks) {
            let up = convex_upsample_forward(tape.value(out.d0), tape.value(mask), c.downsample_factor).unwrap();
            assert_eq!(tape.value(pred), &up);
        }
        for &d in &out.depths {
            assert_eq!(tape.value(d), tape.value(out.d0));
        }
    }

    #[test]
    fn single_iteration_is_a_prefix() {
        let c = tiny();
        let r = Refiner::new(c.clone(), 3).unwrap();
        let run = |iterations| {
            let c = RefinerConfig { iterations, ..c.clone() };
            let mut tape = Tape::new();
            let p = r.params().bind(&mut tape);
            let (g, r1, hyp) = refine_inputs(&mut tape, &c, 2, 16);
            let out = refine_depth(&mut tape, &p, &c, g, r1, &hyp).unwrap();
            tape.value(out.preds[0]).clone()
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn refine_rejects_bad_sizes() {
        let c = tiny();
        let r = Refiner::new(c.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let p = r.params().bind(&mut tape);
        let (g, r1, hyp) = refine_inputs(&mut tape, &c, 2, 12);
        assert!(refine_depth(&mut tape, &p, &c, g, r1, &hyp).is_err());
        let (g, r1, _) = refine_inputs(&mut tape, &c, 2, 16);
        assert!(refine_depth(&mut tape, &p, &c, g, r1, &[1.0]).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let r = Refiner::new(tiny(), 3).unwrap();
        let input = random_tensor([2, 3, 16, 16], 3, 1.0);
        let a = r.predict_tensor(&input, &[1.0, 3.0]).unwrap();
        let b = r.predict_tensor(&input, &[1.0, 3.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iterations.len(), 4);
        assert_eq!(a.last().unit(), DepthUnit::FocusDistance);
    }

    #[test]
    fn mask_head_is_pointwise() {
        let c = tiny();
        let r = Refiner::new(c, 3).unwrap();
        let w = &r.params().get("mask.c2.w").unwrap().value;
        assert_eq!(w.shape(), [36, 4, 1, 1]);
        let x = random_tensor([1, 4, 3, 3], 2, 1.0);
        let b = Tensor::zeros([1, 36, 1, 1]);
        let y = conv2d_forward(&x, w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 36, 3, 3]);
    }
}
