use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use minifocus::augment::{augment_stack, AifOptions, AugmentOptions, AugmentedStack, EodMode};
use minifocus::defocus_sim::{
    add_noise, blur_radius, ramp_scene, render_stack, step_scene, uniform_blur_stack, CameraModel, DepthMap,
    DepthUnit, FocalStack,
};
use minifocus::imgcore::{write_pfm, write_png, Image, PngDepth};
use minifocus::manifest::{load_augmented, load_stack, read_image, read_depth, write_augmented, write_stack};
use minifocus::refine::{grad_check, grad_check_all, train_from, GradTarget, Params, Refiner, RefinerConfig};
use minifocus::sff_classic::{
    build_focus_volume, compute_metrics, median_filter, soft_argmax_depth, textured_interior_mask, wta_depth,
    MetricReport,
};
use minifocus::{eod_theory, Error};

use crate::*;

type CmdResult<T = ()> = std::result::Result<T, Failure>;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CmdResult<T>;
}

impl<T> StageExt<T> for minifocus::Result<T> {
    fn stage(self, stage: &'static str) -> CmdResult<T> {
        self.map_err(|source| Failure::Stage { stage, source })
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_dir(path: &Path) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("output directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file {} does not exist", path.display())))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> minifocus::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> minifocus::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Loads a stack manifest; malformed manifests are configuration errors.
fn open_stack(path: &Path, select: Option<&[usize]>) -> CmdResult<FocalStack> {
    require_file(path)?;
    let (_, stack) = load_stack(path).map_err(|e| match e {
        Error::Json(e) => usage(format!("{}: {e}", path.display())),
        other => Failure::Stage {
            stage: "load",
            source: other,
        },
    })?;
    match select {
        Some(idx) => stack.select(idx).map_err(|e| usage(e.to_string())),
        None => Ok(stack),
    }
}

pub fn simulate(a: &SimulateArgs) -> CmdResult {
    require_dir(&a.out)?;
    let invalid = |e: Error| usage(format!("invalid camera or scene: {e}"));
    let stack = match a.builtin {
        Builtin::Fig1 => uniform_blur_stack(64, &a.sigmas, a.blur_constant).map_err(invalid)?,
        scene_kind => {
            let camera = CameraModel::new(a.blur_constant, a.focus.clone()).map_err(invalid)?;
            let scene = match scene_kind {
                Builtin::Step64 => step_scene(64, a.near, a.far),
                Builtin::Step32 => step_scene(32, a.near, a.far),
                _ => ramp_scene(64, a.near, a.far),
            }
            .map_err(invalid)?;
            if a.layers == 0 {
                return Err(usage("--layers must be >= 1"));
            }
            render_stack(&scene, &camera, a.layers).stage("render")?
        }
    };
    let stack = if a.noise > 0.0 {
        add_noise(&stack, a.noise, a.seed).stage("noise")?
    } else if a.noise < 0.0 || !a.noise.is_finite() {
        return Err(usage("--noise must be >= 0"));
    } else {
        stack
    };
    let path = write_stack(&a.out, &stack).stage("write")?;
    println!("{}", path.display());
    Ok(())
}

fn augment_options(f: &AugmentFlags) -> CmdResult<AugmentOptions> {
    if !(f.temperature > 0.0) || !f.temperature.is_finite() {
        return Err(usage("--temperature must be > 0"));
    }
    Ok(AugmentOptions {
        aif: AifOptions {
            temperature: f.temperature,
            smooth: f.smooth,
        },
        eod: match f.eod {
            EodArg::PerChannel => EodMode::PerChannel,
            EodArg::Luminance => EodMode::Luminance,
        },
    })
}

fn run_augment(stack: &FocalStack, flags: &AugmentFlags, out: &Path) -> CmdResult<(AugmentedStack, PathBuf)> {
    let aug = augment_stack(stack, &augment_options(flags)?).stage("augment")?;
    let path = write_augmented(out, &aug, flags.temperature, stack.gt_depth()).stage("write")?;
    Ok((aug, path))
}

pub fn augment(a: &AugmentArgs) -> CmdResult {
    require_dir(&a.out)?;
    augment_options(&a.flags)?;
    let stack = open_stack(&a.manifest, a.flags.select.as_deref())?;
    let (_, path) = run_augment(&stack, &a.flags, &a.out)?;
    println!("{}", path.display());
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> CmdResult {
    require_dir(&a.out)?;
    if a.sigmas.windows(2).any(|w| w[1] <= w[0]) || a.sigmas.iter().any(|&s| !(s >= 0.0)) {
        return Err(usage("--sigmas must be nonnegative and strictly increasing"));
    }
    let aif = match &a.aif {
        Some(p) => {
            require_file(p)?;
            read_image(p).stage("load")?
        }
        None => minifocus::defocus_sim::synthetic_aif(a.size, a.size, minifocus::defocus_sim::CHECKER_CELL)
            .map_err(|e| usage(e.to_string()))?,
    };
    let (curve, verdict) = eod_theory::verify(&aif, &a.sigmas).stage("verify")?;
    curve
        .write_csv(create(&a.out.join("energy_curve.csv")).stage("write")?)
        .stage("write")?;
    write_json(&a.out.join("verdict.json"), &verdict).stage("write")?;
    println!("{}", serde_json::to_string(&verdict).expect("verdict serializes"));
    Ok(())
}

fn classical_depth(stack: &FocalStack, f: &DepthFlags) -> CmdResult<DepthMap> {
    let fv = build_focus_volume(stack).stage("focus_volume")?;
    let d = match f.method {
        DepthMethod::Wta => wta_depth(&fv),
        DepthMethod::Soft => soft_argmax_depth(&fv, f.depth_temperature),
    }
    .stage("depth")?;
    if f.median > 0 {
        median_filter(&d, f.median).stage("depth")
    } else {
        Ok(d)
    }
}

/// Writes `name.pfm` and a `name.png` preview spanning the focus range.
fn write_depth(out: &Path, name: &str, d: &DepthMap, focus: &[f64]) -> minifocus::Result<()> {
    write_pfm(out.join(format!("{name}.pfm")), &d.to_image())?;
    let lo = focus.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = focus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let preview = d.to_image().map(|v| ((v - lo) / span).clamp(0.0, 1.0))?;
    write_png(out.join(format!("{name}.png")), &preview, PngDepth::Eight)
}

pub fn depth(a: &DepthArgs) -> CmdResult {
    require_dir(&a.out)?;
    if a.flags.method == DepthMethod::Soft && !(a.flags.depth_temperature > 0.0) {
        return Err(usage("--depth-temperature must be > 0"));
    }
    let stack = open_stack(&a.manifest, a.select.as_deref())?;
    let d = classical_depth(&stack, &a.flags)?;
    write_depth(&a.out, "depth", &d, stack.focus_distances()).stage("write")?;
    println!("{}", a.out.join("depth.pfm").display());
    Ok(())
}

fn load_config(f: &RefineFlags) -> CmdResult<RefinerConfig> {
    let mut config = match &f.config {
        Some(p) => {
            require_file(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RefinerConfig::default(),
    };
    if let Some(seed) = f.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    if !(f.lr >= 0.0) || !f.lr.is_finite() {
        return Err(usage("--lr must be >= 0"));
    }
    if let Some(p) = &f.checkpoint {
        require_file(p)?;
    }
    Ok(config)
}

/// Trains if asked, predicts, and writes every iteration's depth, the loss
/// trace and the final parameters into `out`. Returns the final depth.
fn run_refine(
    aug: &AugmentedStack,
    gt: Option<&DepthMap>,
    config: RefinerConfig,
    f: &RefineFlags,
    out: &Path,
) -> CmdResult<DepthMap> {
    let mut refiner = Refiner::new(config.clone(), aug.channels() * 3).stage("refine")?;
    if let Some(p) = &f.checkpoint {
        let params = Params::load(p).stage("checkpoint")?;
        refiner = Refiner::with_params(config.clone(), aug.channels() * 3, &params).stage("checkpoint")?;
    }
    if f.steps > 0 && gt.is_none() {
        return Err(usage("--steps needs ground-truth depth in the manifest"));
    }
    if let Some(gt) = gt {
        let report = train_from(refiner, aug, gt, f.steps, f.lr).stage("train")?;
        report
            .write_csv(create(&out.join("loss_trace.csv")).stage("write")?)
            .stage("write")?;
        refiner = report.refiner;
    }
    let pred = refiner.predict(aug).stage("refine")?;
    let focus = aug.focus_distances();
    write_depth(out, "depth_init", &pred.initial, focus).stage("write")?;
    for (t, d) in pred.iterations.iter().enumerate() {
        write_depth(out, &format!("depth_iter_{:02}", t + 1), d, focus).stage("write")?;
    }
    refiner.params().save(out.join("checkpoint.bin")).stage("write")?;
    write_json(&out.join("config.json"), &config).stage("write")?;
    Ok(pred.last().clone())
}

pub fn refine(a: &RefineArgs) -> CmdResult {
    require_dir(&a.out)?;
    require_file(&a.augmented)?;
    let config = load_config(&a.flags)?;
    let (_, aug, gt) = load_augmented(&a.augmented).map_err(|e| match e {
        Error::Json(e) => usage(format!("{}: {e}", a.augmented.display())),
        other => Failure::Stage {
            stage: "load",
            source: other,
        },
    })?;
    run_refine(&aug, gt.as_ref(), config, &a.flags, &a.out)?;
    println!("{}", a.out.join("checkpoint.bin").display());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let rows = match &a.op {
        Some(name) => vec![grad_check(name.parse::<GradTarget>().map_err(|e| usage(e.to_string()))?, a.seed)
            .stage("gradcheck")?],
        None => grad_check_all(a.seed).stage("gradcheck")?,
    };
    println!(
        "{:<16} {:>12} {:>10} {:>8} {:>6} status",
        "op", "max_rel_err", "tol", "scalars", "kinks"
    );
    for row in &rows {
        println!("{row}");
    }
    if let Some(p) = &a.json {
        write_json(p, &rows).stage("write")?;
    }
    match rows.iter().find(|r| !r.passed()) {
        Some(r) => Err(Failure::Stage {
            stage: "gradcheck",
            source: Error::Invalid(format!("{} exceeds tolerance", r.op)),
        }),
        None => Ok(()),
    }
}

/// Focus distances and scene units both measure distance along the optical
/// axis; only that relabelling is applied before scoring.
fn as_scene_units(d: DepthMap) -> minifocus::Result<DepthMap> {
    match d.unit() {
        DepthUnit::FocusDistance => d.to_scene_units(&[]),
        _ => Ok(d),
    }
}

fn score(pred: DepthMap, gt: DepthMap, mask: Option<&[bool]>) -> CmdResult<MetricReport> {
    let pred = as_scene_units(pred).stage("metrics")?;
    let gt = as_scene_units(gt).stage("metrics")?;
    compute_metrics(&pred, &gt, mask).stage("metrics")
}

pub fn metrics(a: &MetricsArgs) -> CmdResult {
    require_file(&a.pred)?;
    require_file(&a.gt)?;
    let pred = read_depth(&a.pred, a.pred_unit).stage("load")?;
    let gt = read_depth(&a.gt, a.gt_unit).stage("load")?;
    let mask = match &a.mask_aif {
        Some(p) => {
            require_file(p)?;
            let aif = read_image(p).stage("load")?;
            Some(textured_interior_mask(&aif, &gt, a.margin, a.threshold).stage("metrics")?)
        }
        None => None,
    };
    let report = score(pred, gt, mask.as_deref())?;
    if let Some(p) = &a.out {
        write_json(p, &report).stage("write")?;
    }
    println!("{report}");
    Ok(())
}

/// Three times the widest blur radius any ground-truth depth sees, rounded up.
fn default_margin(stack: &FocalStack, gt: &DepthMap) -> usize {
    let (lo, hi) = gt.min_max();
    let widest = stack
        .focus_distances()
        .iter()
        .flat_map(|&zf| [lo, hi].map(|z| blur_radius(z, zf, stack.camera().blur_constant())))
        .fold(0.0, f64::max);
    (3.0 * widest).ceil() as usize
}

pub fn pipeline(a: &PipelineArgs) -> CmdResult {
    require_dir(&a.out)?;
    augment_options(&a.augment)?;
    let config = match a.method {
        PipelineMethod::Refine => Some(load_config(&a.refine)?),
        PipelineMethod::Classical => None,
    };
    let stack = open_stack(&a.manifest, a.augment.select.as_deref())?;
    let gt = stack
        .gt_depth()
        .cloned()
        .ok_or_else(|| usage("the manifest has no ground-truth depth to score against"))?;

    let aug_dir = a.out.join("augmented");
    std::fs::create_dir_all(&aug_dir).map_err(Error::from).stage("write")?;
    let (aug, _) = run_augment(&stack, &a.augment, &aug_dir)?;

    let pred = match config {
        None => {
            let d = classical_depth(&stack, &a.depth)?;
            write_depth(&a.out, "depth", &d, stack.focus_distances()).stage("write")?;
            d
        }
        Some(config) => {
            let refine_dir = a.out.join("refine");
            std::fs::create_dir_all(&refine_dir).map_err(Error::from).stage("write")?;
            let d = run_refine(&aug, Some(&gt), config, &a.refine, &refine_dir)?;
            write_depth(&a.out, "depth", &d, stack.focus_distances()).stage("write")?;
            d
        }
    };

    let texture: &Image = stack.gt_aif().unwrap_or(aug.aif());
    let margin = a.mask.margin.unwrap_or_else(|| default_margin(&stack, &gt));
    let mask = textured_interior_mask(texture, &gt, margin, a.mask.threshold).stage("metrics")?;
    let report = score(pred, gt, Some(&mask))?;
    write_json(&a.out.join("metrics.json"), &report).stage("write")?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{report}").ok();
    Ok(())
}
