use super::config::RefinerConfig;
use super::model::{stack_tensor, Refiner};
use super::tensor::Tensor;
use crate::augment::AugmentedStack;
use crate::defocus_sim::DepthMap;
use crate::error::{Error, Result};

/// Largest side `train_overfit` accepts.
pub const MAX_OVERFIT_SIDE: usize = 64;

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// `losses[i]` is the loss after `i` updates; `steps + 1` entries.
    pub losses: Vec<f64>,
    pub refiner: Refiner,
}

impl TrainReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.losses.last().copied().unwrap_or(f64::NAN) / self.losses[0]
    }

    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    }
}

/// Plain gradient descent on a single stack with freshly seeded parameters.
///
/// `gt` may be in any unit; it is converted to scene units with the
/// stack's focus distances, which is also the unit of every prediction.
pub fn train_overfit(
    stack: &AugmentedStack,
    gt: &DepthMap,
    config: &RefinerConfig,
    steps: usize,
    lr: f64,
) -> Result<TrainReport> {
    let input = stack_tensor(stack)?;
    let refiner = Refiner::new(config.clone(), input.c())?;
    train_from(refiner, stack, gt, steps, lr)
}

/// Same as [`train_overfit`] starting from existing parameters.
pub fn train_from(
    mut refiner: Refiner,
    stack: &AugmentedStack,
    gt: &DepthMap,
    steps: usize,
    lr: f64,
) -> Result<TrainReport> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    if stack.height().max(stack.width()) > MAX_OVERFIT_SIDE {
        return Err(Error::Invalid(format!(
            "overfit training is limited to {MAX_OVERFIT_SIDE}x{MAX_OVERFIT_SIDE} stacks"
        )));
    }
    if (gt.height(), gt.width()) != (stack.height(), stack.width()) {
        return Err(Error::Shape("ground truth and stack sizes differ".into()));
    }
    let input = stack_tensor(stack)?;
    let hyp = stack.focus_distances().to_vec();
    let gt = gt.to_scene_units(&hyp)?;
    let gt = Tensor::new([1, 1, gt.height(), gt.width()], gt.values().to_vec())?;
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        refiner.params_mut().zero_grad();
        let loss = refiner.loss_and_grad(&input, &hyp, &gt)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        if step < steps {
            refiner.params_mut().sgd_step(lr);
        }
    }
    Ok(TrainReport { losses, refiner })
}
