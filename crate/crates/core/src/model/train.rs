use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Mlp, ModelError};
use crate::calibration::{objective_and_grad, CalibSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Upper bound on epochs; training usually stops earlier.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// An epoch counts as stalled when it improves the best loss by less than this.
    pub early_stop_tol: f64,
    /// Stop after this many consecutive stalled epochs.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 100, batch_size: 64, learning_rate: 1e-3, early_stop_tol: 1e-4, patience: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
}

fn check_set(model: &Mlp, x: ArrayView2<f64>, y: &[usize]) -> Result<(), ModelError> {
    if x.nrows() == 0 {
        return Err(ModelError::EmptyTrainSet);
    }
    if x.nrows() != y.len() {
        return Err(ModelError::ShapeMismatch(format!("{} rows, {} labels", x.nrows(), y.len())));
    }
    model.check_input(x)
}

fn batch_step(
    model: &mut Mlp,
    xb: ArrayView2<f64>,
    yb: &[usize],
    spec: &CalibSpec,
) -> Result<(f64, super::Gradients), ModelError> {
    let trace = model.forward_stacked(xb, spec.training_passes())?;
    let (loss, dlogits) = objective_and_grad(spec, trace.probs.view(), yb)?;
    let grads = model.backward(&trace, dlogits.view());
    Ok((loss, grads))
}

/// Training objective over the whole set in train mode, without updating.
pub fn objective(
    model: &mut Mlp,
    x: ArrayView2<f64>,
    y: &[usize],
    spec: &CalibSpec,
    batch_size: usize,
) -> Result<f64, ModelError> {
    check_set(model, x, y)?;
    spec.validate()?;
    let mut total = 0.0;
    for start in (0..y.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(y.len());
        let trace = model.forward_stacked(x.slice(ndarray::s![start..end, ..]), spec.training_passes())?;
        let (loss, _) = objective_and_grad(spec, trace.probs.view(), &y[start..end])?;
        total += loss * (end - start) as f64;
    }
    Ok(total / y.len() as f64)
}

/// Mini-batch Adam on the calibrated objective, with early stopping on the
/// epoch-mean training loss.
pub fn train<R: Rng + ?Sized>(
    model: &mut Mlp,
    x: ArrayView2<f64>,
    y: &[usize],
    spec: &CalibSpec,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport, ModelError> {
    check_set(model, x, y)?;
    spec.validate()?;
    if spec.training_passes() > 1 && model.dropout_rate() == 0.0 {
        return Err(ModelError::NoStochasticity);
    }
    if config.max_epochs == 0 {
        let loss = objective(model, x, y, spec, config.batch_size)?;
        return Ok(TrainReport { final_loss: loss, epochs_run: 0, epoch_losses: Vec::new() });
    }

    let n = y.len();
    let bs = config.batch_size.max(1);
    let mut adam = model.adam(config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    let mut yb = Vec::with_capacity(bs);

    for epoch in 0..config.max_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let xb = x.select(Axis(0), chunk);
            yb.clear();
            yb.extend(chunk.iter().map(|&i| y[i]));
            let (loss, grads) = batch_step(model, xb.view(), &yb, spec)?;
            if !loss.is_finite() {
                return Err(ModelError::DivergedLoss { epoch, loss });
            }
            model.apply(&mut adam, &grads);
            total += loss * chunk.len() as f64;
        }
        let loss = total / n as f64;
        if !loss.is_finite() || !model.all_finite() {
            return Err(ModelError::DivergedLoss { epoch, loss });
        }
        losses.push(loss);
        if best - loss < config.early_stop_tol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        best = best.min(loss);
        if stalled >= config.patience {
            break;
        }
    }
    let final_loss = *losses.last().expect("ran at least one epoch");
    Ok(TrainReport { final_loss, epochs_run: losses.len(), epoch_losses: losses })
}
