//! Composable anti-forgetting regularizers: the squared-gradient-weighted
//! quadratic anchor penalty and stochastic parameter restore.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{AdaptiveModel, GradMap, ModelState, StatsMode};

use super::losses::{loss_and_grads, MeanEntropy};
use super::MethodError;

/// Per-parameter anchor weights estimated from squared entropy gradients.
#[derive(Debug, Clone, Default)]
pub struct FisherState {
    pub weights: GradMap,
}

/// `omega_i = mean over calibration samples of (d L_ent / d theta_i)^2`,
/// with the per-sample entropy loss evaluated in inference mode.
pub fn fisher_weights(model: &AdaptiveModel, calibration_inputs: &Array2<f64>) -> FisherState {
    let n = calibration_inputs.nrows();
    let mut acc = GradMap::new();
    for i in 0..n {
        let row = calibration_inputs.row(i).to_owned().insert_axis(ndarray::Axis(0));
        let (_, grads) = loss_and_grads(model, &row, StatsMode::Running, &MeanEntropy::all());
        for (name, g) in grads {
            let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (s, gi) in slot.iter_mut().zip(&g) {
                *s += gi * gi;
            }
        }
    }
    for v in acc.values_mut() {
        for s in v.iter_mut() {
            *s /= n as f64;
        }
    }
    FisherState { weights: acc }
}

/// Quadratic anchor penalty `lambda * sum_i omega_i (theta_i - anchor_i)^2`.
/// Returns the penalty value and adds `2 lambda omega (theta - anchor)` to
/// `grads` for every parameter in `names`.
pub fn fisher_penalty(
    model: &AdaptiveModel,
    anchor: &ModelState,
    fisher: &FisherState,
    lambda: f64,
    names: &[String],
    grads: &mut GradMap,
) -> Result<f64, MethodError> {
    let mut penalty = 0.0;
    for name in names {
        let theta = model.param(name).expect("parameter exists");
        let Some(anchor_t) = anchor.parameters.get(name) else {
            continue;
        };
        if anchor_t.data.len() != theta.len() {
            return Err(MethodError::ShapeMismatch(name.clone()));
        }
        let omega = fisher.weights.get(name);
        let g = grads.entry(name.clone()).or_insert_with(|| vec![0.0; theta.len()]);
        for i in 0..theta.len() {
            let w = omega.map(|o| o[i]).unwrap_or(0.0);
            let d = theta[i] - anchor_t.data[i];
            penalty += lambda * w * d * d;
            g[i] += 2.0 * lambda * w * d;
        }
    }
    Ok(penalty)
}

/// Independently reset each parameter element to the anchor value with
/// probability `p`.
pub fn stochastic_restore(
    model: &mut AdaptiveModel,
    anchor: &ModelState,
    p: f64,
    rng: &mut ChaCha8Rng,
) {
    if p <= 0.0 {
        return;
    }
    for name in model.param_names() {
        let Some(anchor_t) = anchor.parameters.get(&name) else {
            continue;
        };
        let theta = model.param_mut(&name).expect("parameter exists");
        for i in 0..theta.len() {
            if p >= 1.0 || rng.gen::<f64>() < p {
                theta[i] = anchor_t.data[i];
            }
        }
    }
}
