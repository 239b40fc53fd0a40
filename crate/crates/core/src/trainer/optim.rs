use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffers mirroring the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            velocity: params.into_iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// `v <- mu v + (g + wd p)`, `p <- p - lr v`.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], hp: SgdParams) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = hp.momentum * *v + (g + hp.weight_decay * *p);
        *p -= hp.lr * *v;
    }
}

/// Updates `params[i]` with `grads[i]`; `None` leaves parameter and velocity
/// untouched. Any non-finite gradient aborts before anything is written.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&[f64]>],
    state: &mut OptimizerState,
    hp: SgdParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} params, {} grads, {} buffers",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.len() != p.len() || state.velocity[i].len() != p.len() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("parameter {i}: {} vs {}", p.len(), g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                log::error!("non-finite gradient in parameter {i}; step aborted");
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if let Some(g) = g {
            sgd_update(p.data_mut(), g, v, hp);
        }
    }
    state.step += 1;
    Ok(())
}

/// Base rate times `lr_decay_factor` for every decay point already reached.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let passed = config
        .lr_decay_points
        .iter()
        .filter(|&&p| step as f64 >= p * config.total_steps as f64)
        .count();
    config.learning_rate * config.lr_decay_factor.powi(passed as i32)
}
