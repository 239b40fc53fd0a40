//! Micro-level distribution alignment.
//!
//! Per-domain experts turn pruned features into class-conditioned semantics;
//! features plus semantics form a surrogate for the joint (feature, label)
//! variable, and a domain approximator behind a gradient-reversal gate is
//! trained to tell domains apart while the rest of the model is pushed to
//! make them indistinguishable.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{forward_approximator, forward_expert, grl, ApproximatorVars, ExpertVars};

/// Pruned features of one source domain's batch.
#[derive(Debug, Clone, Copy)]
pub struct DomainFeatures<'a> {
    pub domain: usize,
    /// `[B, K]`.
    pub phi: Var,
    pub labels: &'a [usize],
}

/// Result of running every domain's batch through its own expert.
#[derive(Debug, Clone)]
pub struct ExpertPass {
    /// Mean over domains of each expert's cross-entropy.
    pub loss: Var,
    /// `[B, K]` semantics per input batch, in input order.
    pub semantics: Vec<Var>,
}

pub fn expert_pass(
    tape: &mut Tape,
    experts: &[ExpertVars],
    batches: &[DomainFeatures<'_>],
) -> Result<ExpertPass> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument(
            "expert loss over zero domains".into(),
        ));
    }
    let mut total: Option<Var> = None;
    let mut semantics = Vec::with_capacity(batches.len());
    for b in batches {
        let e = experts.get(b.domain).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no expert for domain {} ({} experts)",
                b.domain,
                experts.len()
            ))
        })?;
        let (logits, s) = forward_expert(tape, e, b.phi)?;
        let ce = tape.softmax_cross_entropy(logits, b.labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
        semantics.push(s);
    }
    let loss = tape.scale(total.expect("nonempty"), 1.0 / batches.len() as f64)?;
    Ok(ExpertPass { loss, semantics })
}

/// Mean over domains and samples of each expert's first-layer cross-entropy.
pub fn expert_loss(
    tape: &mut Tape,
    experts: &[ExpertVars],
    batches: &[DomainFeatures<'_>],
) -> Result<Var> {
    Ok(expert_pass(tape, experts, batches)?.loss)
}

/// `Z = phi + semantics`.
pub fn surrogate_joint(tape: &mut Tape, phi: Var, semantics: Var) -> Result<Var> {
    tape.add(phi, semantics)
}

/// `-mean log D_i(GRL(Z))` per domain, averaged over domains. `z` pairs a
/// domain index with its `[B, K]` surrogate batch.
pub fn mda_loss(
    tape: &mut Tape,
    d: &ApproximatorVars,
    z: &[(usize, Var)],
    lambda: f64,
) -> Result<Var> {
    mda_loss_gated(tape, d, z, Some(lambda))
}

/// [`mda_loss`] with an optional reversal gate. `None` leaves the graph
/// ungated, so its gradient is the plain derivative of the loss value.
pub fn mda_loss_gated(
    tape: &mut Tape,
    d: &ApproximatorVars,
    z: &[(usize, Var)],
    lambda: Option<f64>,
) -> Result<Var> {
    if z.is_empty() {
        return Err(Error::InvalidArgument(
            "alignment loss over zero domains".into(),
        ));
    }
    let m = tape.value(d.layers[2].bias).len();
    let mut total: Option<Var> = None;
    for &(domain, batch) in z {
        if domain >= m {
            return Err(Error::LabelOutOfRange {
                label: domain,
                classes: m,
            });
        }
        let rows = tape.value(batch).shape()[0];
        let reversed = match lambda {
            Some(l) => grl(tape, batch, l)?,
            None => batch,
        };
        let probs = forward_approximator(tape, d, reversed)?;
        let picked = tape.select_per_row(probs, &vec![domain; rows])?;
        let logp = tape.log_clamped(picked)?;
        let mean = tape.mean(logp)?;
        total = Some(match total {
            Some(t) => tape.add(t, mean)?,
            None => mean,
        });
    }
    tape.scale(total.expect("nonempty"), -1.0 / z.len() as f64)
}

/// `2 / (1 + exp(-10 p)) - 1` for training progress `p` in `[0, 1]`.
pub fn grl_lambda(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "training progress must be in [0, 1], got {p}"
        )));
    }
    Ok(2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}
