//! End-to-end training: per-domain batches, the combined objective, SGD with
//! momentum, step schedules, and model selection on pooled source
//! validation data.

mod config;
mod optim;

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mda::{expert_pass, grl_lambda, mda_loss_gated, surrogate_joint, DomainFeatures};
use crate::nn::{dense, forward_feature_map, init_bundle, BundleVars, ModelBundle, ParamGroup};
use crate::scp::{
    apply_mask, argmax, aux_loss, build_masks, channel_dropout, gap, predicted_mask_classes,
    ChannelMask,
};
use crate::synth::{Benchmark, Domain};

pub use config::{GrlMode, TrainConfig};
pub use optim::{lr_at, sgd_step, sgd_update, OptimizerState, SgdParams};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
const EVAL_CHUNK: usize = 256;

/// `cla + alpha (mda + exp) + beta aux`, evaluated in the same order as the
/// graph so the two agree bitwise.
pub fn combine(cla: f64, mda: f64, exp: f64, aux: f64, alpha: f64, beta: f64) -> f64 {
    cla + alpha * (mda + exp) + beta * aux
}

/// One source domain's minibatch.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub domain: usize,
    /// `[B, H, W, C]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Handles to the objective and its parts on a tape. Terms whose weight is
/// zero are not evaluated.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub cla: Var,
    pub mda: Option<Var>,
    pub exp: Option<Var>,
    pub aux: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cla: f64,
    pub mda: Option<f64>,
    pub exp: Option<f64>,
    pub aux: Option<f64>,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            total: v(self.total),
            cla: v(self.cla),
            mda: self.mda.map(v),
            exp: self.exp.map(v),
            aux: self.aux.map(v),
        }
    }
}

/// How the feature map is treated before pooling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pruning {
    None,
    /// Class masks from the current auxiliary weights at this percentile.
    Mask {
        q: f64,
    },
    Dropout {
        rate: f64,
    },
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Builds the full objective over one batch per source domain. `reversal`
/// is the gradient-reversal coefficient in front of `D`; `None` removes the
/// gate so that backward yields the plain gradient of the objective value.
pub fn total_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &BundleVars,
    batches: &[DomainBatch],
    config: &TrainConfig,
    reversal: Option<f64>,
    pruning: Pruning,
    rng: &mut R,
) -> Result<LossGraph> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no domain batches".into()));
    }
    let mask: Option<ChannelMask> = match pruning {
        Pruning::Mask { q } => Some(build_masks(tape.value(vars.g_a.weight), q)?),
        _ => None,
    };
    let (mut cla, mut aux, mut feats) = (Vec::new(), Vec::new(), Vec::new());
    for b in batches {
        let x = tape.constant(b.inputs.clone())?;
        let map = forward_feature_map(tape, &vars.f, x)?;
        let phi_hat = gap(tape, map)?;
        if config.beta > 0.0 {
            aux.push(aux_loss(tape, &vars.g_a, phi_hat, &b.labels)?);
        }
        let phi = match (&mask, pruning) {
            (Some(m), _) => {
                let pruned = apply_mask(tape, map, m, &b.labels)?;
                gap(tape, pruned)?
            }
            (None, Pruning::Dropout { rate }) => {
                let dropped = channel_dropout(tape, map, rate, rng, true)?;
                gap(tape, dropped)?
            }
            _ => phi_hat,
        };
        let logits = dense(tape, &vars.g, phi)?;
        cla.push(tape.softmax_cross_entropy(logits, &b.labels)?);
        feats.push((b.domain, phi));
    }
    let cla = mean_of(tape, &cla)?;
    let aux = if aux.is_empty() {
        None
    } else {
        Some(mean_of(tape, &aux)?)
    };

    let (mda, exp) = if config.alpha > 0.0 {
        let inputs: Vec<DomainFeatures<'_>> = feats
            .iter()
            .zip(batches)
            .map(|(&(domain, phi), b)| DomainFeatures {
                domain,
                phi,
                labels: &b.labels,
            })
            .collect();
        let pass = expert_pass(tape, &vars.experts, &inputs)?;
        let z = feats
            .iter()
            .zip(&pass.semantics)
            .map(|(&(domain, phi), &s)| Ok((domain, surrogate_joint(tape, phi, s)?)))
            .collect::<Result<Vec<_>>>()?;
        (
            Some(mda_loss_gated(tape, &vars.approximator, &z, reversal)?),
            Some(pass.loss),
        )
    } else {
        (None, None)
    };

    let mut total = cla;
    if let (Some(m), Some(e)) = (mda, exp) {
        let s = tape.add(m, e)?;
        let s = tape.scale(s, config.alpha)?;
        total = tape.add(total, s)?;
    }
    if let Some(a) = aux {
        let s = tape.scale(a, config.beta)?;
        total = tape.add(total, s)?;
    }
    Ok(LossGraph {
        total,
        cla,
        mda,
        exp,
        aux,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub lambda: f64,
    pub loss_total: f64,
    pub loss_cla: f64,
    pub loss_mda: Option<f64>,
    pub loss_exp: Option<f64>,
    pub loss_aux: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Completed steps when taken.
    pub step: usize,
    pub val_acc: f64,
    pub bundle: ModelBundle,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_bundle: ModelBundle,
    pub snapshots: Vec<Snapshot>,
    /// Index into `snapshots` chosen by validation accuracy.
    pub best: usize,
    pub metrics: Vec<StepMetrics>,
    pub inference: Inference,
}

impl TrainOutcome {
    pub fn best_bundle(&self) -> &ModelBundle {
        &self.snapshots[self.best].bundle
    }
}

/// Inference-time settings implied by the training config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inference {
    pub masked: bool,
    pub q: f64,
}

impl From<&TrainConfig> for Inference {
    fn from(c: &TrainConfig) -> Self {
        Self {
            masked: c.use_mask,
            q: c.quantile(),
        }
    }
}

/// Pooled features `[N, K]` after the inference-time mask.
pub fn features(bundle: &ModelBundle, inputs: &Tensor, mode: Inference) -> Result<Tensor> {
    Ok(forward_eval(bundle, inputs, mode)?.0)
}

/// Unpruned pooled features `[N, K]`.
pub fn pooled_features(bundle: &ModelBundle, inputs: &Tensor) -> Result<Tensor> {
    features(
        bundle,
        inputs,
        Inference {
            masked: false,
            q: 0.0,
        },
    )
}

pub fn predict(bundle: &ModelBundle, inputs: &Tensor, mode: Inference) -> Result<Vec<usize>> {
    Ok(forward_eval(bundle, inputs, mode)?.1)
}

fn forward_eval(
    bundle: &ModelBundle,
    inputs: &Tensor,
    mode: Inference,
) -> Result<(Tensor, Vec<usize>)> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    let k = bundle.arch.feature_channels;
    let mask = if mode.masked {
        Some(build_masks(&bundle.g_a.weight, mode.q)?)
    } else {
        None
    };
    let mut feats = Vec::with_capacity(n * k);
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let v = bundle.bind(&mut tape, false)?;
        let x = tape.constant(inputs.select_rows(&idx))?;
        let map = forward_feature_map(&mut tape, &v.f, x)?;
        let phi_hat = gap(&mut tape, map)?;
        let phi = match &mask {
            Some(m) => {
                let yhat = predicted_mask_classes(&mut tape, &v.g_a, phi_hat)?;
                let pruned = apply_mask(&mut tape, map, m, &yhat)?;
                gap(&mut tape, pruned)?
            }
            None => phi_hat,
        };
        let logits = dense(&mut tape, &v.g, phi)?;
        feats.extend_from_slice(tape.value(phi).data());
        let lv = tape.value(logits);
        preds.extend(lv.data().chunks(lv.shape()[1]).map(argmax));
        start = end;
    }
    Ok((Tensor::new(vec![n, k], feats)?, preds))
}

pub fn accuracy(bundle: &ModelBundle, domain: &Domain, mode: Inference) -> Result<f64> {
    if domain.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "domain {} has no samples",
            domain.id
        )));
    }
    let pred = predict(bundle, &domain.inputs, mode)?;
    Ok(pred
        .iter()
        .zip(&domain.labels)
        .filter(|(p, y)| p == y)
        .count() as f64
        / domain.len() as f64)
}

/// Index of the highest accuracy; ties go to the earliest.
pub fn select_best(accuracies: &[f64]) -> Result<usize> {
    if accuracies.is_empty() {
        return Err(Error::InvalidArgument("no snapshots to select from".into()));
    }
    Ok(accuracies.iter().enumerate().fold(
        0,
        |best, (i, &a)| if a > accuracies[best] { i } else { best },
    ))
}

/// Re-scores `snapshots` on `validation` and returns the best index.
pub fn validate_select(
    snapshots: &[Snapshot],
    validation: &Domain,
    mode: Inference,
) -> Result<usize> {
    if validation.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let accs = snapshots
        .iter()
        .map(|s| accuracy(&s.bundle, validation, mode))
        .collect::<Result<Vec<_>>>()?;
    select_best(&accs)
}

/// Concatenates domains; the result carries the first domain's id.
pub fn pool_domains(domains: &[Domain]) -> Result<Domain> {
    let first = domains
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to pool".into()))?;
    let mut shape = first.inputs.shape().to_vec();
    shape[0] = domains.iter().map(Domain::len).sum();
    let data = domains
        .iter()
        .flat_map(|d| d.inputs.data().iter().copied())
        .collect();
    Ok(Domain {
        id: first.id,
        spec: None,
        inputs: Tensor::new(shape, data)?,
        labels: domains
            .iter()
            .flat_map(|d| d.labels.iter().copied())
            .collect(),
    })
}

/// Train/validation splits of every source domain, plus the pooled
/// validation set.
pub struct SourceSplits {
    pub train: Vec<Domain>,
    pub validation: Domain,
}

pub fn source_splits(benchmark: &Benchmark, seed: u64) -> Result<SourceSplits> {
    let (train, val): (Vec<_>, Vec<_>) = benchmark.sources.iter().map(|d| d.split(seed)).unzip();
    if let Some(d) = train.iter().find(|d| d.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "source domain {} has no training samples",
            d.id
        )));
    }
    Ok(SourceSplits {
        train,
        validation: pool_domains(&val)?,
    })
}

/// Uniform sampling with replacement, one batch per domain.
pub fn sample_batches<R: Rng + ?Sized>(
    train: &[Domain],
    batch: usize,
    rng: &mut R,
) -> Vec<DomainBatch> {
    train
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..d.len())).collect();
            let sub = d.subset(&idx);
            DomainBatch {
                domain: i,
                inputs: sub.inputs,
                labels: sub.labels,
            }
        })
        .collect()
}

fn pruning_at(config: &TrainConfig, step: usize) -> Pruning {
    if config.use_mask && step >= config.mask_warmup_steps {
        Pruning::Mask {
            q: config.quantile(),
        }
    } else if config.dropout_rate > 0.0 {
        Pruning::Dropout {
            rate: config.dropout_rate,
        }
    } else {
        Pruning::None
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            loss: f64::NAN,
        },
        e => e,
    }
}

/// Runs one forward/backward pass and applies SGD to the parameters whose
/// group passes `update`.
#[allow(clippy::too_many_arguments)]
fn pass(
    bundle: &mut ModelBundle,
    state: &mut OptimizerState,
    batches: &[DomainBatch],
    config: &TrainConfig,
    lambda: f64,
    pruning: Pruning,
    hp: SgdParams,
    rng: &mut ChaCha8Rng,
    update: impl Fn(ParamGroup) -> bool,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, true)?;
    let graph = total_loss(
        &mut tape,
        &vars,
        batches,
        config,
        Some(lambda),
        pruning,
        rng,
    )?;
    let breakdown = graph.breakdown(&tape);
    tape.backward(graph.total)?;
    let groups: Vec<ParamGroup> = bundle.parameters().iter().map(|(g, _)| *g).collect();
    let all = vars.all();
    let grads: Vec<Option<&[f64]>> = all
        .iter()
        .zip(&groups)
        .map(|(&v, &g)| if update(g) { tape.grad(v) } else { None })
        .collect();
    let mut params = bundle.parameters_mut();
    sgd_step(&mut params, &grads, state, hp)?;
    Ok(breakdown)
}

pub fn train(config: &TrainConfig, benchmark: &Benchmark) -> Result<TrainOutcome> {
    train_with_progress(config, benchmark, |_| {})
}

/// Like [`train`], calling `on_step` after every logged step.
pub fn train_with_progress(
    config: &TrainConfig,
    benchmark: &Benchmark,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if benchmark.sources.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 source domains, got {}",
            benchmark.sources.len()
        )));
    }
    let arch = config.architecture(benchmark)?;
    let mut bundle = init_bundle(arch, config.seed)?;
    let splits = source_splits(benchmark, config.seed)?;
    let inference = Inference::from(config);
    let mut state = OptimizerState::new(bundle.parameters().into_iter().map(|(_, t)| t));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(2);

    let mut metrics = Vec::with_capacity(config.total_steps);
    let mut snapshots = Vec::new();
    for step in 0..config.total_steps {
        let progress = step as f64 / config.total_steps as f64;
        let lambda = grl_lambda(progress)?;
        let hp = SgdParams {
            lr: lr_at(step, config),
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };
        let pruning = pruning_at(config, step);
        let batches = sample_batches(&splits.train, config.batch_size_per_domain, &mut batch_rng);
        let b = match (config.grl_mode, config.alpha > 0.0) {
            (GrlMode::Alternating, true) => {
                let first = pass(
                    &mut bundle,
                    &mut state,
                    &batches,
                    config,
                    lambda,
                    pruning,
                    hp,
                    &mut noise_rng,
                    |g| g == ParamGroup::Approximator,
                )
                .map_err(|e| diverged(step, e))?;
                pass(
                    &mut bundle,
                    &mut state,
                    &batches,
                    config,
                    lambda,
                    pruning,
                    hp,
                    &mut noise_rng,
                    |g| g != ParamGroup::Approximator,
                )
                .map_err(|e| diverged(step, e))?;
                first
            }
            _ => pass(
                &mut bundle,
                &mut state,
                &batches,
                config,
                lambda,
                pruning,
                hp,
                &mut noise_rng,
                |_| true,
            )
            .map_err(|e| diverged(step, e))?,
        };
        if !b.total.is_finite() || b.total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                loss: b.total,
            });
        }
        let done = step + 1;
        let val_acc = if done % config.snapshot_every == 0 || done == config.total_steps {
            let acc = accuracy(&bundle, &splits.validation, inference)?;
            log::info!("step {done}: loss {:.4} val_acc {acc:.4}", b.total);
            snapshots.push(Snapshot {
                step: done,
                val_acc: acc,
                bundle: bundle.clone(),
            });
            Some(acc)
        } else {
            None
        };
        let m = StepMetrics {
            step,
            lr: hp.lr,
            lambda,
            loss_total: b.total,
            loss_cla: b.cla,
            loss_mda: b.mda,
            loss_exp: b.exp,
            loss_aux: b.aux,
            val_acc,
        };
        on_step(&m);
        metrics.push(m);
    }
    if snapshots.is_empty() {
        snapshots.push(Snapshot {
            step: 0,
            val_acc: accuracy(&bundle, &splits.validation, inference)?,
            bundle: bundle.clone(),
        });
    }
    let accs: Vec<f64> = snapshots.iter().map(|s| s.val_acc).collect();
    let best = select_best(&accs)?;
    Ok(TrainOutcome {
        final_bundle: bundle,
        snapshots,
        best,
        metrics,
        inference,
    })
}

pub fn metrics_jsonl(metrics: &[StepMetrics]) -> String {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        s.push('\n');
    }
    s
}

pub fn write_metrics(metrics: &[StepMetrics], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_jsonl(metrics).as_bytes())
        .map_err(|e| Error::io(path, e))
}
