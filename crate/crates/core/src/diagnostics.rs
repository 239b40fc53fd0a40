//! Feature-space analysis: proxy A-distance, linear-probe discriminability,
//! activation-frequency comparison and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{dense, DenseLayer};
use crate::scp::{argmax, ChannelStats};

pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.1;

/// A single dense layer trained on standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    layer: DenseLayer,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearProbe {
    /// Full-batch gradient descent on softmax cross-entropy. Feature
    /// statistics come from `x` only.
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        let &[n, d] = x.shape() else {
            return Err(Error::shape("linear_probe", format!("{:?}", x.shape())));
        };
        if n == 0 || n != labels.len() {
            return Err(Error::shape(
                "linear_probe",
                format!("{n} rows, {} labels", labels.len()),
            ));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            mean.iter_mut()
                .zip(x.row(r))
                .for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let scale = var
            .iter()
            .map(|&v| if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let mut probe = Self {
            layer: DenseLayer::zeros(d, classes),
            mean,
            scale,
        };
        let xs = probe.standardize(x);
        for _ in 0..PROBE_STEPS {
            let mut tape = Tape::new();
            let l = probe.layer.bind(&mut tape, true)?;
            let xv = tape.constant(xs.clone())?;
            let logits = dense(&mut tape, &l, xv)?;
            let loss = tape.softmax_cross_entropy(logits, labels)?;
            tape.backward(loss)?;
            for (p, v) in [
                (&mut probe.layer.weight, l.weight),
                (&mut probe.layer.bias, l.bias),
            ] {
                let g = tape.grad(v).expect("trainable leaf");
                p.data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(w, g)| *w -= PROBE_LR * g);
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % d]) * self.scale[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let l = self.layer.bind(&mut tape, false)?;
        let xv = tape.constant(self.standardize(x))?;
        let logits = dense(&mut tape, &l, xv)?;
        let v = tape.value(logits);
        Ok(v.data().chunks(v.shape()[1]).map(argmax).collect())
    }

    pub fn error(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(
            pred.iter().zip(labels).filter(|(p, y)| p != y).count() as f64
                / labels.len().max(1) as f64,
        )
    }
}

/// Per-class seeded 80/20 split; returns `(train, test)` row indices.
pub fn stratified_split(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * 0.8).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Trains on `train` and reports the error on `test`.
pub fn probe_error_split(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
) -> Result<f64> {
    LinearProbe::fit(train_x, train_y, classes)?.error(test_x, test_y)
}

/// Held-out error of a linear probe on an 80/20 split.
pub fn linear_probe_error(features: &Tensor, labels: &[usize], seed: u64) -> Result<f64> {
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InvalidArgument(
            "linear probe needs at least 2 classes present".into(),
        ));
    }
    if features.shape().first() != Some(&labels.len()) {
        return Err(Error::shape(
            "linear_probe",
            format!("{:?} vs {} labels", features.shape(), labels.len()),
        ));
    }
    let classes = present[present.len() - 1] + 1;
    let (tr, te) = stratified_split(labels, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    probe_error_split(
        &features.select_rows(&tr),
        &pick(&tr),
        &features.select_rows(&te),
        &pick(&te),
        classes,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ADistance {
    pub a_distance: f64,
    /// Held-out domain-classification error.
    pub sigma: f64,
}

/// `2 (1 - 2 sigma)` clipped to `[0, 2]`.
pub fn a_distance_from_error(sigma: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * sigma)).clamp(0.0, 2.0)
}

/// Seeded sample of `k` distinct indices out of `n`, in ascending order.
pub fn subsample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Proxy A-distance between two `[N, K]` feature sets. The larger set is
/// subsampled to the size of the smaller one.
pub fn proxy_a_distance(source: &Tensor, target: &Tensor, seed: u64) -> Result<ADistance> {
    let (&[ns, ks], &[nt, kt]) = (source.shape(), target.shape()) else {
        return Err(Error::shape(
            "proxy_a_distance",
            format!("{:?} vs {:?}", source.shape(), target.shape()),
        ));
    };
    if ks != kt {
        return Err(Error::shape(
            "proxy_a_distance",
            format!("feature dims {ks} vs {kt}"),
        ));
    }
    if ns < 5 || nt < 5 {
        return Err(Error::InvalidArgument(
            "proxy A-distance needs at least 5 samples per set".into(),
        ));
    }
    let n = ns.min(nt);
    let s = source.select_rows(&subsample(ns, n, seed));
    let t = target.select_rows(&subsample(nt, n, seed.wrapping_add(1)));
    let pooled = Tensor::new(vec![2 * n, ks], [s.data(), t.data()].concat())?;
    let labels: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
    let (tr, te) = stratified_split(&labels, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let sigma = probe_error_split(
        &pooled.select_rows(&tr),
        &pick(&tr),
        &pooled.select_rows(&te),
        &pick(&te),
        2,
    )?;
    Ok(ADistance {
        a_distance: a_distance_from_error(sigma),
        sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyDivergence {
    /// `freq_target - freq_source` per channel index.
    pub gaps: Vec<f64>,
    /// Channel indices by descending source frequency (stable on ties).
    pub order: Vec<usize>,
    pub max_gap: f64,
    pub max_gap_channel: usize,
}

pub fn frequency_divergence(
    source: &ChannelStats,
    target: &ChannelStats,
) -> Result<FrequencyDivergence> {
    if source.frequency.len() != target.frequency.len() {
        return Err(Error::shape(
            "frequency_divergence",
            format!(
                "{} vs {} channels",
                source.frequency.len(),
                target.frequency.len()
            ),
        ));
    }
    let gaps: Vec<f64> = target
        .frequency
        .iter()
        .zip(&source.frequency)
        .map(|(t, s)| t - s)
        .collect();
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&a, &b| source.frequency[b].total_cmp(&source.frequency[a]));
    let max_gap_channel = argmax(&gaps);
    Ok(FrequencyDivergence {
        max_gap: gaps.get(max_gap_channel).copied().unwrap_or(0.0),
        gaps,
        order,
        max_gap_channel,
    })
}

/// Per-channel response to each generative factor, from features of the
/// probes built by `synth::counterfactual_inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSensitivity {
    /// Mean `|f(c, k) - f(c, k')|` over patterns `c` and cue pairs `k != k'`.
    pub spurious: Vec<f64>,
    /// Mean `|f(c, k) - f(c', k)|` over cues `k` and pattern pairs `c != c'`.
    pub stable: Vec<f64>,
}

impl FactorSensitivity {
    /// Channels that move more with the cue than with the pattern.
    pub fn spurious_driven(&self) -> Vec<bool> {
        self.spurious
            .iter()
            .zip(&self.stable)
            .map(|(s, t)| s > t)
            .collect()
    }
}

/// `probe_features` is `[C * C, K]` with row `c * C + k` as in the probes.
pub fn factor_sensitivity(probe_features: &Tensor, classes: usize) -> Result<FactorSensitivity> {
    let k = match probe_features.shape() {
        &[r, k] if r == classes * classes && classes >= 2 => k,
        s => {
            return Err(Error::shape(
                "factor_sensitivity",
                format!("{s:?} for {classes} classes"),
            ))
        }
    };
    let row = |c: usize, cue: usize| probe_features.row(c * classes + cue);
    let pairs = (classes * classes * (classes - 1)) as f64;
    let mut spurious = vec![0.0; k];
    let mut stable = vec![0.0; k];
    for a in 0..classes {
        for b in 0..classes {
            if a == b {
                continue;
            }
            for o in 0..classes {
                for j in 0..k {
                    spurious[j] += (row(o, a)[j] - row(o, b)[j]).abs() / pairs;
                    stable[j] += (row(a, o)[j] - row(b, o)[j]).abs() / pairs;
                }
            }
        }
    }
    Ok(FactorSensitivity { spurious, stable })
}

/// `domain_id<TAB>label<TAB>f_0...` with shortest round-trip float text.
pub fn embeddings_tsv(features: &Tensor, labels: &[usize], domains: &[usize]) -> Result<String> {
    let (n, k) = match features.shape() {
        &[n, k] => (n, k),
        &[0] => (0, 0),
        s => return Err(Error::shape("export_embeddings", format!("{s:?}"))),
    };
    if labels.len() != n || domains.len() != n {
        return Err(Error::shape(
            "export_embeddings",
            format!(
                "{n} rows, {} labels, {} domains",
                labels.len(),
                domains.len()
            ),
        ));
    }
    let mut s = String::from("domain_id\tlabel");
    for i in 0..k {
        let _ = write!(s, "\tf_{i}");
    }
    s.push('\n');
    for r in 0..n {
        let _ = write!(s, "{}\t{}", domains[r], labels[r]);
        for v in features.row(r) {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings(
    features: &Tensor,
    labels: &[usize],
    domains: &[usize],
    path: &Path,
) -> Result<()> {
    std::fs::write(path, embeddings_tsv(features, labels, domains)?).map_err(|e| Error::io(path, e))
}
