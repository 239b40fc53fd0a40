//! Selective channel pruning.
//!
//! The auxiliary classifier `g_a` scores each channel of the pooled feature
//! map per class. Channels whose weight for a class is at or below the
//! q-th percentile of that class's weights are zeroed for samples of that
//! class.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dense, DenseVars};

/// Fraction of a sample's largest pooled activation a channel must exceed to
/// count as activated.
pub const ACTIVATION_THRESHOLD: f64 = 0.01;

/// Linear-interpolation percentile over the inclusive range of order
/// statistics (the convention numpy uses by default).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-class binary masks over `K` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    masks: Vec<Vec<u8>>,
    source_quantile: f64,
}

impl ChannelMask {
    pub fn classes(&self) -> usize {
        self.masks.len()
    }

    pub fn channels(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }

    pub fn row(&self, class: usize) -> &[u8] {
        &self.masks[class]
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.masks
    }

    pub fn quantile(&self) -> f64 {
        self.source_quantile
    }

    pub fn survivors(&self, class: usize) -> usize {
        self.masks[class].iter().filter(|&&m| m == 1).count()
    }

    /// Flattened `[B, K]` multipliers selecting row `classes[b]` for sample `b`.
    pub fn scale_for(&self, classes: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(classes.len() * self.channels());
        for &c in classes {
            let row = self.masks.get(c).ok_or(Error::LabelOutOfRange {
                label: c,
                classes: self.classes(),
            })?;
            out.extend(row.iter().map(|&m| f64::from(m)));
        }
        Ok(out)
    }
}

/// Builds masks from the auxiliary weight matrix `[K, C]` at percentile `q`.
///
/// A class whose row would lose every channel keeps all of them instead.
pub fn build_masks(weight: &Tensor, q: f64) -> Result<ChannelMask> {
    let &[k, c] = weight.shape() else {
        return Err(Error::shape(
            "build_masks",
            format!("weight {:?} is not [K, C]", weight.shape()),
        ));
    };
    if !(0.0..100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in [0, 100), got {q}"
        )));
    }
    if k == 0 {
        return Err(Error::shape("build_masks", "no channels"));
    }
    let w = weight.data();
    let masks = (0..c)
        .map(|class| {
            let col: Vec<f64> = (0..k).map(|i| w[i * c + class]).collect();
            let cut = percentile(&col, q);
            let row: Vec<u8> = col.iter().map(|&v| u8::from(v > cut)).collect();
            if row.iter().all(|&m| m == 0) {
                log::warn!(
                    "class {class}: every channel at or below the q={q} percentile; keeping all"
                );
                vec![1; k]
            } else {
                row
            }
        })
        .collect();
    Ok(ChannelMask {
        masks,
        source_quantile: q,
    })
}

/// Global average pooling `[B, H, W, K] -> [B, K]`.
pub fn gap(tape: &mut Tape, map: Var) -> Result<Var> {
    tape.spatial_mean(map)
}

/// Mean cross-entropy of `g_a` on pooled features.
pub fn aux_loss(tape: &mut Tape, g_a: &DenseVars, phi_hat: Var, labels: &[usize]) -> Result<Var> {
    let logits = dense(tape, g_a, phi_hat)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Zeros channels of each sample according to the mask row of its class.
/// The mask enters as a constant.
pub fn apply_mask(tape: &mut Tape, map: Var, mask: &ChannelMask, classes: &[usize]) -> Result<Var> {
    let k = tape.value(map).shape().last().copied().unwrap_or(0);
    if mask.channels() != k {
        return Err(Error::shape(
            "apply_mask",
            format!("mask has {} channels, map has {k}", mask.channels()),
        ));
    }
    let scale = mask.scale_for(classes)?;
    tape.channel_scale(map, &scale)
}

/// Masks every sample with one explicit row.
pub fn apply_mask_row(tape: &mut Tape, map: Var, row: &[u8]) -> Result<Var> {
    let shape = tape.value(map).shape().to_vec();
    let k = shape.last().copied().unwrap_or(0);
    if row.len() != k {
        return Err(Error::shape(
            "apply_mask",
            format!("mask length {} vs {k} channels", row.len()),
        ));
    }
    let batch = if shape.len() == 4 { shape[0] } else { 1 };
    let scale: Vec<f64> = (0..batch)
        .flat_map(|_| row.iter().map(|&m| f64::from(m)))
        .collect();
    tape.channel_scale(map, &scale)
}

/// Inverted channel dropout: each (sample, channel) is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
/// Identity when `training` is false.
pub fn channel_dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    map: Var,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(map);
    }
    let shape = tape.value(map).shape().to_vec();
    let k = shape.last().copied().unwrap_or(0);
    let batch = if shape.len() == 4 { shape[0] } else { 1 };
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..batch * k)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    tape.channel_scale(map, &scale)
}

/// Argmax of `g_a` on unpruned pooled features; selects mask rows at test time.
pub fn predicted_mask_classes(
    tape: &mut Tape,
    g_a: &DenseVars,
    phi_hat: Var,
) -> Result<Vec<usize>> {
    let logits = dense(tape, g_a, phi_hat)?;
    let v = tape.value(logits);
    let c = v.shape()[1];
    Ok(v.data().chunks(c).map(argmax).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// How often each channel fires over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub frequency: Vec<f64>,
    pub samples: usize,
    pub threshold_fraction: f64,
}

/// Activation frequency from pooled vectors `[N, K]`.
pub fn activation_frequency_pooled(pooled: &Tensor) -> Result<ChannelStats> {
    let &[n, k] = pooled.shape() else {
        return Err(Error::shape(
            "activation_frequency",
            format!("{:?}", pooled.shape()),
        ));
    };
    if n == 0 {
        return Err(Error::InvalidArgument(
            "activation frequency of an empty sample set".into(),
        ));
    }
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let row = pooled.row(i);
        let tau = ACTIVATION_THRESHOLD * row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (c, &v) in counts.iter_mut().zip(row) {
            if v > tau {
                *c += 1;
            }
        }
    }
    Ok(ChannelStats {
        frequency: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        samples: n,
        threshold_fraction: ACTIVATION_THRESHOLD,
    })
}

/// Activation frequency from feature maps `[N, H, W, K]`.
pub fn activation_frequency(maps: &Tensor) -> Result<ChannelStats> {
    if maps.shape().len() != 4 {
        return Err(Error::shape(
            "activation_frequency",
            format!("{:?}", maps.shape()),
        ));
    }
    if maps.shape()[0] == 0 {
        return Err(Error::InvalidArgument(
            "activation frequency of an empty sample set".into(),
        ));
    }
    let mut tape = Tape::new();
    let m = tape.constant(maps.clone())?;
    let g = gap(&mut tape, m)?;
    activation_frequency_pooled(tape.value(g))
}

/// `channel_index,frequency_source,frequency_target`
pub fn frequency_csv(source: &ChannelStats, target: &ChannelStats) -> Result<String> {
    if source.frequency.len() != target.frequency.len() {
        return Err(Error::shape(
            "frequency_csv",
            format!(
                "{} vs {} channels",
                source.frequency.len(),
                target.frequency.len()
            ),
        ));
    }
    let mut s = String::from("channel_index,frequency_source,frequency_target\n");
    for (i, (a, b)) in source.frequency.iter().zip(&target.frequency).enumerate() {
        let _ = writeln!(s, "{i},{a},{b}");
    }
    Ok(s)
}

pub fn write_frequency_csv(
    source: &ChannelStats,
    target: &ChannelStats,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, frequency_csv(source, target)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::nn::DenseLayer;

    /// Sort-and-interpolate, written independently of `percentile`.
    fn oracle_percentile(v: &[f64], q: f64) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = q / 100.0 * (s.len() as f64 - 1.0);
        let i = rank as usize;
        if i + 1 >= s.len() {
            return s[s.len() - 1];
        }
        s[i] * (1.0 - (rank - i as f64)) + s[i + 1] * (rank - i as f64)
    }

    fn column_weight(col: &[f64]) -> Tensor {
        Tensor::new(vec![col.len(), 1], col.to_vec()).unwrap()
    }

    #[test]
    fn median_mask_example() {
        let w = [0.1, 0.5, 0.9, 0.3];
        assert!((percentile(&w, 50.0) - 0.4).abs() < 1e-15);
        assert!((oracle_percentile(&w, 50.0) - 0.4).abs() < 1e-15);
        let m = build_masks(&column_weight(&w), 50.0).unwrap();
        assert_eq!(m.row(0), &[0, 1, 1, 0]);
    }

    #[test]
    fn q_zero_prunes_only_minimum() {
        let m = build_masks(&column_weight(&[0.3, -0.2, 0.7, 0.1, 0.05]), 0.0).unwrap();
        assert_eq!(m.row(0), &[1, 0, 1, 1, 1]);
    }

    #[test]
    fn degenerate_row_keeps_everything() {
        let m = build_masks(&column_weight(&[0.2; 6]), 40.0).unwrap();
        assert_eq!(m.row(0), &[1; 6]);
        // Ties at the top can also empty a row.
        let m = build_masks(&column_weight(&[1.0, 1.0, 1.0, 0.0]), 90.0).unwrap();
        assert_eq!(m.survivors(0), 4);
    }

    #[test]
    fn mask_rows_are_per_class_columns() {
        // [K=3, C=2]: column 0 = [3, 1, 2], column 1 = [-1, 0, 5]
        let w = Tensor::new(vec![3, 2], vec![3.0, -1.0, 1.0, 0.0, 2.0, 5.0]).unwrap();
        let m = build_masks(&w, 50.0).unwrap();
        assert_eq!(m.row(0), &[1, 0, 0]);
        assert_eq!(m.row(1), &[0, 0, 1]);
    }

    #[test]
    fn median_survivor_count_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for k in [4usize, 8, 16, 32] {
            for _ in 0..20 {
                let col: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let cut = oracle_percentile(&col, 50.0);
                let expect = col.iter().filter(|&&v| v > cut).count();
                let m = build_masks(&column_weight(&col), 50.0).unwrap();
                assert_eq!(m.survivors(0), expect);
                assert_eq!(expect, k.div_ceil(2));
            }
        }
    }

    #[test]
    fn rejects_bad_quantile() {
        assert!(build_masks(&column_weight(&[1.0, 2.0]), 100.0).is_err());
        assert!(build_masks(&column_weight(&[1.0, 2.0]), -1.0).is_err());
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let c = tape
            .constant(Tensor::new(vec![1, 3, 2, 2], vec![1.7; 12]).unwrap())
            .unwrap();
        let g = gap(&mut tape, c).unwrap();
        assert!(tape
            .value(g)
            .data()
            .iter()
            .all(|&v| (v - 1.7).abs() < 1e-15));

        let m = tape
            .constant(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let g = gap(&mut tape, m).unwrap();
        assert_eq!(tape.value(g).data(), &[2.5]);

        let mut tape = Tape::new();
        let x = tape
            .leaf(
                Tensor::new(vec![2, 3, 2, 2], vec![0.5; 24])
                    .unwrap()
                    .with_grad(),
            )
            .unwrap();
        let g = gap(&mut tape, x).unwrap();
        let s = tape.sum(g).unwrap();
        tape.backward(s).unwrap();
        assert!(tape
            .grad(x)
            .unwrap()
            .iter()
            .all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    fn bind_dense(tape: &mut Tape, l: &DenseLayer) -> DenseVars {
        DenseVars {
            weight: tape.leaf(l.weight.clone().with_grad()).unwrap(),
            bias: tape.leaf(l.bias.clone().with_grad()).unwrap(),
        }
    }

    #[test]
    fn aux_loss_zero_weights_is_ln_c() {
        let mut tape = Tape::new();
        let g_a = bind_dense(&mut tape, &DenseLayer::zeros(5, 7));
        let phi = tape
            .constant(Tensor::new(vec![3, 5], vec![0.4; 15]).unwrap())
            .unwrap();
        let l = aux_loss(&mut tape, &g_a, phi, &[0, 3, 6]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn aux_loss_separating_weights_is_small() {
        // Channel c fires only for class c; weight margin 10 on the diagonal.
        let mut layer = DenseLayer::zeros(3, 3);
        for c in 0..3 {
            layer.weight.data_mut()[c * 3 + c] = 10.0;
        }
        let feats = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let g_a = bind_dense(&mut tape, &layer);
        let phi = tape
            .constant(Tensor::new(vec![3, 3], feats).unwrap())
            .unwrap();
        let l = aux_loss(&mut tape, &g_a, phi, &[0, 1, 2]).unwrap();
        // -log(e^10 / (e^10 + 2)) = ln(1 + 2e^-10)
        let oracle = (2.0 * (-10f64).exp()).ln_1p();
        assert!((tape.value(l).item() - oracle).abs() < 1e-15);
        assert!(tape.value(l).item() < 1e-3);
    }

    #[test]
    fn aux_loss_batch_of_copies_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = DenseLayer {
            weight: Tensor::new(
                vec![4, 3],
                (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            bias: Tensor::from_vec(vec![0.1, 0.0, -0.1]),
        };
        let x = [0.2, 0.9, 0.0, 1.3];
        let loss = |rows: usize| {
            let mut tape = Tape::new();
            let g_a = bind_dense(&mut tape, &layer);
            let phi = tape
                .constant(
                    Tensor::new(
                        vec![rows, 4],
                        x.iter().cycle().take(4 * rows).copied().collect(),
                    )
                    .unwrap(),
                )
                .unwrap();
            let l = aux_loss(&mut tape, &g_a, phi, &vec![2; rows]).unwrap();
            tape.value(l).item()
        };
        assert!((loss(1) - loss(6)).abs() < 1e-15);
    }

    fn map_tensor(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
        Tensor::new(
            vec![b, 2, 2, k],
            (0..b * 4 * k)
                .map(|_| rng.random_range(-1.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mask_application_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = map_tensor(&mut rng, 2, 4);
        let mut tape = Tape::new();
        let m = tape.leaf(map.clone().with_grad()).unwrap();
        let ones = apply_mask_row(&mut tape, m, &[1, 1, 1, 1]).unwrap();
        assert!(tape
            .value(ones)
            .data()
            .iter()
            .zip(map.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let one_hot = apply_mask_row(&mut tape, m, &[0, 0, 1, 0]).unwrap();
        for (i, &v) in tape.value(one_hot).data().iter().enumerate() {
            if i % 4 == 2 {
                assert_eq!(v, map.data()[i]);
            } else {
                assert_eq!(v.to_bits(), 0.0f64.to_bits());
            }
        }
        let s = tape.sum(one_hot).unwrap();
        tape.backward(s).unwrap();
        for (i, &g) in tape.grad(m).unwrap().iter().enumerate() {
            assert_eq!(g, if i % 4 == 2 { 1.0 } else { 0.0 });
        }
        assert!(apply_mask_row(&mut tape, m, &[1, 1, 1]).is_err());
    }

    #[test]
    fn mask_is_idempotent_and_class_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = map_tensor(&mut rng, 3, 4);
        let w = Tensor::new(
            vec![4, 2],
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mask = build_masks(&w, 50.0).unwrap();
        let classes = [1, 0, 1];
        let mut tape = Tape::new();
        let m = tape.constant(map).unwrap();
        let once = apply_mask(&mut tape, m, &mask, &classes).unwrap();
        let twice = apply_mask(&mut tape, once, &mask, &classes).unwrap();
        assert_eq!(tape.value(once).data(), tape.value(twice).data());
        for (b, &c) in classes.iter().enumerate() {
            let row = tape.value(once).row(b);
            for (i, &v) in row.iter().enumerate() {
                if mask.row(c)[i % 4] == 0 {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn true_class_mask_keeps_its_strongest_channels() {
        // Surviving channels for class c are exactly those with the largest
        // weights for c, so the true-class logit computed from survivors never
        // loses to a masked-out contribution.
        let w = Tensor::new(vec![4, 2], vec![2.0, -1.0, -1.0, 3.0, 0.5, 0.2, 1.5, 0.1]).unwrap();
        let mask = build_masks(&w, 50.0).unwrap();
        assert_eq!(mask.row(0), &[1, 0, 0, 1]);
        assert_eq!(mask.row(1), &[0, 1, 1, 0]);
        let phi = [1.0, 1.0, 1.0, 1.0];
        let logit = |class: usize, row: &[u8]| -> f64 {
            (0..4)
                .map(|i| phi[i] * w.data()[i * 2 + class] * f64::from(row[i]))
                .sum()
        };
        let unmasked_gap = logit(0, &[1; 4]) - logit(1, &[1; 4]);
        let masked_gap = logit(0, mask.row(0)) - logit(1, mask.row(0));
        assert!(masked_gap >= unmasked_gap);
    }

    #[test]
    fn mask_carries_no_gradient_to_aux_weights() {
        // The loss depends on g_a only through the mask; its gradient w.r.t.
        // g_a must vanish both analytically and numerically.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = map_tensor(&mut rng, 2, 6);
        let w = Tensor::new(
            vec![6, 2],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = grad_check(
            |tape, v| {
                let mask = build_masks(tape.value(v[0]), 50.0)?;
                let m = tape.constant(map.clone())?;
                let pruned = apply_mask(tape, m, &mask, &[0, 1])?;
                let s = tape.sum(pruned)?;
                // Tie the weight var into the graph with zero weight.
                let z = tape.scale(v[0], 0.0)?;
                let z = tape.sum(z)?;
                tape.add(s, z)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn dropout_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = map_tensor(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let m = tape.constant(map.clone()).unwrap();
        let a = channel_dropout(&mut tape, m, 0.0, &mut rng, true).unwrap();
        let b = channel_dropout(&mut tape, m, 0.7, &mut rng, false).unwrap();
        assert_eq!(tape.value(a).data(), map.data());
        assert_eq!(tape.value(b).data(), map.data());
        assert!(channel_dropout(&mut tape, m, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 100_000;
        let map = Tensor::new(vec![draws, 1, 1, 1], vec![2.0; draws]).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(map).unwrap();
        let d = channel_dropout(&mut tape, m, 0.5, &mut rng, true).unwrap();
        let mean = tape.value(d).data().iter().sum::<f64>() / draws as f64;
        assert!((mean / 2.0 - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn activation_frequency_examples() {
        let equal = Tensor::new(vec![2, 3], vec![0.4; 6]).unwrap();
        assert_eq!(
            activation_frequency_pooled(&equal).unwrap().frequency,
            vec![1.0; 3]
        );

        // Dominant channel at 100; the rest at half the 1% threshold.
        let tau = 0.01 * 100.0;
        let v = Tensor::new(vec![1, 4], vec![100.0, 0.5 * tau, 0.5 * tau, 0.5 * tau]).unwrap();
        assert_eq!(
            activation_frequency_pooled(&v).unwrap().frequency,
            vec![1.0, 0.0, 0.0, 0.0]
        );

        let zeros = Tensor::zeros(&[3, 2, 2, 5]);
        assert_eq!(
            activation_frequency(&zeros).unwrap().frequency,
            vec![0.0; 5]
        );

        assert!(activation_frequency(&Tensor::zeros(&[0, 2, 2, 5])).is_err());
    }

    #[test]
    fn frequency_csv_layout() {
        let s = ChannelStats {
            frequency: vec![1.0, 0.25],
            samples: 4,
            threshold_fraction: 0.01,
        };
        let t = ChannelStats {
            frequency: vec![0.5, 1.0],
            samples: 4,
            threshold_fraction: 0.01,
        };
        assert_eq!(
            frequency_csv(&s, &t).unwrap(),
            "channel_index,frequency_source,frequency_target\n0,1,0.5\n1,0.25,1\n"
        );
    }
}
