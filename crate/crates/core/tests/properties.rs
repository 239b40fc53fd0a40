use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmda::autodiff::{grad_check, Tape, Tensor};
use dmda::diagnostics::{a_distance_from_error, frequency_divergence, linear_probe_error};
use dmda::nn::{forward_approximator, forward_expert, init_bundle, Architecture};
use dmda::scp::{apply_mask, build_masks, channel_dropout, ChannelStats};
use dmda::theory::{
    closed_form_d, generalized_jsd, inner_objective, numeric_inner_max, random_joint_set,
    verify_identity,
};
use dmda::trainer::{combine, lr_at, select_best, TrainConfig};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in values(12)) {
        let mut tape = Tape::new();
        let v = tape.constant(tensor(&[3, 4], x)).unwrap();
        let p = tape.softmax(v).unwrap();
        for row in tape.value(p).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&q| q > 0.0 && q < 1.0));
        }
    }

    #[test]
    fn forward_replay_is_bit_identical(x in values(2 * 6 * 6 * 2), k in values(3 * 3 * 2 * 3)) {
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(tensor(&[2, 6, 6, 2], x.clone())).unwrap();
            let kv = tape.constant(tensor(&[3, 2, 3, 3], k.clone())).unwrap();
            let b = tape.constant(tensor(&[3], vec![0.1, -0.2, 0.3])).unwrap();
            let y = tape.conv2d(xv, kv, b, 1, 1).unwrap();
            let y = tape.relu(y).unwrap();
            let y = tape.avg_pool2(y).unwrap();
            tape.value(y).data().to_vec()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn dense_softmax_ce_gradients(w in values(4 * 3), x in values(5 * 4)) {
        let xs = tensor(&[5, 4], x);
        let err = grad_check(
            |tape, v| {
                let xv = tape.constant(xs.clone())?;
                let logits = tape.matmul(xv, v[0])?;
                tape.softmax_cross_entropy(logits, &[0, 1, 2, 1, 0])
            },
            &[tensor(&[4, 3], w)],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_pool_gradients(x in values(4 * 4 * 2), k in values(3 * 3 * 2 * 2)) {
        let err = grad_check(
            |tape, v| {
                let b = tape.constant(tensor(&[2], vec![0.0, 0.0]))?;
                let y = tape.conv2d(v[0], v[1], b, 1, 1)?;
                let y = tape.avg_pool2(y)?;
                let y = tape.mul(y, y)?;
                tape.sum(y)
            },
            &[tensor(&[1, 4, 4, 2], x), tensor(&[2, 2, 3, 3], k)],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn approximator_outputs_distributions(seed in 0u64..1000, z in values(4 * 6)) {
        let arch = Architecture { feature_channels: 6, domains: 3, approx_hidden: 5, ..Architecture::default() };
        let bundle = init_bundle(arch, seed).unwrap();
        let mut tape = Tape::new();
        let d = bundle.approximator.bind(&mut tape, false).unwrap();
        let zv = tape.constant(tensor(&[4, 6], z)).unwrap();
        let p = forward_approximator(&mut tape, &d, zv).unwrap();
        prop_assert_eq!(tape.value(p).shape(), &[4, 3]);
        for row in tape.value(p).data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn expert_shapes(grid in prop::sample::select(vec![(4usize, 2usize), (8, 3), (16, 7)]), seed in 0u64..100) {
        let (k, c) = grid;
        let arch = Architecture { feature_channels: k, classes: c, ..Architecture::default() };
        let bundle = init_bundle(arch, seed).unwrap();
        let mut tape = Tape::new();
        let e = bundle.experts[0].bind(&mut tape, false).unwrap();
        let phi = tape.constant(tensor(&[5, k], vec![0.5; 5 * k])).unwrap();
        let (logits, s) = forward_expert(&mut tape, &e, phi).unwrap();
        prop_assert_eq!(tape.value(logits).shape(), &[5, c]);
        prop_assert_eq!(tape.value(s).shape(), &[5, k]);
    }

    #[test]
    fn median_keeps_half_of_distinct_weights(
        k in prop::sample::select(vec![4usize, 8, 16, 32]),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut w: Vec<f64> = (0..k).map(|i| i as f64 - 3.5).collect();
        w.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let mask = build_masks(&tensor(&[k, 1], w), 50.0).unwrap();
        prop_assert_eq!(mask.survivors(0), k / 2);
    }

    #[test]
    fn masks_keep_a_channel_and_are_idempotent(w in values(8 * 3), map in values(2 * 2 * 2 * 8), q in 0.0f64..99.0) {
        let mask = build_masks(&tensor(&[8, 3], w), q).unwrap();
        prop_assert!((0..3).all(|c| mask.survivors(c) >= 1));
        let mut tape = Tape::new();
        let m = tape.constant(tensor(&[2, 2, 2, 8], map)).unwrap();
        let once = apply_mask(&mut tape, m, &mask, &[0, 2]).unwrap();
        let twice = apply_mask(&mut tape, once, &mask, &[0, 2]).unwrap();
        prop_assert_eq!(tape.value(once).data(), tape.value(twice).data());
    }

    #[test]
    fn dropout_identities(map in values(2 * 2 * 2 * 4), rate in 0.0f64..0.95, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let m = tape.constant(tensor(&[2, 2, 2, 4], map.clone())).unwrap();
        let zero = channel_dropout(&mut tape, m, 0.0, &mut rng, true).unwrap();
        let eval = channel_dropout(&mut tape, m, rate, &mut rng, false).unwrap();
        prop_assert_eq!(tape.value(zero).data(), &map[..]);
        prop_assert_eq!(tape.value(eval).data(), &map[..]);
    }

    #[test]
    fn a_distance_is_clipped(sigma in -1.0f64..2.0) {
        let d = a_distance_from_error(sigma);
        prop_assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn probe_error_is_a_deterministic_rate(x in values(30 * 3), seed in 0u64..50) {
        let features = tensor(&[30, 3], x);
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let e = linear_probe_error(&features, &labels, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(e, linear_probe_error(&features, &labels, seed).unwrap());
    }

    #[test]
    fn frequency_gaps_negate_on_swap(a in prop::collection::vec(0.0f64..=1.0, 6), b in prop::collection::vec(0.0f64..=1.0, 6)) {
        let stats = |f: Vec<f64>| ChannelStats { frequency: f, samples: 10, threshold_fraction: 0.01 };
        let ab = frequency_divergence(&stats(a.clone()), &stats(b.clone())).unwrap();
        let ba = frequency_divergence(&stats(b), &stats(a)).unwrap();
        prop_assert!(ab.gaps.iter().zip(&ba.gaps).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn jsd_is_relabeling_invariant_and_bounded(seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let set = random_joint_set(seed, false);
        let mut perm: Vec<usize> = (0..set.n()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let j = generalized_jsd(&set);
        let jp = generalized_jsd(&set.permute_support(&perm).unwrap());
        prop_assert!((j - jp).abs() < 1e-12);
        prop_assert!(j >= 0.0 && j <= (set.m() as f64).ln() + 1e-12);
    }

    #[test]
    fn identity_holds_and_closed_form_wins(seed in any::<u64>(), equal in any::<bool>()) {
        let set = random_joint_set(seed, equal);
        let r = verify_identity(&set).unwrap();
        prop_assert!(r.identity_ok && r.minimum_ok, "{r:?}");
        let set = set.drop_zero_mass();
        let d = closed_form_d(&set).unwrap();
        prop_assert!(d.iter().all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        let closed = inner_objective(&set, &d);
        let search = numeric_inner_max(&set, 200, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(search.best_candidate <= closed + 1e-12);
        prop_assert!(search.objective <= closed + 1e-12);
    }

    #[test]
    fn loss_terms_recombine(cla in 0.0f64..5.0, mda in 0.0f64..5.0, exp in 0.0f64..5.0, aux in 0.0f64..5.0,
                            alpha in 0.0f64..3.0, beta in 0.0f64..5.0) {
        let t = combine(cla, mda, exp, aux, alpha, beta);
        prop_assert!((t - (cla + alpha * (mda + exp) + beta * aux)).abs() < 1e-12);
    }

    #[test]
    fn selection_stays_in_range(acc in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let i = select_best(&acc).unwrap();
        prop_assert!(i < acc.len());
        prop_assert!(acc.iter().all(|&a| a <= acc[i]));
        prop_assert!(acc[..i].iter().all(|&a| a < acc[i]));
    }

    #[test]
    fn learning_rate_never_increases(total in 1usize..5000) {
        let c = TrainConfig { total_steps: total, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for s in (0..=total).step_by((total / 50).max(1)) {
            let lr = lr_at(s, &c);
            prop_assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }
}
