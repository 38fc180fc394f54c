mod common;

use dgnet::dataset::{
    augment, flip_horizontal, generate_pairs, split_validation, AugmentConfig, ImageKind, ImageRecord, Protocol,
};
use dgnet::evaluator::{best_accuracy, gar_at_far, roc_curve};
use dgnet::losses::{class_weights, contrastive_loss, cosine_similarity, LossConfig};
use dgnet::network::{build_network, siamese_forward, NetworkSpec};
use dgnet::tensor::{conv2d, maxpool2, relu};
use dgnet::{Graph, Tensor};
use proptest::prelude::*;

use common::*;

fn tensor_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..max_len)
}

#[test]
fn primitives_pass_grad_check_across_seeds() {
    for seed in 0..24 {
        for (name, err) in primitive_errors(seed) {
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_conv_is_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let x = random_tensor(&mut rng(seed), &[c, h, w], -5.0, 5.0);
        let mut k = Tensor::zeros(&[c, c, 1, 1]).unwrap();
        for i in 0..c {
            k.data_mut()[i * c + i] = 1.0;
        }
        let y = conv2d(&x, &k, &Tensor::zeros(&[c]).unwrap(), 1, 0).unwrap();
        prop_assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn relu_is_idempotent(v in tensor_strategy(64)) {
        let x = Tensor::vector(v).unwrap();
        let once = relu(&x);
        prop_assert!(relu(&once).bitwise_eq(&once));
        prop_assert!(once.data().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn maxpool_ignores_window_order(seed in any::<u64>(), h in 1usize..4, w in 1usize..4) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 2 * h, 2 * w], -1.0, 1.0);
        let (y, _) = maxpool2(&x).unwrap();
        // Swap the two rows inside every window; maxima must not move.
        let mut swapped = x.clone();
        let (hh, ww) = (2 * h, 2 * w);
        for c in 0..2 {
            for i in (0..hh).step_by(2) {
                for j in 0..ww {
                    let a = c * hh * ww + i * ww + j;
                    swapped.data_mut().swap(a, a + ww);
                }
            }
        }
        let (z, _) = maxpool2(&swapped).unwrap();
        prop_assert!(y.bitwise_eq(&z));
        for (o, &m) in y.data().iter().enumerate() {
            let (c, rest) = (o / (h * w), o % (h * w));
            let (i, j) = (2 * (rest / w), 2 * (rest % w));
            let base = c * hh * ww;
            let win = [base + i * ww + j, base + i * ww + j + 1, base + (i + 1) * ww + j, base + (i + 1) * ww + j + 1];
            let expect = win.iter().map(|&k| x.data()[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(m, expect);
        }
    }

    #[test]
    fn forward_ops_stay_finite(v in prop::collection::vec(-1e6f64..1e6, 16)) {
        let x = Tensor::new(vec![1, 4, 4], v).unwrap();
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let k = g.leaf(Tensor::filled(&[2, 1, 3, 3], 0.5).unwrap());
        let b = g.leaf(Tensor::zeros(&[2]).unwrap());
        let c = g.conv2d(xi, k, b, 1, 1).unwrap();
        let r = g.relu(c).unwrap();
        let m = g.maxpool2(r).unwrap();
        let s = g.sigmoid(m).unwrap();
        prop_assert!(g.value(s).is_finite());
    }

    #[test]
    fn cosine_of_nonnegative_vectors_in_unit_interval(
        a in prop::collection::vec(0.0f64..5.0, 1..20),
        scale in 0.1f64..10.0,
    ) {
        let b: Vec<f64> = a.iter().rev().map(|v| v * scale).collect();
        let s = cosine_similarity(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, cosine_similarity(&b, &a).unwrap());
    }

    #[test]
    fn contrastive_zero_iff_pairs_satisfied(
        d in prop::collection::vec(0.0f64..=1.0, 1..12),
        y in prop::collection::vec(0u8..2, 12),
        margin in 0.05f64..=1.0,
    ) {
        let y = &y[..d.len()];
        let cfg = LossConfig { margin, ..LossConfig::default() };
        let l = contrastive_loss(&d, y, &cfg).unwrap();
        let satisfied = d.iter().zip(y).all(|(&d, &y)| if y == 1 { d == 0.0 } else { d >= margin });
        prop_assert_eq!(l == 0.0, satisfied);
    }

    #[test]
    fn contrastive_monotone_in_distance(d1 in 0.0f64..=1.0, d2 in 0.0f64..=1.0, margin in 0.05f64..=1.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let cfg = LossConfig { margin, ..LossConfig::default() };
        let pos = |d: f64| contrastive_loss(&[d], &[1], &cfg).unwrap();
        let neg = |d: f64| contrastive_loss(&[d], &[0], &cfg).unwrap();
        prop_assert!(pos(lo) <= pos(hi));
        prop_assert!(neg(lo) >= neg(hi));
    }

    #[test]
    fn zero_margin_silences_negatives(d in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let cfg = LossConfig { margin: 0.0, ..LossConfig::default() };
        let y = vec![0u8; d.len()];
        prop_assert_eq!(contrastive_loss(&d, &y, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn class_weights_balance_counts(n_pos in 1usize..10_000, n_neg in 1usize..10_000) {
        let (wp, wn) = class_weights(n_pos, n_neg).unwrap();
        let (a, b) = (wp * n_pos as f64, wn * n_neg as f64);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(b));
    }

    #[test]
    fn metrics_match_exhaustive_sweeps(seed in any::<u64>()) {
        let s = random_score_set(&mut rng(seed), 60);
        for far in [0.001, 0.01, 0.1, 0.25, 0.5, 1.0] {
            prop_assert_eq!(gar_at_far(&s, far).unwrap(), brute_gar_at_far(&s, far));
        }
        let b = best_accuracy(&s).unwrap();
        prop_assert_eq!((b.accuracy, b.threshold), brute_best_accuracy(&s));
        let majority = s.genuine.len().max(s.impostor.len()) as f64 / s.len() as f64;
        prop_assert!(b.accuracy >= majority);
    }

    #[test]
    fn gar_nondecreasing_in_far_target(seed in any::<u64>(), a in 0.0001f64..1.0, b in 0.0001f64..1.0) {
        let s = random_score_set(&mut rng(seed), 40);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(gar_at_far(&s, lo).unwrap().0 <= gar_at_far(&s, hi).unwrap().0);
    }

    #[test]
    fn roc_is_monotone(seed in any::<u64>()) {
        let s = random_score_set(&mut rng(seed), 40);
        let roc = roc_curve(&s).unwrap();
        let first = roc.points.first().unwrap();
        let last = roc.points.last().unwrap();
        prop_assert_eq!((first.far, first.gar), (0.0, 0.0));
        prop_assert_eq!((last.far, last.gar), (1.0, 1.0));
        for w in roc.points.windows(2) {
            prop_assert!(w[0].far <= w[1].far && w[0].gar <= w[1].gar);
        }
    }

    #[test]
    fn pairs_match_brute_force(seed in any::<u64>()) {
        let records = random_identity_set(&mut rng(seed));
        for protocol in [Protocol::Obfuscation, Protocol::Impersonation, Protocol::Overall] {
            let pairs = generate_pairs(&records, protocol);
            prop_assert_eq!(pair_keys(&pairs).len(), pairs.len());
            prop_assert_eq!(pair_keys(&pairs), brute_pairs(&records, protocol));
            for p in &pairs {
                let sound = p.a.kind != ImageKind::Impostor && p.b.kind != ImageKind::Impostor;
                prop_assert_eq!(p.y == 1, sound);
                prop_assert_eq!(p.protocol, protocol);
            }
        }
        let overall = pair_keys(&generate_pairs(&records, Protocol::Overall));
        for protocol in [Protocol::Obfuscation, Protocol::Impersonation] {
            prop_assert!(pair_keys(&generate_pairs(&records, protocol)).is_subset(&overall));
        }
    }

    #[test]
    fn augmentation_keeps_shape_and_range(seed in any::<u64>(), c in 1usize..4) {
        let mut r = rng(seed);
        let img = random_tensor(&mut r, &[c, 9, 11], 0.0, 1.0);
        let cfg = AugmentConfig { seed, ..AugmentConfig::default() };
        let a = augment(&img, &cfg, &mut rng(seed));
        let b = augment(&img, &cfg, &mut rng(seed));
        prop_assert_eq!(a.shape(), img.shape());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.bitwise_eq(&b));
        prop_assert!(flip_horizontal(&flip_horizontal(&img)).bitwise_eq(&img));
        prop_assert!(augment(&img, &AugmentConfig::none(), &mut r).bitwise_eq(&img));
    }

    #[test]
    fn validation_split_is_identity_disjoint(n in 1usize..20, fraction in 0.0f64..0.9, seed in any::<u64>()) {
        let records: Vec<ImageRecord> = (0..n)
            .flat_map(|i| (0..3).map(move |k| ImageRecord::new(format!("id{i}"), format!("id{i}/{k}.pgm"), ImageKind::Genuine)))
            .collect();
        match split_validation(&records, fraction, seed) {
            Ok((train, val)) => {
                prop_assert_eq!(train.len() + val.len(), records.len());
                for v in &val {
                    prop_assert!(train.iter().all(|t| t.identity != v.identity));
                }
                let again = split_validation(&records, fraction, seed).unwrap();
                prop_assert_eq!(again, (train, val));
            }
            Err(e) => prop_assert!(matches!(e, dgnet::Error::Config(_))),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn siamese_streams_are_tied_and_symmetric(seed in any::<u64>(), net_seed in 0u64..4) {
        let params = build_network(&NetworkSpec::tiny(), net_seed).unwrap();
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[1, 32, 32], 0.0, 1.0);
        let y = random_tensor(&mut r, &[1, 32, 32], 0.0, 1.0);
        let same = siamese_forward(&params, &x, &x).unwrap();
        prop_assert_eq!(&same.emb_a, &same.emb_b);
        prop_assert_eq!(same.cosine_distance(), 0.0);
        let ab = siamese_forward(&params, &x, &y).unwrap();
        let ba = siamese_forward(&params, &y, &x).unwrap();
        prop_assert_eq!(ab.p.to_bits(), ba.p.to_bits());
        prop_assert_eq!(ab.cosine_distance(), ba.cosine_distance());
        prop_assert!(ab.p > 0.0 && ab.p < 1.0);
        prop_assert!(ab.emb_a.iter().all(|&v| v >= 0.0));
    }
}
