mod common;

use makd::annotate::{AnnotationStore, AspectAnnotation};
use makd::losses::{
    bernoulli_entropy, class_cross_entropy, kd_kl, kl_aspect_loss, makd_bce, total_loss, total_loss_grad,
    yes_no_probability, AspectTargets, ExpandedOutput,
};
use makd::numerics::{log_softmax, softmax};
use proptest::prelude::*;

fn logit() -> impl Strategy<Value = f64> {
    -30.0..30.0f64
}

/// Output with `c` class and `q` aspect logits, plus matching targets.
fn head() -> impl Strategy<Value = (ExpandedOutput, AspectTargets, usize)> {
    (1usize..6, 0usize..6).prop_flat_map(|(c, q)| {
        (
            prop::collection::vec(logit(), c + q),
            prop::collection::vec(0.0..=1.0f64, q),
            0..c,
        )
            .prop_map(move |(z, t, label)| {
                (
                    ExpandedOutput::new(z, c).unwrap(),
                    AspectTargets::new(t).unwrap(),
                    label,
                )
            })
    })
}

proptest! {
    #[test]
    fn yes_no_probability_is_a_probability(a in -1e3..1e3f64, b in -1e3..1e3f64) {
        let p = yes_no_probability(a, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let swapped = yes_no_probability(b, a).unwrap();
        prop_assert!((p + swapped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_are_finite_and_non_negative((out, t, label) in head()) {
        let ce = class_cross_entropy(&out, label).unwrap();
        let bce = makd_bce(&out, &t).unwrap();
        let kl = kl_aspect_loss(&out, &t).unwrap();
        for v in [ce, bce, kl] {
            prop_assert!(v.is_finite() && v >= -1e-12, "{v}");
        }
    }

    #[test]
    fn bce_minus_kl_is_target_entropy((out, t, _label) in head()) {
        let gap = makd_bce(&out, &t).unwrap() - kl_aspect_loss(&out, &t).unwrap();
        let h: f64 = t.as_slice().iter().map(|&q| bernoulli_entropy(q)).sum();
        prop_assert!((gap - h).abs() < 1e-9, "gap {gap} entropy {h}");
    }

    #[test]
    fn total_is_ce_plus_weighted_aspect_term((out, t, label) in head(), alpha in 0.0..5.0f64) {
        let b = total_loss(&out, label, &t, alpha).unwrap();
        prop_assert_eq!(b.total, b.ce + alpha * b.makd);
        let g = total_loss_grad(&out, label, &t, alpha).unwrap();
        // class softmax gradient sums to zero over the class slice
        let class_sum: f64 = g[..out.num_classes()].iter().sum();
        prop_assert!(class_sum.abs() < 1e-12);
    }

    #[test]
    fn kd_kl_vanishes_on_shifted_logits(
        s in prop::collection::vec(logit(), 2..8),
        shift in -5.0..5.0f64,
        temperature in 0.5..8.0f64,
    ) {
        // softmax is shift-invariant, so a shifted copy is the same distribution
        let t: Vec<f64> = s.iter().map(|x| x + shift).collect();
        prop_assert!(kd_kl(&s, &t, temperature).unwrap().abs() < 1e-9);
    }

    // Kept away from saturation: with logits far apart at low temperature
    // both sides are one-hot to within e^-90 and the divergence underflows.
    #[test]
    fn kd_kl_is_positive_on_different_distributions(
        s in prop::collection::vec(-5.0..5.0f64, 2..8),
        temperature in 0.5..8.0f64,
    ) {
        let mut other = s.clone();
        other[0] += 3.0;
        prop_assert!(kd_kl(&s, &other, temperature).unwrap() > 0.0);
        prop_assert!(kd_kl(&other, &s, temperature).unwrap() > 0.0);
    }

    #[test]
    fn softmax_normalises(xs in prop::collection::vec(-700.0..700.0f64, 1..10)) {
        let p = softmax(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (lp, p) in log_softmax(&xs).iter().zip(&p) {
            prop_assert!(lp.is_finite());
            prop_assert!((lp.exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn store_round_trip_is_bit_exact(
        cells in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64, any::<bool>()), 12)
    ) {
        let manifest = common::toy_manifest(4);
        let questions = common::toy_questions(3);
        let ids = manifest.images.iter().map(|i| i.id.clone()).collect();
        let mut store = AnnotationStore::empty(&manifest.dataset_id, &questions, ids, true);
        for (k, &(y, n, imputed)) in cells.iter().enumerate() {
            store.set(k / 3, k % 3, AspectAnnotation::from_logits(y, n, imputed).unwrap());
        }
        let back = AnnotationStore::from_json(&store.to_json()).unwrap();
        prop_assert_eq!(&back, &store);
        for (k, &(y, n, _)) in cells.iter().enumerate() {
            let q = back.get(k / 3, k % 3).unwrap();
            prop_assert_eq!(q.to_bits(), yes_no_probability(y, n).unwrap().to_bits());
        }
    }
}
