use std::f64::consts::PI;

use augweight_core::corpus::{augment, generate_task, perturbed_count, Pair};
use augweight_core::objective::{
    corollary1_bound, expected_phi_quadrature, grad_weight, law_of_cosines_check, paired_bound_check, phi,
    GradientWeightRule, PerturbationDistribution, PolarPerturbation,
};
use augweight_core::seq2seq::TokenSequence;
use augweight_core::transport::{exact_1d_oracle, exact_w2, ipot_distance};
use augweight_core::{AugmentSide, AugmentSpec, IpotConfig, RealArray, SentenceDistribution, TaskKind, TaskSpec};
use proptest::prelude::*;

fn vec_of(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, d)
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..20).prop_flat_map(|d| (vec_of(d), vec_of(d), vec_of(d)))
}

fn points_1d(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

fn dist_1d(xs: &[f64]) -> SentenceDistribution {
    SentenceDistribution::uniform(RealArray::matrix(xs.len(), 1, xs.to_vec()).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn phi_lies_between_the_side_difference_and_sum(e in 0.0..10.0f64, r in 0.0..10.0f64, t in 0.0..PI) {
        let p = phi(e, PolarPerturbation::new(r, t).unwrap()).unwrap();
        prop_assert!(p >= (e - r).abs() - 1e-9);
        prop_assert!(p <= e + r + 1e-9);
    }

    #[test]
    fn phi_grows_with_the_angle(e in 0.0..10.0f64, r in 0.0..10.0f64, t1 in 0.0..PI, t2 in 0.0..PI) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = phi(e, PolarPerturbation::new(r, lo).unwrap()).unwrap();
        let b = phi(e, PolarPerturbation::new(r, hi).unwrap()).unwrap();
        prop_assert!(a <= b + 1e-12);
    }

    #[test]
    fn law_of_cosines_holds_for_random_triples((a, b, c) in triple()) {
        let scale = a.iter().chain(&b).chain(&c).map(|x| x * x).sum::<f64>().max(1.0);
        if let Ok(res) = law_of_cosines_check(&a, &b, &c) {
            prop_assert!(res <= 1e-12 * scale, "residual {res}");
        }
    }

    #[test]
    fn paired_bound_never_exceeds_zero(
        (w, x, y, z) in (1usize..12).prop_flat_map(|d| (vec_of(d), vec_of(d), vec_of(d), vec_of(d)))
    ) {
        prop_assert!(paired_bound_check(&w, &x, &y, &z).unwrap() <= 1e-9);
    }

    #[test]
    fn weights_stay_clipped_and_grow_with_loss(l1 in 0.0..50.0f64, l2 in 0.0..50.0f64, w1 in 0.1..1.0f64, span in 0.0..10.0f64) {
        let rule = GradientWeightRule::uniform().with_clip(w1, w1 + span);
        let (a, b) = (grad_weight(l1, &rule), grad_weight(l2, &rule));
        for w in [a, b] {
            prop_assert!((rule.w1..=rule.w2).contains(&w));
        }
        if l1 <= l2 {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn degenerate_rule_is_always_one(l in 0.0..1e6f64) {
        prop_assert_eq!(grad_weight(l, &GradientWeightRule::none().with_clip(1.0, 1.0)), 1.0);
    }

    #[test]
    fn w2_is_a_symmetric_nonnegative_distance(xs in points_1d(5), ys in points_1d(5)) {
        let (u, v) = (dist_1d(&xs), dist_1d(&ys));
        let uv = exact_w2(&u, &v).unwrap();
        prop_assert!(uv >= 0.0);
        prop_assert!((uv - exact_w2(&v, &u).unwrap()).abs() <= 1e-9);
        prop_assert!(exact_w2(&u, &u).unwrap() <= 1e-9);
    }

    #[test]
    fn shifting_both_supports_leaves_w2_unchanged(xs in points_1d(4), ys in points_1d(4), s in -5.0..5.0f64) {
        let shift = |p: &[f64]| p.iter().map(|x| x + s).collect::<Vec<_>>();
        let a = exact_w2(&dist_1d(&xs), &dist_1d(&ys)).unwrap();
        let b = exact_w2(&dist_1d(&shift(&xs)), &dist_1d(&shift(&ys))).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn perturbation_edits_exactly_the_advertised_count(seed in any::<u64>(), rate in 0.0..=0.5f64, len in 1usize..12) {
        let vocab = 12;
        let content: Vec<usize> = (0..len).map(|i| 3 + (i % 9)).collect();
        let pair = Pair {
            x: TokenSequence::new(content.clone(), vocab).unwrap(),
            y: TokenSequence::new(content.clone(), vocab).unwrap(),
        };
        let spec = AugmentSpec { rate, side: AugmentSide::Input, per_original: 1, weight_w: 0.3 };
        let out = augment(&pair, &spec, vocab, seed).unwrap();
        prop_assert_eq!(out.len(), 1);
        let changed = out[0].x.content().iter().zip(&content).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, perturbed_count(rate, len));
        prop_assert_eq!(&out[0].y, &pair.y);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn uniform_bound_dominates_the_expectation(e in 0.0..5.0f64, radius in 0.05..3.0f64) {
        let dist = PerturbationDistribution::uniform(radius).unwrap();
        let q = expected_phi_quadrature(e, &dist).unwrap();
        prop_assert!(corollary1_bound(e, radius).unwrap() >= q - 1e-6);
    }

    #[test]
    fn ipot_matches_the_1d_oracle(xs in points_1d(4), ys in points_1d(4)) {
        let (u, v) = (dist_1d(&xs), dist_1d(&ys));
        let exact = exact_1d_oracle(&u, &v).unwrap();
        let sol = ipot_distance(&u, &v, &IpotConfig::default()).unwrap();
        prop_assert!((sol.value - exact).abs() <= 1e-3 * exact.max(1e-3), "ipot {} exact {exact}", sol.value);
        for s in sol.plan.row_sums().into_iter().chain(sol.plan.col_sums()) {
            prop_assert!((s - 0.25).abs() <= 1e-5);
        }
    }
}

#[test]
fn task_generation_is_a_function_of_the_seed() {
    let spec = |seed| TaskSpec::new(TaskKind::Cipher, seed);
    let a = generate_task(&spec(5)).unwrap();
    let b = generate_task(&spec(5)).unwrap();
    let c = generate_task(&spec(6)).unwrap();
    assert_eq!(a.train.pairs, b.train.pairs);
    assert_ne!(a.train.pairs, c.train.pairs);
    assert_eq!(a.train.pairs.len(), 2000);
}
