use std::collections::BTreeSet;

use mistlab::attacks::{modified_entropy, lira_log_ratio, AttackScores, ScoredInstance};
use mistlab::data::{partition, shadow_membership, coverage_gaps, ShadowScheme};
use mistlab::metrics::{plr, roc, roc_from_scores, tpr_at_fpr};
use mistlab::nn::{average_params, param_count, sgd_step, Gradient, ModelParams};
use mistlab::shadow::GaussianPair;
use proptest::prelude::*;

/// `P(member > nonmember) + ½ P(tie)` by enumerating every pair.
fn pair_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut twice = 0u64;
    for m in members {
        for n in nonmembers {
            twice += if m > n { 2 } else if m == n { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * members.len() * nonmembers.len()) as f64
}

/// Best TPR over thresholds `t` (predict member iff `score ≥ t`) with
/// FPR ≤ target, by trying every observed score as a threshold.
fn enumerated_tpr(members: &[f64], nonmembers: &[f64], target: f64) -> f64 {
    let mut best = 0.0;
    for &t in members.iter().chain(nonmembers) {
        let fp = nonmembers.iter().filter(|&&s| s >= t).count() as f64 / nonmembers.len() as f64;
        if fp <= target {
            let tp = members.iter().filter(|&&s| s >= t).count() as f64 / members.len() as f64;
            if tp > best {
                best = tp;
            }
        }
    }
    best
}

fn scores_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // Small integer grid so ties are common.
    let s = prop_oneof![(0i32..12).prop_map(f64::from), -50.0f64..50.0];
    (
        prop::collection::vec(s.clone(), 1..100),
        prop::collection::vec(s, 1..100),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partition_is_disjoint_cover_and_balanced(n in 1usize..300, parts in 1usize..9, epoch in 0usize..1000, seed: u64) {
        prop_assume!(parts <= n);
        let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let plan = partition(&ids, parts, epoch, seed).unwrap();
        prop_assert_eq!(plan.subsets.len(), parts);
        let sizes: Vec<usize> = plan.subsets.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let all: Vec<usize> = plan.subsets.concat();
        let set: BTreeSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(set, ids.iter().copied().collect::<BTreeSet<_>>());
        prop_assert_eq!(partition(&ids, parts, epoch, seed).unwrap(), plan);
    }

    #[test]
    fn removing_one_id_moves_few_others(n in 2usize..200, parts in 1usize..8, drop in 0usize..200, epoch in 0usize..100, seed: u64) {
        prop_assume!(parts < n && drop < n);
        let ids: Vec<usize> = (0..n).collect();
        let rest: Vec<usize> = ids.iter().copied().filter(|&i| i != drop).collect();
        let subset_of = |plan: &mistlab::data::PartitionPlan| {
            let mut at = vec![usize::MAX; n];
            for (c, s) in plan.subsets.iter().enumerate() {
                for &id in s {
                    at[id] = c;
                }
            }
            at
        };
        let full = subset_of(&partition(&ids, parts, epoch, seed).unwrap());
        let reduced = subset_of(&partition(&rest, parts, epoch, seed).unwrap());
        let moved = rest.iter().filter(|&&i| full[i] != reduced[i]).count();
        prop_assert!(moved < parts);
    }

    #[test]
    fn average_is_fixed_order_mean(c in 1usize..8, seed: u64) {
        let dims = vec![3, 4, 2];
        let mut rng = mistlab::rng::stream(seed, &[]);
        let models: Vec<ModelParams> = (0..c)
            .map(|_| {
                use rand::Rng;
                let v = (0..param_count(&dims)).map(|_| rng.random_range(-5.0..5.0)).collect();
                ModelParams::new(dims.clone(), v).unwrap()
            })
            .collect();
        let avg = average_params(&models).unwrap();
        for i in 0..avg.len() {
            let mut s = 0.0;
            for m in &models {
                s += m.values()[i];
            }
            prop_assert_eq!(avg.values()[i].to_bits(), (s / c as f64).to_bits());
        }
    }

    #[test]
    fn sgd_step_is_linear(p in prop::collection::vec(-10.0f64..10.0, 6), g in prop::collection::vec(-10.0f64..10.0, 6), lr in 0.0f64..2.0) {
        let m = ModelParams::new(vec![2, 2], p.clone()).unwrap();
        let out = sgd_step(&m, &Gradient::new(g.clone()), lr).unwrap();
        for i in 0..6 {
            prop_assert_eq!(out.values()[i], p[i] - lr * g[i]);
        }
        let zero = sgd_step(&m, &Gradient::new(vec![0.0; 6]), lr).unwrap();
        prop_assert_eq!(zero, m);
    }

    #[test]
    fn auc_equals_pair_counting((members, nonmembers) in scores_strategy()) {
        let curve = roc_from_scores(&members, &nonmembers).unwrap();
        prop_assert_eq!(curve.auc(), pair_auc(&members, &nonmembers));
        let pts = curve.points();
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        prop_assert_eq!((pts[pts.len() - 1].fpr, pts[pts.len() - 1].tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
    }

    #[test]
    fn tpr_at_fpr_equals_threshold_enumeration((members, nonmembers) in scores_strategy(), target in 1e-4f64..1.0) {
        let curve = roc_from_scores(&members, &nonmembers).unwrap();
        let got = tpr_at_fpr(&curve, target);
        prop_assert_eq!(got.tpr, enumerated_tpr(&members, &nonmembers, target));
        prop_assert!(got.realized_fpr <= target);
        prop_assert!((plr(got.tpr, target) * target - got.tpr).abs() <= 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform((members, nonmembers) in scores_strategy()) {
        let f = |s: &f64| (s / 7.0).exp() * 3.0 - 1.0;
        let a = roc_from_scores(&members, &nonmembers).unwrap().auc();
        let tm: Vec<f64> = members.iter().map(f).collect();
        let tn: Vec<f64> = nonmembers.iter().map(f).collect();
        prop_assert_eq!(roc_from_scores(&tm, &tn).unwrap().auc(), a);
    }

    #[test]
    fn flipping_truth_mirrors_auc((members, nonmembers) in scores_strategy()) {
        let mut entries = Vec::new();
        for (i, &s) in members.iter().enumerate() {
            entries.push(ScoredInstance { id: i, member: true, class: 0, score: s });
        }
        for (i, &s) in nonmembers.iter().enumerate() {
            entries.push(ScoredInstance { id: 1000 + i, member: false, class: 0, score: s });
        }
        let sc = AttackScores::new("x", entries).unwrap();
        let a = roc(&sc).unwrap().auc();
        let b = roc(&sc.with_flipped_truth()).unwrap().auc();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn modified_entropy_is_nonnegative(raw in prop::collection::vec(0.0f64..1.0, 2..8), y in 0usize..8) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 0.0 && y < raw.len());
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        prop_assert!(modified_entropy(&p, y) >= 0.0);
    }

    #[test]
    fn lira_ratio_is_antisymmetric(s in -10.0f64..10.0, a in -5.0f64..5.0, b in -5.0f64..5.0, sa in 0.01f64..3.0, sb in 0.01f64..3.0) {
        let g = GaussianPair { mu_in: a, sigma_in: sa, mu_out: b, sigma_out: sb };
        let swapped = GaussianPair { mu_in: b, sigma_in: sb, mu_out: a, sigma_out: sa };
        prop_assert!((lira_log_ratio(s, &g) + lira_log_ratio(s, &swapped)).abs() < 1e-9);
    }

    #[test]
    fn balanced_shadows_cover_every_instance(n in 1usize..200, half in 2usize..10, seed: u64) {
        let pool: Vec<usize> = (0..n).collect();
        let s = 2 * half;
        let m = shadow_membership(&pool, s, ShadowScheme::Balanced, seed);
        prop_assert_eq!(m.len(), s);
        for id in &pool {
            let ins = m.iter().filter(|set| set.binary_search(id).is_ok()).count();
            prop_assert_eq!(ins, half);
        }
        prop_assert!(coverage_gaps(&pool, &m, 2).is_empty());
    }
}
