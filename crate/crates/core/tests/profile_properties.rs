mod common;

use approx::assert_relative_eq;
use common::{pair_strategy, Pair};
use mcfilter::profile::{AccumulateOutcome, ClassFilterProfile, ProfileSet};
use proptest::prelude::*;

const N: usize = 12;
const LABELS: usize = 3;

fn accumulate(pairs: &[Pair], tau: f64) -> ProfileSet<f64> {
    let mut set = ProfileSet::new(N, LABELS);
    set.accumulate_all(pairs.iter().map(|p| (&p.record, &p.mc)), tau)
        .unwrap();
    set
}

fn assert_same_profiles(a: &ProfileSet<f64>, b: &ProfileSet<f64>) {
    assert_eq!(a.n, b.n);
    assert_eq!(a.profiles.len(), b.profiles.len());
    for (pa, pb) in a.profiles.values().zip(b.profiles.values()) {
        assert_eq!(pa.class_label, pb.class_label);
        assert_eq!(pa.counts, pb.counts);
        assert_eq!(pa.samples_accumulated, pb.samples_accumulated);
        for (x, y) in pa.magnitude_sums.iter().zip(&pb.magnitude_sums) {
            assert_relative_eq!(*x, *y, max_relative = 1e-12, epsilon = 1e-12);
        }
    }
}

fn pairs(max: usize) -> impl Strategy<Value = Vec<Pair>> {
    prop::collection::vec(pair_strategy(N, LABELS), 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn accumulation_ignores_record_order(
        (original, shuffled) in pairs(40).prop_flat_map(|p| (Just(p.clone()), Just(p).prop_shuffle())),
        tau in 0.0f64..1.0,
    ) {
        assert_same_profiles(&accumulate(&original, tau), &accumulate(&shuffled, tau));
    }

    #[test]
    fn merge_is_associative(a in pairs(15), b in pairs(15), c in pairs(15), tau in 0.0f64..1.0) {
        let (pa, pb, pc) = (accumulate(&a, tau), accumulate(&b, tau), accumulate(&c, tau));
        let left = pa.merge(&pb).unwrap().merge(&pc).unwrap();
        let right = pa.merge(&pb.merge(&pc).unwrap()).unwrap();
        assert_same_profiles(&left, &right);
    }

    #[test]
    fn merge_equals_accumulating_the_concatenation(a in pairs(20), b in pairs(20), tau in 0.0f64..1.0) {
        let merged = accumulate(&a, tau).merge(&accumulate(&b, tau)).unwrap();
        let all: Vec<Pair> = a.iter().chain(&b).cloned().collect();
        assert_same_profiles(&merged, &accumulate(&all, tau));
        let swapped = accumulate(&b, tau).merge(&accumulate(&a, tau)).unwrap();
        assert_same_profiles(&merged, &swapped);
    }

    #[test]
    fn merging_an_empty_profile_is_identity(a in pairs(20), tau in 0.0f64..1.0) {
        let p = accumulate(&a, tau);
        prop_assert_eq!(p.merge(&ProfileSet::new(N, LABELS)).unwrap(), p);
    }

    #[test]
    fn raising_tau_only_drops_records(pair in pair_strategy(N, LABELS), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut p_lo = ClassFilterProfile::new(pair.record.inferred_class, N);
        let mut p_hi = p_lo.clone();
        let at_lo = p_lo.accumulate(&pair.record, &pair.mc, lo).unwrap();
        let at_hi = p_hi.accumulate(&pair.record, &pair.mc, hi).unwrap();
        if at_hi == AccumulateOutcome::Accumulated {
            prop_assert_eq!(at_lo, AccumulateOutcome::Accumulated);
        }
    }

    #[test]
    fn raising_tau_shrinks_counts(a in pairs(40), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (p_lo, p_hi) = (accumulate(&a, lo), accumulate(&a, hi));
        for (x, y) in p_lo.profiles.values().zip(p_hi.profiles.values()) {
            prop_assert!(y.samples_accumulated <= x.samples_accumulated);
            prop_assert!(y.counts.iter().zip(&x.counts).all(|(h, l)| h <= l));
        }
    }

    #[test]
    fn raising_freq_threshold_only_clears_bits(a in pairs(40), f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let p = accumulate(&a, 0.0);
        for profile in p.profiles.values().filter(|p| p.samples_accumulated > 0) {
            let g_lo = profile.derive_global_set(lo).unwrap();
            let g_hi = profile.derive_global_set(hi).unwrap();
            for k in 0..N {
                prop_assert!(!g_hi.bits.is_set(k) || g_lo.bits.is_set(k));
            }
        }
    }

    #[test]
    fn global_sets_follow_the_threshold_rule(a in pairs(40), f in 0.0f64..=1.0) {
        let p = accumulate(&a, 0.0);
        for profile in p.profiles.values() {
            profile.check_invariants().unwrap();
            if profile.counts.iter().all(|&c| c == 0) {
                continue;
            }
            let g = profile.derive_global_set(f).unwrap();
            let max = g.normalized_freq.iter().cloned().fold(0.0, f64::max);
            prop_assert_eq!(max, 1.0);
            for k in 0..N {
                prop_assert!((0.0..=1.0).contains(&g.normalized_freq[k]));
                prop_assert_eq!(g.bits.is_set(k), g.normalized_freq[k] >= f);
            }
        }
    }
}

#[test]
fn threshold_zero_keeps_every_filter_and_one_keeps_the_most_frequent() {
    let p = ClassFilterProfile::<f64> {
        class_label: 0,
        counts: vec![10, 5, 0, 10],
        magnitude_sums: vec![4.0, 1.0, 0.0, 2.0],
        samples_accumulated: 12,
    };
    let all = p.derive_global_set(0.0).unwrap();
    assert_eq!(all.bits.count_ones(), 4);
    let top = p.derive_global_set(1.0).unwrap();
    assert_eq!(top.bits.indices().collect::<Vec<_>>(), vec![0, 3]);
    let default = p.derive_global_set(0.15).unwrap();
    assert_eq!(default.normalized_freq, vec![1.0, 0.5, 0.0, 1.0]);
    assert_eq!(default.bits.indices().collect::<Vec<_>>(), vec![0, 1, 3]);
}
