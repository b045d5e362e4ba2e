use std::collections::BTreeSet;

use proptest::prelude::*;
use selfsv::io;
use selfsv::losses::{bitempered_loss, softmax_ce, tempered_softmax, BiTemperedConfig};
use selfsv::trainer::{lr_at, sgd_step, LrSchedule, SgdConfig, SgdState};
use selfsv::types::UtteranceId;
use selfsv::{EmbeddingSet, LabelSet, ScoreSet, TrialList};

fn id_list(max: usize) -> impl Strategy<Value = Vec<UtteranceId>> {
    prop::collection::btree_set("[a-z][a-z0-9_-]{0,6}", 0..max)
        .prop_map(|s: BTreeSet<String>| s.into_iter().map(|n| UtteranceId::new(n).unwrap()).collect())
}

fn embeddings() -> impl Strategy<Value = EmbeddingSet> {
    (id_list(12), 1usize..6).prop_flat_map(|(ids, dim)| {
        let n = ids.len() * dim;
        prop::collection::vec(-1e6f32..1e6, n).prop_map(move |data| EmbeddingSet::new(ids.clone(), dim, data).unwrap())
    })
}

fn trials() -> impl Strategy<Value = TrialList> {
    (
        prop::collection::vec(("[a-z]{1,4}", "[a-z]{1,4}"), 1..20),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(pairs, labelled, bits)| {
            let pairs: Vec<_> = pairs
                .into_iter()
                .map(|(a, b)| (UtteranceId::new(a).unwrap(), UtteranceId::new(b).unwrap()))
                .collect();
            let labels = labelled.then(|| (0..pairs.len()).map(|i| bits >> (i % 64) & 1 == 1).collect());
            TrialList::new(pairs, labels).unwrap()
        })
}

proptest! {
    #[test]
    fn embeddings_roundtrip_bit_exactly(set in embeddings()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        io::write_embeddings(&set, &path).unwrap();
        prop_assert_eq!(io::read_embeddings(&path).unwrap(), set);
    }

    #[test]
    fn trials_and_scores_roundtrip(t in trials(), seed in any::<u64>()) {
        prop_assert_eq!(&io::parse_trials(&io::format_trials(&t)).unwrap(), &t);
        let scores: Vec<f64> = (0..t.len() as u64)
            .map(|i| f64::from_bits((seed ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15)) & 0x3fff_ffff_ffff_ffff) - 1.0)
            .collect();
        let set = ScoreSet::new(t.without_labels(), scores).unwrap();
        let back = io::parse_scores(&io::format_scores(&set, &["note".to_string()])).unwrap();
        prop_assert_eq!(back.scores(), set.scores());
        prop_assert_eq!(back.trials(), set.trials());
    }

    #[test]
    fn labels_roundtrip(ids in id_list(15), k in 1usize..5, seed in any::<u64>(), weighted in any::<bool>()) {
        // an empty weighted set has nothing to carry the weights column
        prop_assume!(!(weighted && ids.is_empty()));
        let labels: Vec<usize> = (0..ids.len()).map(|i| (seed >> (i % 60)) as usize % k).collect();
        let weights = weighted.then(|| (0..ids.len()).map(|i| if (seed >> (i % 64)) & 1 == 1 { 1.0 } else { 0.5 }).collect());
        let set = LabelSet::new(ids, labels, k, weights).unwrap();
        prop_assert_eq!(io::parse_labels(&io::format_labels(&set)).unwrap(), set);
    }

    #[test]
    fn tempered_probabilities_are_a_distribution(
        z in prop::collection::vec(-20.0f64..20.0, 1..12),
        t in 1.0f64..3.0,
    ) {
        let p = tempered_softmax(&z, t, 200, 1e-12).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bitempered_is_continuous_at_unit_temperatures(
        // The gap to softmax grows like (t - 1) ln(p)^2, so a 1e-6 step stays
        // inside 1e-4 only while the logit spread is moderate.
        z in prop::collection::vec(-2.0f64..2.0, 2..8),
        pick in any::<prop::sample::Index>(),
        d1 in prop_oneof![Just(-1e-6), Just(0.0)],
        d2 in prop_oneof![Just(1e-6), Just(0.0)],
    ) {
        let t = pick.index(z.len());
        let near = bitempered_loss(&z, t, &BiTemperedConfig::new(1.0 + d1, 1.0 + d2)).unwrap().loss;
        prop_assert!((near - softmax_ce(&z, t).unwrap().loss).abs() < 1e-4);
    }

    #[test]
    fn sgd_with_zero_rate_keeps_params(
        p in prop::collection::vec(-10.0f64..10.0, 1..10),
        g in prop::collection::vec(-10.0f64..10.0, 10),
        steps in 1usize..4,
    ) {
        let mut params = p.clone();
        let mut state = SgdState::new(p.len());
        for _ in 0..steps {
            sgd_step(&mut params, &g[..p.len()], &mut state, 0.0, &SgdConfig::default()).unwrap();
        }
        prop_assert_eq!(params, p);
    }

    #[test]
    fn lr_never_rises_after_warmup(a in 0.0f64..=1.0, b in 0.0f64..=1.0, nominal in 0.01f64..2.0) {
        let s = LrSchedule::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (lr_at(lo, nominal, &s).unwrap(), lr_at(hi, nominal, &s).unwrap());
        prop_assert!(x <= nominal && y <= nominal);
        if lo >= s.warmup_frac {
            prop_assert!(y <= x);
        } else if hi < s.warmup_frac {
            prop_assert!(x <= y);
        }
    }
}

#[test]
fn lr_peaks_at_nominal() {
    let s = LrSchedule::default();
    assert_eq!(lr_at(s.warmup_frac, 0.3, &s).unwrap(), 0.3);
    let peak = (0..=10_000)
        .map(|i| lr_at(i as f64 / 10_000.0, 0.3, &s).unwrap())
        .fold(0.0, f64::max);
    assert_eq!(peak, 0.3);
}
