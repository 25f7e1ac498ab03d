use proptest::prelude::*;

use refscore::dataio::{generate_synthetic, random_split, Dims, SynthSpec};
use refscore::metrics::{kendall, pearson, rmse, spearman};
use refscore::numkit::softplus;
use refscore::retrieval::{retrieve, retrieve_capped, ReferencePool};
use refscore::training::{loss_plcc, loss_rank, loss_total, lr_schedule};

fn vec_pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(-50.0..50.0f64, n),
        )
    })
}

fn tied_pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max).prop_flat_map(|n| {
        (
            prop::collection::vec((0..4i32).prop_map(f64::from), n),
            prop::collection::vec((0..4i32).prop_map(f64::from), n),
        )
    })
}

proptest! {
    #[test]
    fn plcc_loss_stays_in_unit_interval((pred, mos) in vec_pair(16)) {
        let l = loss_plcc(&pred, &mos).unwrap();
        prop_assert!((-1e-6..=1.0 + 1e-6).contains(&l), "{l}");
    }

    #[test]
    fn plcc_loss_ignores_positive_affine_maps((pred, mos) in vec_pair(16), a in 0.01..20.0f64, b in -30.0..30.0f64) {
        let moved: Vec<f64> = pred.iter().map(|p| a * p + b).collect();
        let d = loss_plcc(&pred, &mos).unwrap() - loss_plcc(&moved, &mos).unwrap();
        prop_assert!(d.abs() < 1e-9, "{d}");
    }

    #[test]
    fn rank_loss_vanishes_when_gaps_are_at_least_mos_gaps((_, mos) in vec_pair(12), a in 1.0..5.0f64) {
        let pred: Vec<f64> = mos.iter().map(|y| a * y).collect();
        prop_assert!(loss_rank(&pred, &mos).unwrap() < 1e-12);
        // shrinking the gaps below the margin leaves a positive hinge
        let flat: Vec<f64> = mos.iter().map(|y| 0.5 * y).collect();
        let distinct = mos.iter().any(|y| *y != mos[0]);
        prop_assert_eq!(loss_rank(&flat, &mos).unwrap() > 0.0, distinct);
        prop_assert_eq!(loss_total(&mos, &mos, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn rank_loss_is_nonnegative((pred, mos) in vec_pair(12)) {
        prop_assert!(loss_rank(&pred, &mos).unwrap() >= 0.0);
    }

    #[test]
    fn correlations_are_symmetric((x, y) in tied_pair(10)) {
        for f in [pearson, spearman, kendall] {
            match (f(&x, &y), f(&y, &x)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn correlations_are_bounded((x, y) in vec_pair(20)) {
        for f in [pearson, spearman, kendall] {
            let r = f(&x, &y).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r), "{r}");
        }
    }

    #[test]
    fn pearson_ignores_positive_affine_maps((x, y) in vec_pair(10), a in 0.1..10.0f64, b in -10.0..10.0f64) {
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let d = pearson(&x, &y).unwrap() - pearson(&moved, &y).unwrap();
        prop_assert!(d.abs() < 1e-9, "{d}");
    }

    #[test]
    fn rank_correlations_ignore_monotone_maps((x, y) in tied_pair(10)) {
        let fx: Vec<f64> = x.iter().map(|v| v.powi(3) + v.exp()).collect();
        for f in [spearman, kendall] {
            match (f(&x, &y), f(&fx, &y)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn rmse_of_constant_offset((x, _) in vec_pair(10), c in -20.0..20.0f64) {
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        prop_assert!((rmse(&shifted, &x).unwrap() - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn softplus_is_positive(x in -1e4..1e4f64) {
        prop_assert!(softplus(x) > 0.0);
    }

    #[test]
    fn schedule_never_exceeds_base_rate(total in 1usize..500, frac in 0.0..0.5f64, step in 0usize..600) {
        let lr = lr_schedule(step.min(total), total, 1e-3, frac);
        prop_assert!((0.0..=1e-3 + 1e-15).contains(&lr), "{lr}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn retrieval_thresholds_nest(seed in 0u64..1000, lo in 0.0..0.9f64, gap in 0.0..0.09f64, cap in 1usize..6) {
        let ds = generate_synthetic(&SynthSpec {
            n_samples: 40,
            n_clusters: 4,
            dims: Dims { prompt: 32, visual: 4, align: 4 },
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        let ds = random_split(&ds, 0.75, seed).unwrap();
        let pool = ReferencePool::from_dataset(&ds);
        let hi = lo + gap;
        for s in ds.samples() {
            let wide = retrieve(s, &pool, lo).unwrap();
            let narrow = retrieve(s, &pool, hi).unwrap();
            prop_assert!(narrow.refs.iter().all(|r| wide.refs.iter().any(|w| w.id == r.id)));
            prop_assert!(wide.refs.iter().all(|r| r.weight > lo && r.id != s.id && pool.contains(&r.id)));
            let capped = retrieve_capped(s, &pool, lo, Some(cap)).unwrap();
            prop_assert!(capped.len() <= cap);
            prop_assert_eq!(&capped.refs[..], &wide.refs[..capped.len()]);
        }
    }
}
