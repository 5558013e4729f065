use std::sync::OnceLock;

use expfbm::functional::{functional_f, pathwise_bracket, ModelParams};
use expfbm::kernel::{build_kernel_table, covariance, Kernel, KernelTable};
use expfbm::paths::outer_path;
use expfbm::stats::{ks_two_sample, MeanAccumulator};
use expfbm::Exec;
use proptest::prelude::*;

fn table() -> &'static KernelTable {
    static T: OnceLock<KernelTable> = OnceLock::new();
    T.get_or_init(|| build_kernel_table(0.7, 1.0, 32).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_is_positive_below_the_diagonal(h in 0.52f64..0.98, t in 0.01f64..3.0, frac in 0.001f64..0.999) {
        let k = Kernel::calibrated(h).unwrap();
        let v = k.eval(t, t * frac).unwrap();
        prop_assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn kernel_rejects_points_outside_the_domain(h in 0.52f64..0.98, t in 0.01f64..3.0) {
        let k = Kernel::calibrated(h).unwrap();
        prop_assert!(k.eval(t, 0.0).is_err());
        prop_assert!(k.eval(t, t * 1.5).is_err());
    }

    #[test]
    fn covariance_is_symmetric_with_power_diagonal(h in 0.5f64..1.0, t in 0.0f64..5.0, s in 0.0f64..5.0) {
        prop_assert!((covariance(h, t, s) - covariance(h, s, t)).abs() <= 1e-12 * (1.0 + t + s));
        prop_assert!((covariance(h, t, t) - t.powf(2.0 * h)).abs() <= 1e-12 * (1.0 + t.powf(2.0 * h)));
    }

    #[test]
    fn functional_lies_in_pathwise_bracket(seed in any::<u64>(), idx in 0u64..1000, a in -2.0f64..2.0, sigma in 0.1f64..3.0) {
        let p = ModelParams::new(a, sigma, 0.7, 1.0).unwrap();
        let path = outer_path(table(), seed, idx);
        let f = functional_f(&path, &p);
        let (lo, hi) = pathwise_bracket(&path, &p);
        prop_assert!(lo * (1.0 - 1e-12) <= f && f <= hi * (1.0 + 1e-12), "{lo} <= {f} <= {hi}");
    }

    #[test]
    fn paths_are_reproducible_and_start_at_zero(seed in any::<u64>(), idx in any::<u64>()) {
        let a = outer_path(table(), seed, idx);
        let b = outer_path(table(), seed, idx);
        prop_assert_eq!(&a.fbm, &b.fbm);
        prop_assert_eq!(a.fbm[0], 0.0);
        prop_assert_eq!(a.fbm.len(), table().n + 1);
    }

    #[test]
    fn exec_map_preserves_index_order(n in 0usize..500) {
        let seq = Exec::Sequential.map(n, |i| i * i);
        prop_assert_eq!(&seq, &Exec::default().map(n, |i| i * i));
        prop_assert!(seq.iter().enumerate().all(|(i, &v)| v == i * i));
    }

    #[test]
    fn ks_statistic_is_symmetric_and_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 1..60),
        b in prop::collection::vec(-10.0f64..10.0, 1..60),
    ) {
        let d = ks_two_sample(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - ks_two_sample(&b, &a)).abs() < 1e-15);
        prop_assert_eq!(ks_two_sample(&a, &a), 0.0);
    }

    #[test]
    fn running_mean_matches_direct_sum(xs in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let acc = MeanAccumulator::from_slice(&xs);
        let direct = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert_eq!(acc.count(), xs.len());
        prop_assert!((acc.mean() - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        prop_assert!(acc.variance() >= 0.0);
    }
}
