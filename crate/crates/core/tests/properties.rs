use proptest::prelude::*;

use aesf::metrics::{cohen_kappa, confusion, qwk};
use aesf::training::{discriminative_lrs, mean_round, sliding_windows};

proptest! {
    #[test]
    fn windows_cover_every_token_in_order(n in 1usize..3000, w in 1usize..600) {
        let spans = sliding_windows(n, w).unwrap();
        prop_assert_eq!(spans[0].0, 0);
        prop_assert_eq!(spans.last().unwrap().1, n);
        prop_assert_eq!(spans.len(), n.div_ceil(w));
        for (a, b) in spans.iter().zip(spans.iter().skip(1)) {
            prop_assert!(b.0 <= a.1 && b.0 > a.0);
        }
        for &(s, e) in &spans {
            prop_assert_eq!(e - s, n.min(w));
        }
    }

    #[test]
    fn mean_round_stays_between_extremes(labels in prop::collection::vec(0usize..6, 1..20)) {
        let r = mean_round(&labels, 6).unwrap();
        prop_assert!(r >= *labels.iter().min().unwrap() && r <= *labels.iter().max().unwrap());
        let mean = labels.iter().sum::<usize>() as f64 / labels.len() as f64;
        prop_assert!((r as f64 - mean).abs() <= 0.5);
    }

    #[test]
    fn discriminative_rates_increase_toward_the_head(levels in 1usize..20, xi in 0.5f64..0.999) {
        let lrs = discriminative_lrs(1e-3, xi, levels).unwrap();
        prop_assert_eq!(lrs.len(), levels);
        prop_assert_eq!(lrs[levels - 1], 1e-3);
        for w in lrs.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn kappas_are_symmetric_and_scale_free(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 2..60),
        factor in 1usize..4,
    ) {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let ab = confusion(&a, &b, 5).unwrap();
        let ba = confusion(&b, &a, 5).unwrap();
        let rep = |v: &[usize]| v.iter().flat_map(|&x| std::iter::repeat_n(x, factor)).collect::<Vec<_>>();
        let scaled = confusion(&rep(&a), &rep(&b), 5).unwrap();
        if let Ok(q) = qwk(&ab) {
            prop_assert!((q - qwk(&ba).unwrap()).abs() < 1e-12);
            prop_assert!((q - qwk(&scaled).unwrap()).abs() < 1e-12);
            prop_assert!(q <= 1.0 + 1e-12);
        }
        if let Ok(c) = cohen_kappa(&ab) {
            prop_assert!((c - cohen_kappa(&ba).unwrap()).abs() < 1e-12);
        }
    }
}
