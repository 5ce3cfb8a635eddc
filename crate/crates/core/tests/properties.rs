use proptest::collection::vec;
use proptest::prelude::*;

use tsr::export::{bin_index, histogram_row, CorrelationHistogram, HISTOGRAM_BINS};
use tsr::layers::softmax_stable;
use tsr::regularizers::pearson_filter_correlation;
use tsr::sparsity::{perplexity, rfav_entropy};
use tsr::Tensor;

fn rfav() -> impl Strategy<Value = Vec<f64>> {
    vec(-20.0..20.0f64, 2..=64)
}

/// `d` filters of length `m`, generic enough that none centre to zero.
fn filters() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (3usize..=10, 2usize..=20).prop_flat_map(|(d, m)| (Just(d), Just(m), vec(-1.0..1.0f64, d * m)))
}

proptest! {
    #[test]
    fn entropy_lies_between_zero_and_ln_d(v in rfav()) {
        let h = rfav_entropy(&v).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (v.len() as f64).ln() + 1e-12);
        let p = perplexity(h).unwrap();
        prop_assert!(p >= 1.0 && p <= v.len() as f64 * (1.0 + 1e-12));
    }

    #[test]
    fn entropy_ignores_a_common_shift(v in rfav(), shift in -100.0..100.0f64) {
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let diff = (rfav_entropy(&shifted).unwrap() - rfav_entropy(&v).unwrap()).abs();
        prop_assert!(diff <= 1e-10, "{diff:e}");
    }

    #[test]
    fn entropy_ignores_channel_order(v in rfav(), rot in 0usize..64) {
        let mut w = v.clone();
        w.rotate_left(rot % v.len());
        w.reverse();
        let diff = (rfav_entropy(&w).unwrap() - rfav_entropy(&v).unwrap()).abs();
        prop_assert!(diff <= 1e-12, "{diff:e}");
    }

    #[test]
    fn softmax_is_a_distribution(v in vec(-700.0..700.0f64, 1..=32)) {
        let p = softmax_stable(&v).unwrap();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let i = v.iter().position(|&x| x == top).unwrap();
        prop_assert!(p.iter().all(|&x| x <= p[i]));
    }

    #[test]
    fn correlation_is_symmetric_with_unit_diagonal((d, m, w) in filters()) {
        let corr = pearson_filter_correlation(&Tensor::new([d, m], w).unwrap()).unwrap();
        for a in 0..d {
            prop_assert!((corr.get(a, a) - 1.0).abs() < 1e-12);
            for b in 0..d {
                prop_assert_eq!(corr.get(a, b), corr.get(b, a));
                prop_assert!(corr.get(a, b).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn correlation_ignores_filter_scale((d, m, w) in filters(), k in 0.1..10.0f64) {
        let base = pearson_filter_correlation(&Tensor::new([d, m], w.clone()).unwrap()).unwrap();
        let scaled: Vec<f64> = w.iter().map(|x| k * x).collect();
        let other = pearson_filter_correlation(&Tensor::new([d, m], scaled).unwrap()).unwrap();
        for (x, y) in base.lower_triangle().zip(other.lower_triangle()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_counts_every_pair_once((d, m, w) in filters()) {
        let corr = pearson_filter_correlation(&Tensor::new([d, m], w).unwrap()).unwrap();
        let mut hist = CorrelationHistogram::new("conv1");
        hist.update(0, &corr).unwrap();
        let counts = hist.counts_for(0).unwrap();
        prop_assert_eq!(counts.len(), HISTOGRAM_BINS);
        prop_assert_eq!(counts.iter().sum::<u64>(), (d * (d - 1) / 2) as u64);
    }

    #[test]
    fn bins_track_rounded_value(c in -1.0..=1.0f64) {
        let i = bin_index(c).unwrap();
        prop_assert!((CorrelationHistogram::bin_value(i) - c).abs() <= 0.005 + 1e-12);
    }
}

#[test]
fn asymmetric_matrix_is_rejected() {
    assert!(histogram_row(2, &[1.0, 0.5, 0.4, 1.0]).is_err());
    assert!(histogram_row(2, &[1.0, 0.5, 0.5]).is_err());
    assert!(bin_index(1.01).is_err());
}
