use proptest::prelude::*;
use sigvae::data::quantize;
use sigvae::decoders::{discretized_gaussian_pmf, logistic_mixture_pmf, soft_clip_value};
use sigvae::ClipBounds;


proptest! {
    #[test]
    fn bytes_survive_the_float_view(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let x: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        prop_assert_eq!(quantize(&x), bytes);
    }

    // The upper bound is soft: the two softplus stages overshoot λmax by
    // softplus(w) − w for a range of width w, which matters when w is small.
    #[test]
    fn soft_clip_is_bounded_and_monotone(
        lam in -1e3f64..1e3, step in 1e-3f64..5.0, lo in -8.0f64..-1.0, width in 0.5f64..6.0
    ) {
        let b = ClipBounds::new(lo, lo + width).unwrap();
        let v = soft_clip_value(lam, b);
        let cap = lo + width + (1.0 + (-width).exp()).ln();
        prop_assert!(v >= b.lambda_min && v <= cap + 1e-12, "{v}");
        prop_assert!(soft_clip_value(lam + step, b) >= v);
    }

    #[test]
    fn discretized_gaussian_mass_is_normalized(mean in -0.5f64..1.5, ls in -9.0f64..2.0) {
        let total: f64 = discretized_gaussian_pmf(mean, ls).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn logistic_mixture_mass_is_normalized(
        params in proptest::collection::vec((-0.5f64..1.5, -8.0f64..1.0, -3.0f64..3.0), 1..6)
    ) {
        let means: Vec<f64> = params.iter().map(|p| p.0).collect();
        let scales: Vec<f64> = params.iter().map(|p| p.1).collect();
        let logits: Vec<f64> = params.iter().map(|p| p.2).collect();
        let total: f64 = logistic_mixture_pmf(&means, &scales, &logits).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "{total}");
    }
}
