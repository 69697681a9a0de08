use super::{per_sample_sum, ClipBounds, SharingScheme};
use crate::error::{Error, Result};
use crate::numerics::{softplus, Tensor, Var};

/// `ln √(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-sample Gaussian negative log-likelihood
/// `Σ_i [λ_i + (x_i − μ_i)² / (2 e^{2λ_i}) + ln √(2π)]`.
///
/// `log_sigma` may be a scalar or any shape that broadcasts onto `x`
/// (per image, per channel, per sub-pixel); it is counted once per data
/// dimension.
pub fn gaussian_nll<'t>(x: Var<'t>, mean: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if mean.shape() != shape {
        return Err(Error::shape(
            "gaussian_nll",
            format!("x {:?} vs mean {:?}", shape, mean.shape()),
        ));
    }
    if shape.is_empty() {
        return Err(Error::shape("gaussian_nll", "x needs a batch axis"));
    }
    match log_sigma.broadcast_shape_with(&x) {
        Some(s) if s == shape => {}
        _ => {
            return Err(Error::shape(
                "gaussian_nll",
                format!("log_sigma {:?} does not broadcast onto {:?}", log_sigma.shape(), shape),
            ))
        }
    }
    let lam = log_sigma.broadcast_to(&shape);
    let inv_two_var = lam.scale(-2.0).exp().scale(0.5);
    let quad = (x - mean).square() * inv_two_var;
    Ok(per_sample_sum(lam + quad + HALF_LN_2PI))
}

/// Smoothly bounds λ: first `λmax − softplus(λmax − λ)`, then
/// `λmin + softplus(λ − λmin)`.
pub fn soft_clip<'t>(lambda: Var<'t>, bounds: ClipBounds) -> Var<'t> {
    let hi = bounds.lambda_max;
    let lo = bounds.lambda_min;
    let upper = (lambda.neg() + hi).softplus().neg() + hi;
    (upper - lo).softplus() + lo
}

pub fn soft_clip_value(lambda: f64, bounds: ClipBounds) -> f64 {
    let upper = bounds.lambda_max - softplus(bounds.lambda_max - lambda);
    bounds.lambda_min + softplus(upper - bounds.lambda_min)
}

fn check_image_pair(x: &Tensor, mean: &Tensor) -> Result<()> {
    if x.shape() != mean.shape() {
        return Err(Error::shape(
            "optimal_log_sigma",
            format!("x {:?} vs mean {:?}", x.shape(), mean.shape()),
        ));
    }
    if x.ndim() != 4 {
        return Err(Error::shape(
            "optimal_log_sigma",
            format!("expected [batch, channel, row, column], got {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// Maximum-likelihood variance per sharing group: the mean squared residual
/// over the pooled axes. Pooled axes are kept with extent 1.
pub fn optimal_sigma_sq(x: &Tensor, mean: &Tensor, sharing: &SharingScheme) -> Result<Tensor> {
    check_image_pair(x, mean)?;
    let axes = sharing.axis_indices();
    let group_size: usize = axes.iter().map(|&a| x.shape()[a]).product();
    if group_size == 0 || x.is_empty() {
        return Err(Error::contract("optimal_log_sigma: empty sharing group"));
    }
    let sq = x.zip_map(mean, |a, b| (a - b) * (a - b))?;
    let sum = sq.sum_axes_keepdim(&axes)?;
    Ok(sum.map(|s| s / group_size as f64))
}

/// Analytic optimal log standard deviation `λ = ½ ln MSE` per sharing
/// group, hard-clamped into `[λmin, λmax]`.
///
/// The result is a plain tensor: callers treat it as a constant, so no
/// gradient flows through the estimate.
pub fn optimal_log_sigma(
    x: &Tensor,
    mean: &Tensor,
    sharing: &SharingScheme,
    bounds: ClipBounds,
) -> Result<Tensor> {
    let var = optimal_sigma_sq(x, mean, sharing)?;
    Ok(var.map(|v| {
        if v <= 0.0 {
            bounds.lambda_min
        } else {
            (0.5 * v.ln()).clamp(bounds.lambda_min, bounds.lambda_max)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, sample_uniform, Rng, Tape};

    fn nll_value(x: &[f64], mean: &[f64], log_sigma: Tensor) -> f64 {
        let tape = Tape::new();
        let n = x.len();
        let x = tape.constant(Tensor::from_vec(&[1, n], x.to_vec()));
        let m = tape.constant(Tensor::from_vec(&[1, n], mean.to_vec()));
        let l = tape.constant(log_sigma);
        gaussian_nll(x, m, l).unwrap().item()
    }

    /// Independent normal density at high precision.
    fn normal_neg_log_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
        let pdf = (-(x - mean).powi(2) / (2.0 * sigma * sigma)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        -pdf.ln()
    }

    #[test]
    fn zero_residual_constant() {
        let v = nll_value(&[0.3, 0.7], &[0.3, 0.7], Tensor::scalar(0.0));
        assert!((v - 1.837_877_066_409_345).abs() < 1e-12, "{v}");
    }

    #[test]
    fn single_dimension_matches_density() {
        let v = nll_value(&[0.5], &[0.0], Tensor::scalar(0.5f64.ln()));
        let oracle = normal_neg_log_pdf(0.5, 0.0, 0.5);
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.725_791).abs() < 1e-6, "{v}");
    }

    #[test]
    fn four_dimensions_brute_force() {
        let v = nll_value(&[0.5; 4], &[0.0; 4], Tensor::scalar(0.5f64.ln()));
        let oracle: f64 = (0..4).map(|_| normal_neg_log_pdf(0.5, 0.0, 0.5)).sum();
        assert!((v - oracle).abs() < 1e-12);
        // The quoted 2.903163 is rounded; the exact sum is 2.9031654.
        assert!((v - 2.903_163).abs() < 1e-5, "{v}");
    }

    #[test]
    fn per_sample_output_and_broadcast_sigma() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let m = tape.constant(Tensor::zeros(&[2, 3]));
        let per_image = tape.constant(Tensor::from_vec(&[2, 1], vec![-1.0, -2.0]));
        let out = gaussian_nll(x, m, per_image).unwrap();
        assert_eq!(out.shape(), vec![2]);
        let row0: f64 = [0.1, 0.2, 0.3]
            .iter()
            .map(|&v| normal_neg_log_pdf(v, 0.0, (-1.0f64).exp()))
            .sum();
        assert!((out.value().data()[0] - row0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let m = tape.constant(Tensor::zeros(&[3, 2]));
        let l = tape.scalar(0.0);
        assert!(matches!(gaussian_nll(x, m, l), Err(Error::Shape { .. })));
        let m = tape.constant(Tensor::zeros(&[2, 3]));
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(gaussian_nll(x, m, bad).is_err());
    }

    #[test]
    fn tiling_doubles_the_loss() {
        let mut rng = Rng::new(3);
        let x = sample_uniform(&mut rng, &[3, 5]);
        let m = sample_uniform(&mut rng, &[3, 5]);
        let lam = Tensor::scalar(-1.3);
        let once = {
            let t = Tape::new();
            gaussian_nll(t.constant(x.clone()), t.constant(m.clone()), t.constant(lam.clone()))
                .unwrap()
                .value()
                .data()
                .to_vec()
        };
        let twice = {
            let t = Tape::new();
            let xx = Tensor::concat(&[&x, &x], 1).unwrap();
            let mm = Tensor::concat(&[&m, &m], 1).unwrap();
            gaussian_nll(t.constant(xx), t.constant(mm), t.constant(lam.clone()))
                .unwrap()
                .value()
                .data()
                .to_vec()
        };
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_wrt_mean_and_lambda() {
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let x = sample_uniform(&mut rng, &[2, 4]);
            let m = sample_uniform(&mut rng, &[2, 4]);
            let per_pixel = sample_uniform(&mut rng, &[2, 4]).map(|u| -2.0 + 2.0 * u);
            let shared = Tensor::scalar(-1.0 + rng.uniform());
            let xc = x.clone();
            let err = grad_check(
                move |t, p| gaussian_nll(t.constant(xc.clone()), p[0], p[1]).unwrap().sum_all(),
                &[m.clone(), per_pixel],
                1e-6,
            );
            assert!(err < 1e-5, "{err}");
            let xc = x.clone();
            let err = grad_check(
                move |t, p| gaussian_nll(t.constant(xc.clone()), p[0], p[1]).unwrap().sum_all(),
                &[m, shared],
                1e-6,
            );
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn soft_clip_saturation_and_interior() {
        let b = ClipBounds::default();
        let hi = soft_clip_value(100.0, b);
        assert!((hi - (-6.0 + softplus(6.0))).abs() < 1e-12);
        assert!((hi - 0.002_475).abs() < 1e-5, "{hi}");
        assert!((soft_clip_value(-100.0, b) + 6.0).abs() < 1e-12);
        let mid = soft_clip_value(-3.0, b);
        // Direct softplus arithmetic, written out independently.
        let step1 = 0.0 - (1.0 + (3.0f64).exp()).ln();
        let step2 = -6.0 + (1.0 + (step1 + 6.0).exp()).ln();
        assert!((mid - step2).abs() < 1e-12);
        assert!((mid + 3.0).abs() < 0.05);
        // Tape and scalar versions agree.
        let t = Tape::new();
        let v = soft_clip(t.constant(Tensor::from_vec(&[3], vec![-100.0, -3.0, 100.0])), b);
        for (a, e) in v.value().data().iter().zip([-6.0, mid, hi]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_sigma_examples() {
        let b = ClipBounds::default();
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.4, 0.6]);
        let lam = optimal_log_sigma(&x, &x, &SharingScheme::shared(), b).unwrap();
        assert_eq!(lam.item(), -6.0);

        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]);
        let m = Tensor::zeros(&[1, 1, 1, 2]);
        let lam = optimal_log_sigma(&x, &m, &SharingScheme::shared(), b).unwrap();
        assert!((lam.item() + 0.346_574).abs() < 1e-6);

        // Two images with MSE 0.25 and 1.0.
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![0.5, -0.5, 1.0, 1.0]);
        let m = Tensor::zeros(&[2, 1, 1, 2]);
        let lam = optimal_log_sigma(&x, &m, &SharingScheme::per_image(), b).unwrap();
        assert_eq!(lam.shape(), &[2, 1, 1, 1]);
        assert!((lam.data()[0] + 0.693_147).abs() < 1e-6);
        assert!(lam.data()[1].abs() < 1e-12);
    }

    #[test]
    fn optimal_sigma_errors() {
        let b = ClipBounds::default();
        let x = Tensor::zeros(&[0, 1, 2, 2]);
        assert!(matches!(
            optimal_log_sigma(&x, &x, &SharingScheme::shared(), b),
            Err(Error::Contract(_))
        ));
        let x = Tensor::zeros(&[2, 4]);
        assert!(optimal_log_sigma(&x, &x, &SharingScheme::shared(), b).is_err());
    }
}
