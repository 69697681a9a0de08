//! Continuous densities integrated over the 256 intensity bins.
//!
//! Bin `k` covers `[(k − ½)/255, (k + ½)/255]`, except that bin 0 starts at
//! `-inf` and bin 255 ends at `+inf`. Masses are computed in log space from
//! log-CDF / log-survival values so that neither tail cancels
//! catastrophically:
//!
//! `ln(F(a) − F(b)) = ln F(a) + ln(1 − exp(ln F(b) − ln F(a)))`,
//!
//! reflected through the survival function when the bin sits in the upper
//! half of the distribution.

use std::rc::Rc;

use super::per_sample_sum;
use crate::error::{Error, Result};
use crate::numerics::{softplus, Tensor, Var};

/// Logistic log-scales are clamped from below at this value.
pub const LOG_SCALE_FLOOR: f64 = -7.0;

const HALF_BIN: f64 = 1.0 / 510.0;

fn bin_edges(k: u8) -> (f64, f64) {
    let c = k as f64 / 255.0;
    let lo = if k == 0 { f64::NEG_INFINITY } else { c - HALF_BIN };
    let hi = if k == 255 { f64::INFINITY } else { c + HALF_BIN };
    (lo, hi)
}

trait Standard {
    fn log_cdf(u: f64) -> f64;
    fn log_sf(u: f64) -> f64;
    fn log_pdf(u: f64) -> f64;
}

struct Logistic;

impl Standard for Logistic {
    fn log_cdf(u: f64) -> f64 {
        -softplus(-u)
    }
    fn log_sf(u: f64) -> f64 {
        -softplus(u)
    }
    fn log_pdf(u: f64) -> f64 {
        -softplus(-u) - softplus(u)
    }
}

struct Normal;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln Φ(u)` for the standard normal CDF, accurate far into the lower tail.
pub fn log_ndtr(u: f64) -> f64 {
    if u > 0.0 {
        (-0.5 * libm::erfc(u / std::f64::consts::SQRT_2)).ln_1p()
    } else if u > -30.0 {
        (0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)).ln()
    } else {
        // Asymptotic expansion of the Mills ratio.
        let z2 = 1.0 / (u * u);
        let series = 1.0 - z2 * (1.0 - 3.0 * z2 * (1.0 - 5.0 * z2 * (1.0 - 7.0 * z2 * (1.0 - 9.0 * z2))));
        -0.5 * u * u - (-u).ln() - LN_SQRT_2PI + series.ln()
    }
}

impl Standard for Normal {
    fn log_cdf(u: f64) -> f64 {
        log_ndtr(u)
    }
    fn log_sf(u: f64) -> f64 {
        log_ndtr(-u)
    }
    fn log_pdf(u: f64) -> f64 {
        -0.5 * u * u - LN_SQRT_2PI
    }
}

/// `ln(1 − eˣ)` for `x < 0`.
fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

struct BinLogMass {
    value: f64,
    d_mean: f64,
    d_log_scale: f64,
}

/// Log-mass of bin `k` under location `mean`, scale `e^{log_scale}`, with
/// derivatives.
fn bin_log_mass<D: Standard>(k: u8, mean: f64, log_scale: f64) -> BinLogMass {
    let (lo, hi) = bin_edges(k);
    let inv_s = (-log_scale).exp();
    let a = (hi - mean) * inv_s;
    let b = (lo - mean) * inv_s;
    let value = if k == 0 {
        D::log_cdf(a)
    } else if k == 255 {
        D::log_sf(b)
    } else if a + b > 0.0 {
        let (sb, sa) = (D::log_sf(b), D::log_sf(a));
        sb + log1mexp(sa - sb)
    } else {
        let (fa, fb) = (D::log_cdf(a), D::log_cdf(b));
        fa + log1mexp(fb - fa)
    };
    // d value / da and d value / db; infinite edges contribute nothing.
    let ga = if k == 255 { 0.0 } else { (D::log_pdf(a) - value).exp() };
    let gb = if k == 0 { 0.0 } else { -(D::log_pdf(b) - value).exp() };
    // a = (hi − μ)/s: da/dμ = −1/s, da/d ln s = −a (same for b).
    let da_term = if k == 255 { 0.0 } else { ga * a };
    let db_term = if k == 0 { 0.0 } else { gb * b };
    BinLogMass {
        value,
        d_mean: -(ga + gb) * inv_s,
        d_log_scale: -(da_term + db_term),
    }
}

/// Records per-element bin log-masses on the tape. Element `i` of `mean`
/// uses byte `bytes[i / repeat]`.
fn log_mass_var<'t, D: Standard>(
    mean: Var<'t>,
    log_scale: Var<'t>,
    bytes: &[u8],
    repeat: usize,
) -> Var<'t> {
    let m = mean.value();
    let s = log_scale.value();
    let n = m.len();
    let mut value = Vec::with_capacity(n);
    let mut dm = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);
    for i in 0..n {
        let r = bin_log_mass::<D>(bytes[i / repeat], m.data()[i], s.data()[i]);
        value.push(r.value);
        dm.push(r.d_mean);
        ds.push(r.d_log_scale);
    }
    let shape = m.shape();
    mean.tape().fused(
        &[mean, log_scale],
        Tensor::from_vec(shape, value),
        vec![Tensor::from_vec(shape, dm), Tensor::from_vec(shape, ds)],
    )
}

/// Per-sample NLL of a non-autoregressive mixture of discretized logistics.
///
/// `means`, `log_scales` and `mixture_logits` have shape `[batch, ..., K]`;
/// `bytes` holds one intensity per leading element (`numel / K` values).
/// Log-scales below [`LOG_SCALE_FLOOR`] are clamped.
pub fn discretized_logistic_mixture_nll<'t>(
    means: Var<'t>,
    log_scales: Var<'t>,
    mixture_logits: Var<'t>,
    bytes: &[u8],
) -> Result<Var<'t>> {
    let shape = means.shape();
    if log_scales.shape() != shape || mixture_logits.shape() != shape {
        return Err(Error::shape(
            "discretized_logistic_mixture_nll",
            format!(
                "means {:?}, log_scales {:?}, logits {:?}",
                shape,
                log_scales.shape(),
                mixture_logits.shape()
            ),
        ));
    }
    if shape.len() < 2 {
        return Err(Error::shape(
            "discretized_logistic_mixture_nll",
            "need [batch, ..., components]",
        ));
    }
    let k = shape[shape.len() - 1];
    let sub_pixels = means.value().len() / k.max(1);
    if k == 0 || bytes.len() != sub_pixels {
        return Err(Error::shape(
            "discretized_logistic_mixture_nll",
            format!("{} bytes for {} sub-pixels", bytes.len(), sub_pixels),
        ));
    }
    let scales = log_scales.clamp(LOG_SCALE_FLOOR, f64::INFINITY);
    let log_mass = log_mass_var::<Logistic>(means, scales, bytes, k);
    let mut keep = shape.clone();
    *keep.last_mut().unwrap() = 1;
    let log_norm = mixture_logits.logsumexp_last().reshape(&keep);
    let log_weights = mixture_logits - log_norm;
    let log_p = (log_mass + log_weights).logsumexp_last();
    Ok(per_sample_sum(log_p).neg())
}

/// Per-sample NLL of a Gaussian integrated over intensity bins. `log_sigma`
/// broadcasts onto `mean`; `bytes` holds one intensity per element.
pub fn discretized_gaussian_nll<'t>(
    mean: Var<'t>,
    log_sigma: Var<'t>,
    bytes: &[u8],
) -> Result<Var<'t>> {
    let shape = mean.shape();
    match log_sigma.broadcast_shape_with(&mean) {
        Some(s) if s == shape => {}
        _ => {
            return Err(Error::shape(
                "discretized_gaussian_nll",
                format!("log_sigma {:?} onto mean {:?}", log_sigma.shape(), shape),
            ))
        }
    }
    if shape.is_empty() || bytes.len() != mean.value().len() {
        return Err(Error::shape(
            "discretized_gaussian_nll",
            format!("{} bytes for mean {:?}", bytes.len(), shape),
        ));
    }
    let lam = log_sigma.broadcast_to(&shape);
    let log_mass = log_mass_var::<Normal>(mean, lam, bytes, 1);
    Ok(per_sample_sum(log_mass).neg())
}

/// The full 256-bin distribution of one discretized Gaussian.
pub fn discretized_gaussian_pmf(mean: f64, log_sigma: f64) -> [f64; 256] {
    let mut p = [0.0; 256];
    for (k, slot) in p.iter_mut().enumerate() {
        *slot = bin_log_mass::<Normal>(k as u8, mean, log_sigma).value.exp();
    }
    p
}

/// The full 256-bin distribution of one logistic mixture (one sub-pixel's
/// `K` components).
pub fn logistic_mixture_pmf(means: &[f64], log_scales: &[f64], logits: &[f64]) -> [f64; 256] {
    let lse = crate::numerics::tensor::logsumexp_slice(logits);
    let mut p = [0.0; 256];
    for (k, slot) in p.iter_mut().enumerate() {
        let terms: Vec<f64> = means
            .iter()
            .zip(log_scales)
            .zip(logits)
            .map(|((&m, &s), &l)| {
                l - lse + bin_log_mass::<Logistic>(k as u8, m, s.max(LOG_SCALE_FLOOR)).value
            })
            .collect();
        *slot = crate::numerics::tensor::logsumexp_slice(&terms).exp();
    }
    p
}

/// Byte indices as `usize` for tape gathers.
pub(crate) fn byte_indices(bytes: &[u8]) -> Rc<Vec<usize>> {
    Rc::new(bytes.iter().map(|&b| b as usize).collect())
}
