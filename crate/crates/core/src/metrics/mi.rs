use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoders::HALF_LN_2PI;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor};
use crate::vae::{kl_diag_gaussian, VaeModel};

use super::image_noise;

pub const DEFAULT_MI_SAMPLES: usize = 512;

/// Split of the rate into encoder mutual information and the KL of the
/// aggregate posterior to the prior, in nats per image.
///
/// `rate` is the closed-form KL averaged over the sample, and
/// `marginal_kl = rate - mi`, so the identity holds by construction. The
/// fully Monte-Carlo version, `mean[log m̂(z) - log p(z)]`, is kept in
/// `marginal_kl_mc` alongside `rate_mc`; it has the same expectation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub mi: f64,
    pub marginal_kl: f64,
    pub rate: f64,
    pub rate_mc: f64,
    pub marginal_kl_mc: f64,
    /// Standard error of `mi` across the sample.
    pub mi_stderr: f64,
    pub n: usize,
    /// Upper bound on the upward bias of `mi` at this sample size, `ln n`.
    pub mi_bias_bound: f64,
}

/// `inv` holds `e^{-λ}` alongside `ls` = λ.
fn log_normal_diag(z: &[f64], mu: &[f64], ls: &[f64], inv: &[f64]) -> f64 {
    let mut s = 0.0;
    for (((&z, &m), &l), &r) in z.iter().zip(mu).zip(ls).zip(inv) {
        let u = (z - m) * r;
        s -= HALF_LN_2PI + l + 0.5 * u * u;
    }
    s
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Estimates from posterior parameters and one latent draw per datum, all
/// `[N, L]`. The aggregate posterior is the mixture of the same `N`
/// posteriors, so `mi` overestimates by at most `ln N`.
pub fn mi_marginal_kl_from_posterior(mu: &Tensor, log_sigma: &Tensor, z: &Tensor) -> Result<MiEstimate> {
    if mu.ndim() != 2 || mu.shape() != log_sigma.shape() || mu.shape() != z.shape() {
        return Err(Error::shape(
            "mi_marginal_kl",
            format!("mu {:?}, log_sigma {:?}, z {:?}", mu.shape(), log_sigma.shape(), z.shape()),
        ));
    }
    let (n, l) = (mu.shape()[0], mu.shape()[1]);
    if n < 2 {
        return Err(Error::contract(format!("mi_marginal_kl needs at least 2 samples, got {n}")));
    }
    let row = |t: &Tensor, i: usize| -> Vec<f64> { t.data()[i * l..(i + 1) * l].to_vec() };
    let zero = vec![0.0; l];
    let one = vec![1.0; l];
    let inv = log_sigma.map(|v| (-v).exp());
    let ln_n = (n as f64).ln();
    let tape = Tape::new();
    let kl = kl_diag_gaussian(tape.constant(mu.clone()), tape.constant(log_sigma.clone()));
    let kl = kl.value();

    let (mut mi_terms, mut rate_mc, mut mkl_mc) = (Vec::with_capacity(n), 0.0, 0.0);
    let mut cross = vec![0.0; n];
    for i in 0..n {
        let zi = row(z, i);
        for (j, c) in cross.iter_mut().enumerate() {
            let at = j * l..(j + 1) * l;
            *c = log_normal_diag(&zi, &mu.data()[at.clone()], &log_sigma.data()[at.clone()], &inv.data()[at]);
        }
        let log_q = cross[i];
        let log_m = log_sum_exp(&cross) - ln_n;
        let log_p = log_normal_diag(&zi, &zero, &zero, &one);
        mi_terms.push(log_q - log_m);
        rate_mc += log_q - log_p;
        mkl_mc += log_m - log_p;
    }
    let nf = n as f64;
    let mi = mi_terms.iter().sum::<f64>() / nf;
    let var = mi_terms.iter().map(|t| (t - mi) * (t - mi)).sum::<f64>() / (nf - 1.0);
    let rate = kl.data().iter().sum::<f64>() / nf;
    let est = MiEstimate {
        mi,
        marginal_kl: rate - mi,
        rate,
        rate_mc: rate_mc / nf,
        marginal_kl_mc: mkl_mc / nf,
        mi_stderr: (var / nf).sqrt(),
        n,
        mi_bias_bound: ln_n,
    };
    if ![est.mi, est.rate, est.rate_mc, est.marginal_kl_mc].iter().all(|v| v.is_finite()) {
        return Err(Error::NumericInstability {
            term: "mutual information estimate".into(),
        });
    }
    Ok(est)
}

/// Encodes `min(n, len)` images chosen by `rng`, draws one latent each and
/// estimates the decomposition over that sample.
pub fn mi_marginal_kl(model: &VaeModel, data: &Dataset, n: usize, rng: &mut Rng) -> Result<MiEstimate> {
    let n = n.min(data.len());
    if n < 2 {
        return Err(Error::contract(format!("mi_marginal_kl needs at least 2 samples, got {n}")));
    }
    let mut idx = rng.permutation(data.len());
    idx.truncate(n);
    idx.sort_unstable();
    let key = rng.next_u64();
    let l = model.latent_dim();
    let tape = Tape::new();
    let p = model.bind_frozen(&tape);
    let (mu, ls) = p.encode(tape.constant(data.batch(&idx)));
    tape.check()?;
    let (mu, ls) = (mu.value().as_ref().clone(), ls.value().as_ref().clone());
    let mut z = Vec::with_capacity(n * l);
    for (r, &i) in idx.iter().enumerate() {
        let eps = image_noise(key, data.image(i), l);
        for k in 0..l {
            let at = r * l + k;
            z.push(mu.data()[at] + ls.data()[at].exp() * eps[k]);
        }
    }
    mi_marginal_kl_from_posterior(&mu, &ls, &Tensor::from_vec(&[n, l], z))
}
