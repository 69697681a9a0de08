//! Test-set evaluation, the rate decomposition, Monte-Carlo error of the
//! variance estimate and sweep drivers.

mod mi;
mod stderr;
mod sweep;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoders::{
    bernoulli_nll, bitwise_categorical_nll, categorical_nll, discretized_gaussian_nll,
    discretized_logistic_mixture_nll, gaussian_nll, DecoderOutput,
};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor};
use crate::vae::{decoder_output, kl_diag_gaussian, VaeModel};

pub use mi::{mi_marginal_kl, mi_marginal_kl_from_posterior, MiEstimate, DEFAULT_MI_SAMPLES};
pub use stderr::{sigma_mc_stderr, SigmaStderr};
pub use sweep::{beta_sweep, evaluate_model, row_seed, sharing_sweep, EvalSettings, MetricsRecord, SweepRow};

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Dataset means of the single-sample negative ELBO and its parts, in nats
/// per image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub neg_elbo: f64,
    pub distortion: f64,
    pub rate: f64,
    /// Same means and σ, with the continuous density replaced by bin mass.
    /// Only for Gaussian decoders.
    pub neg_elbo_discretized: Option<f64>,
    pub distortion_discretized: Option<f64>,
    pub images: usize,
}

/// Per-image NLL of `x` under plain decoder outputs.
pub fn decoder_nll(out: &DecoderOutput, x: &Tensor, bytes: &[u8]) -> Result<Tensor> {
    let t = Tape::new();
    let c = |v: &Tensor| t.constant(v.clone());
    let nll = match out {
        DecoderOutput::Gaussian { mean, log_sigma } => gaussian_nll(c(x), c(mean), c(log_sigma))?,
        DecoderOutput::Bernoulli { probs } => bernoulli_nll(c(probs), c(x))?,
        DecoderOutput::Categorical { logits } => categorical_nll(c(logits), bytes)?,
        DecoderOutput::Bitwise { logits } => bitwise_categorical_nll(c(logits), bytes)?,
        DecoderOutput::DiscretizedGaussian { mean, log_sigma } => {
            discretized_gaussian_nll(c(mean), c(log_sigma), bytes)?
        }
        DecoderOutput::LogisticMixture {
            means,
            log_scales,
            logits,
        } => discretized_logistic_mixture_nll(c(means), c(log_scales), c(logits), bytes)?,
    };
    t.check()?;
    Ok(nll.value().as_ref().clone())
}

/// 64-bit FNV-1a, used to key evaluation noise by image content.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Posterior noise for one image: a function of `key` and the image bytes
/// alone, so results do not depend on dataset order.
pub(crate) fn image_noise(key: u64, image: &[u8], latent: usize) -> Vec<f64> {
    let mut eps = vec![0.0; latent];
    Rng::with_stream(key, fnv1a(image)).fill_normal(&mut eps);
    eps
}

/// Order-independent mean: values are summed in sorted order.
pub(crate) fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Single-sample test ELBO with one posterior draw per image.
///
/// Gaussian decoders use their test-time σ (the running estimate for
/// optimal-σ models). The result does not depend on dataset order: noise is
/// keyed by image content and a word drawn from `rng`, and sums are taken
/// in sorted order.
pub fn eval_elbo(model: &VaeModel, data: &Dataset, rng: &mut Rng) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::contract("eval_elbo: empty dataset"));
    }
    if data.chw() != model.config.chw {
        return Err(Error::shape(
            "eval_elbo",
            format!("data {:?} vs model {:?}", data.chw(), model.config.chw),
        ));
    }
    if model.params().iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::NumericInstability {
            term: "model parameters".into(),
        });
    }
    let key = rng.next_u64();
    let spec = &model.config.decoder;
    let discretize = spec.is_continuous_gaussian();
    let l = model.latent_dim();
    let (mut dist, mut rate, mut ddist) = (Vec::new(), Vec::new(), Vec::new());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let x = data.batch(idx);
        let bytes = data.batch_bytes(idx);
        let mut eps = Vec::with_capacity(idx.len() * l);
        for &i in idx {
            eps.extend(image_noise(key, data.image(i), l));
        }
        let tape = Tape::new();
        let p = model.bind_frozen(&tape);
        let (mu, ls) = p.encode(tape.constant(x.clone()));
        let z = mu + ls.exp() * tape.constant(Tensor::from_vec(&[idx.len(), l], eps));
        let kl = kl_diag_gaussian(mu, ls);
        let out = decoder_output(model, &p.decode(z));
        tape.check()?;
        rate.extend_from_slice(kl.value().data());
        dist.extend_from_slice(decoder_nll(&out, &x, &bytes)?.data());
        if discretize {
            if let DecoderOutput::Gaussian { mean, log_sigma } = out {
                let disc = DecoderOutput::DiscretizedGaussian { mean, log_sigma };
                ddist.extend_from_slice(decoder_nll(&disc, &x, &bytes)?.data());
            }
        }
    }
    let mut total: Vec<f64> = dist.iter().zip(&rate).map(|(d, r)| d + r).collect();
    let mut dtotal: Vec<f64> = ddist.iter().zip(&rate).map(|(d, r)| d + r).collect();
    let res = EvalResult {
        neg_elbo: stable_mean(&mut total),
        distortion: stable_mean(&mut dist),
        rate: stable_mean(&mut rate),
        neg_elbo_discretized: discretize.then(|| stable_mean(&mut dtotal)),
        distortion_discretized: discretize.then(|| stable_mean(&mut ddist)),
        images: data.len(),
    };
    let finite = [res.neg_elbo, res.distortion, res.rate]
        .into_iter()
        .chain(res.neg_elbo_discretized)
        .all(f64::is_finite);
    if !finite {
        return Err(Error::NumericInstability {
            term: "test ELBO".into(),
        });
    }
    Ok(res)
}
