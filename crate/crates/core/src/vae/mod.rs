//! Encoder/decoder MLPs, the diagonal-Gaussian latent, and the training
//! objectives.
//!
//! Losses are negative ELBOs: reconstruction negative log-likelihood plus
//! the KL of the posterior to the unit-Gaussian prior, each summed over its
//! dimensions per sample and averaged over the batch.

mod model;
mod objective;

use serde::{Deserialize, Serialize};

use crate::decoders::{decoder_sample, DecoderKind, DecoderOutput, SampleMode};
use crate::error::Result;
use crate::numerics::{sample_normal, Rng, Tape, Tensor, Var};

pub use model::{
    Bound, HeadVars, ModelConfig, RunningVariance, VaeModel, POSTERIOR_CLIP, RUNNING_DECAY,
};
pub use objective::{elbo_loss, elbo_terms, Batch, ElboTerms, LossBreakdown, ObjectiveMode};

/// `z = μ + e^{λ} ε` with `ε ~ N(0, I)` drawn from `rng`, one sample per row.
pub fn reparameterize<'t>(mu: Var<'t>, log_sigma: Var<'t>, rng: &mut Rng) -> Var<'t> {
    assert_eq!(mu.shape(), log_sigma.shape(), "reparameterize: shapes");
    let eps = mu.tape().constant(sample_normal(rng, &mu.shape()));
    mu + log_sigma.exp() * eps
}

/// Per-sample `KL(N(μ, e^{2λ}) ‖ N(0, I))`, summed over latent dimensions.
pub fn kl_diag_gaussian<'t>(mu: Var<'t>, log_sigma: Var<'t>) -> Var<'t> {
    assert_eq!(mu.shape(), log_sigma.shape(), "kl_diag_gaussian: shapes");
    let terms = mu.square() + log_sigma.scale(2.0).exp() - log_sigma.scale(2.0) - 1.0;
    let nd = terms.shape().len();
    let axes: Vec<usize> = (1..nd).collect();
    terms.sum_axes(&axes, false).scale(0.5)
}

/// How a fixed decoder σ maps to a β-VAE weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaConvention {
    /// `β = 2σ²`.
    Text,
    /// `β = σ²`, from the D/2-scaled objective algebra.
    Eq7,
}

pub fn effective_beta(sigma: f64, convention: BetaConvention) -> f64 {
    assert!(sigma > 0.0, "effective_beta: sigma must be positive");
    match convention {
        BetaConvention::Text => 2.0 * sigma * sigma,
        BetaConvention::Eq7 => sigma * sigma,
    }
}

/// Decoder outputs for sampling and evaluation. Gaussian variants use their
/// test-time σ: 1 for the unit decoder, the soft-clipped shared parameter,
/// the running optimal variance, or the per-pixel head.
pub fn decoder_output(model: &VaeModel, head: &HeadVars<'_>) -> DecoderOutput {
    let val = |v: &Var<'_>| v.value().as_ref().clone();
    match head {
        HeadVars::Mean(mean) => {
            let log_sigma = match &model.config.decoder.kind {
                DecoderKind::SharedSigma => Tensor::scalar(model.shared_log_sigma().unwrap_or(0.0)),
                DecoderKind::OptimalSigma { .. } => model
                    .running_log_sigma()
                    .unwrap_or_else(|| Tensor::scalar(0.0)),
                _ => Tensor::scalar(0.0),
            };
            DecoderOutput::Gaussian {
                mean: val(mean),
                log_sigma,
            }
        }
        HeadVars::MeanLogSigma(mean, ls) => match model.config.decoder.kind {
            DecoderKind::DiscretizedGaussian => DecoderOutput::DiscretizedGaussian {
                mean: val(mean),
                log_sigma: val(ls),
            },
            _ => DecoderOutput::Gaussian {
                mean: val(mean),
                log_sigma: val(ls),
            },
        },
        HeadVars::Probs(p) => DecoderOutput::Bernoulli { probs: val(p) },
        HeadVars::Categorical(l) => DecoderOutput::Categorical { logits: val(l) },
        HeadVars::Bits(l) => DecoderOutput::Bitwise { logits: val(l) },
        HeadVars::Mixture(m, s, l) => DecoderOutput::LogisticMixture {
            means: val(m),
            log_scales: val(s),
            logits: val(l),
        },
    }
}

fn to_images(model: &VaeModel, flat: Tensor, n: usize) -> Tensor {
    let [c, h, w] = model.config.chw;
    flat.reshape(&[n, c, h, w]).expect("decoded image size")
}

/// `n` images decoded from prior draws `z ~ N(0, I)`.
pub fn generate(model: &VaeModel, n: usize, rng: &mut Rng, mode: SampleMode) -> Result<Tensor> {
    let [c, h, w] = model.config.chw;
    if n == 0 {
        return Ok(Tensor::zeros(&[0, c, h, w]));
    }
    let tape = Tape::new();
    let p = model.bind_frozen(&tape);
    let z = tape.constant(sample_normal(rng, &[n, model.latent_dim()]));
    let head = p.decode(z);
    let out = decoder_output(model, &head);
    let img = decoder_sample(&model.config.decoder, &out, rng, mode)?;
    Ok(to_images(model, img, n))
}

/// Encode, draw one latent per image, decode, then sample or take means.
pub fn reconstruct(model: &VaeModel, x: &Tensor, rng: &mut Rng, mode: SampleMode) -> Result<Tensor> {
    let n = x.shape()[0];
    let tape = Tape::new();
    let p = model.bind_frozen(&tape);
    let (mu, ls) = p.encode(tape.constant(x.clone()));
    let z = reparameterize(mu, ls, rng);
    let head = p.decode(z);
    let out = decoder_output(model, &head);
    let img = decoder_sample(&model.config.decoder, &out, rng, mode)?;
    Ok(to_images(model, img, n))
}
