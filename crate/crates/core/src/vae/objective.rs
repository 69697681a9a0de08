use serde::{Deserialize, Serialize};

use super::model::{Bound, HeadVars, VaeModel};
use super::{kl_diag_gaussian, reparameterize};
use crate::data::Dataset;
use crate::decoders::{
    bernoulli_nll, bitwise_categorical_nll, categorical_nll, discretized_gaussian_nll,
    discretized_logistic_mixture_nll, gaussian_nll, optimal_log_sigma, DecoderKind, DecoderSpec,
    SharingScheme,
};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

/// Training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveMode {
    /// `½ Σ (x − μ)² + β · KL` on a unit-Gaussian decoder.
    BetaVae { beta: f64 },
    /// Gaussian NLL with the learned, soft-clipped shared log σ.
    SigmaVaeShared,
    /// Gaussian NLL with the batchwise optimal σ (no gradient through σ).
    SigmaVaeOptimal { sharing: SharingScheme },
    /// Gaussian NLL with a fixed log σ.
    SigmaVaeFixed { log_sigma: f64 },
    /// The decoder's own NLL plus KL.
    PlainElbo,
}

impl ObjectiveMode {
    /// The decoder this objective trains by default.
    pub fn default_decoder(&self) -> Option<DecoderSpec> {
        match self {
            ObjectiveMode::BetaVae { .. } | ObjectiveMode::SigmaVaeFixed { .. } => Some(DecoderSpec::unit_gaussian()),
            ObjectiveMode::SigmaVaeShared => Some(DecoderSpec::shared_sigma()),
            ObjectiveMode::SigmaVaeOptimal { sharing } => Some(DecoderSpec::optimal_sigma(sharing.clone())),
            ObjectiveMode::PlainElbo => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveMode::BetaVae { .. } => "beta_vae",
            ObjectiveMode::SigmaVaeShared => "sigma_vae_shared",
            ObjectiveMode::SigmaVaeOptimal { .. } => "sigma_vae_optimal",
            ObjectiveMode::SigmaVaeFixed { .. } => "sigma_vae_fixed",
            ObjectiveMode::PlainElbo => "plain_elbo",
        }
    }

    /// Checks the objective against the decoder it is paired with.
    pub fn validate(&self, decoder: &DecoderSpec) -> Result<()> {
        let ok = match (self, &decoder.kind) {
            (ObjectiveMode::BetaVae { beta }, DecoderKind::UnitGaussian) => {
                if !(*beta > 0.0 && beta.is_finite()) {
                    return Err(Error::Config(format!("beta must be positive and finite, got {beta}")));
                }
                true
            }
            (ObjectiveMode::SigmaVaeShared, DecoderKind::SharedSigma) => true,
            (ObjectiveMode::SigmaVaeOptimal { sharing }, DecoderKind::OptimalSigma { sharing: s }) => sharing == s,
            (ObjectiveMode::SigmaVaeFixed { log_sigma }, k) => {
                if !log_sigma.is_finite() {
                    return Err(Error::Config("fixed log sigma must be finite".into()));
                }
                matches!(k, DecoderKind::UnitGaussian | DecoderKind::SharedSigma | DecoderKind::OptimalSigma { .. })
            }
            (ObjectiveMode::PlainElbo, _) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "objective {} does not fit decoder {}",
                self.name(),
                decoder.name()
            )))
        }
    }
}

/// A batch as floats `[B, C, H, W]` plus the bytes it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub bytes: Vec<u8>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Self {
        Batch {
            x: ds.batch(indices),
            bytes: ds.batch_bytes(indices),
        }
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One step's scalar summary. Distortion and rate are batch means of
/// per-sample sums, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub distortion: f64,
    pub rate: f64,
    /// Decoder σ for Gaussian decoders with a single or averaged σ.
    pub sigma: Option<f64>,
    /// Weight on the rate in `total`.
    pub beta_effective: f64,
}

/// The objective on a tape, with the intermediate pieces callers need.
pub struct ElboTerms<'t> {
    pub total: Var<'t>,
    /// Per-sample decoder NLL, `[B]`.
    pub distortion: Var<'t>,
    /// Per-sample KL, `[B]`.
    pub rate: Var<'t>,
    pub sigma: Option<f64>,
    pub beta_effective: f64,
    /// Batchwise optimal variance per sharing group (optimal-σ only).
    pub group_variance: Option<Tensor>,
    pub mu_z: Var<'t>,
    pub log_sigma_z: Var<'t>,
}

impl ElboTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.item(),
            distortion: self.distortion.value().mean(),
            rate: self.rate.value().mean(),
            sigma: self.sigma,
            beta_effective: self.beta_effective,
        }
    }
}

fn finite_or(term: &str, v: &Tensor) -> Result<()> {
    if v.all_finite() {
        Ok(())
    } else {
        Err(Error::NumericInstability { term: term.into() })
    }
}

/// Builds the objective for one batch on the tape `p` is bound to. Draws
/// one posterior sample per datum from `rng`.
pub fn elbo_terms<'t>(p: &Bound<'t>, batch: &Batch, mode: &ObjectiveMode, rng: &mut Rng) -> Result<ElboTerms<'t>> {
    if batch.is_empty() {
        return Err(Error::contract("elbo_loss: empty batch"));
    }
    let cfg = p.config();
    mode.validate(&cfg.decoder)?;
    let tape = p.vars()[0].tape();
    let x = tape.constant(batch.x.clone());
    let (mu_z, log_sigma_z) = p.encode(x);
    finite_or("encoder", &mu_z.value())?;
    finite_or("encoder", &log_sigma_z.value())?;
    let z = reparameterize(mu_z, log_sigma_z, rng);
    let rate = kl_diag_gaussian(mu_z, log_sigma_z);
    let head = p.decode(z);

    let mut sigma = None;
    let mut beta = 1.0;
    let mut group_variance = None;
    let gaussian = |mean: Var<'t>, lam: Var<'t>| gaussian_nll(x, mean, lam);
    let distortion = match (&head, mode) {
        (HeadVars::Mean(mean), ObjectiveMode::BetaVae { beta: b }) => {
            beta = *b;
            sigma = Some(1.0);
            crate::decoders::per_sample_sum((x - *mean).square()).scale(0.5)
        }
        (HeadVars::Mean(mean), ObjectiveMode::SigmaVaeFixed { log_sigma }) => {
            sigma = Some(log_sigma.exp());
            gaussian(*mean, tape.scalar(*log_sigma))?
        }
        (HeadVars::Mean(mean), _) => match &cfg.decoder.kind {
            DecoderKind::UnitGaussian => {
                sigma = Some(1.0);
                gaussian(*mean, tape.scalar(0.0))?
            }
            DecoderKind::SharedSigma => {
                let lam = p.shared_log_sigma().expect("shared decoder has a global log sigma");
                sigma = Some(lam.item().exp());
                gaussian(*mean, lam)?
            }
            DecoderKind::OptimalSigma { sharing } => {
                let lam = optimal_log_sigma(&batch.x, &mean.value(), sharing, cfg.decoder.clip)?;
                let var = lam.map(|l| (2.0 * l).exp());
                sigma = Some(var.mean().sqrt());
                group_variance = Some(var);
                gaussian(*mean, tape.constant(lam))?
            }
            _ => unreachable!("mean-only head"),
        },
        (HeadVars::MeanLogSigma(mean, lam), _) => match cfg.decoder.kind {
            DecoderKind::DiscretizedGaussian => discretized_gaussian_nll(*mean, *lam, &batch.bytes)?,
            _ => gaussian(*mean, *lam)?,
        },
        (HeadVars::Probs(probs), _) => bernoulli_nll(*probs, x)?,
        (HeadVars::Categorical(l), _) => categorical_nll(*l, &batch.bytes)?,
        (HeadVars::Bits(l), _) => bitwise_categorical_nll(*l, &batch.bytes)?,
        (HeadVars::Mixture(m, s, l), _) => discretized_logistic_mixture_nll(*m, *s, *l, &batch.bytes)?,
    };
    let total = (distortion + rate.scale(beta)).mean_all();

    finite_or("distortion", &distortion.value())?;
    finite_or("rate", &rate.value())?;
    finite_or("total", &total.value())?;
    Ok(ElboTerms {
        total,
        distortion,
        rate,
        sigma,
        beta_effective: beta,
        group_variance,
        mu_z,
        log_sigma_z,
    })
}

/// Evaluates the objective without recording gradients.
pub fn elbo_loss(model: &VaeModel, batch: &Batch, mode: &ObjectiveMode, rng: &mut Rng) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let p = model.bind_frozen(&tape);
    Ok(elbo_terms(&p, batch, mode, rng)?.breakdown())
}
