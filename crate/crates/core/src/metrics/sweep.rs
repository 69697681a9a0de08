use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoders::{DecoderKind, SharingScheme};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::training::{fit, TrainConfig};
use crate::vae::{effective_beta, BetaConvention, ObjectiveMode, VaeModel};

use super::{eval_elbo, mi_marginal_kl, sigma_mc_stderr, DEFAULT_MI_SAMPLES};

/// What to compute besides the test ELBO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mi_samples: usize,
    /// Batch size for the σ standard-error estimate; `None` skips it.
    pub stderr_batch: Option<usize>,
    pub stderr_trials: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            mi_samples: DEFAULT_MI_SAMPLES,
            stderr_batch: None,
            stderr_trials: 100,
        }
    }
}

/// Test-set metrics of one trained model, nats per image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub neg_elbo: f64,
    pub neg_elbo_discretized: Option<f64>,
    pub distortion: f64,
    pub rate: f64,
    pub mi_estimate: f64,
    pub marginal_kl_estimate: f64,
    /// Test-time decoder σ where it is a single number.
    pub sigma: Option<f64>,
    pub beta_eff_text: Option<f64>,
    pub beta_eff_eq7: Option<f64>,
    pub sigma_stderr_inner_pct: Option<f64>,
    pub sigma_stderr_outer_pct: Option<f64>,
}

/// Test-time σ as one number: 1 for the unit decoder, the learned shared
/// value, or the root mean running variance.
fn model_sigma(model: &VaeModel) -> Option<f64> {
    match model.config.decoder.kind {
        DecoderKind::UnitGaussian => Some(1.0),
        DecoderKind::SharedSigma => model.shared_log_sigma().map(f64::exp),
        DecoderKind::OptimalSigma { .. } => model.running_sigma(),
        _ => None,
    }
}

/// Evaluates a trained model. `objective` only affects the effective-β
/// columns: a β-VAE reports its own β, σ-VAEs the β their σ implies.
pub fn evaluate_model(
    model: &VaeModel,
    objective: &ObjectiveMode,
    test: &Dataset,
    settings: &EvalSettings,
    seed: u64,
) -> Result<MetricsRecord> {
    let elbo = eval_elbo(model, test, &mut Rng::with_stream(seed, 0xE7A1))?;
    let mi = mi_marginal_kl(model, test, settings.mi_samples, &mut Rng::with_stream(seed, 0x3141))?;
    let sigma = model_sigma(model);
    let (text, eq7) = match objective {
        ObjectiveMode::BetaVae { beta } => (Some(2.0 * beta), Some(*beta)),
        ObjectiveMode::PlainElbo if !model.config.decoder.is_continuous_gaussian() => (None, None),
        _ => (
            sigma.map(|s| effective_beta(s, BetaConvention::Text)),
            sigma.map(|s| effective_beta(s, BetaConvention::Eq7)),
        ),
    };
    let stderr = match settings.stderr_batch {
        Some(b) if model.config.decoder.is_continuous_gaussian() => Some(sigma_mc_stderr(
            model,
            test,
            b.min(test.len()),
            settings.stderr_trials,
            &mut Rng::with_stream(seed, 0x5D3E),
        )?),
        _ => None,
    };
    Ok(MetricsRecord {
        neg_elbo: elbo.neg_elbo,
        neg_elbo_discretized: elbo.neg_elbo_discretized,
        distortion: elbo.distortion,
        rate: elbo.rate,
        mi_estimate: mi.mi,
        marginal_kl_estimate: mi.marginal_kl,
        sigma,
        beta_eff_text: text,
        beta_eff_eq7: eq7,
        sigma_stderr_inner_pct: stderr.map(|s| s.inner_pct),
        sigma_stderr_outer_pct: stderr.map(|s| s.outer_pct),
    })
}

/// Seed for sweep row `index`, derived from the master seed.
pub fn row_seed(master: u64, index: usize) -> u64 {
    Rng::with_stream(master, 0x5357_0000 + index as u64).next_u64()
}

/// One configuration of a sweep. Failed rows keep their error message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub objective: String,
    pub beta: Option<f64>,
    pub sharing: Option<String>,
    pub sigma_params: Option<usize>,
    pub seed: u64,
    pub record: Option<MetricsRecord>,
    pub error: Option<String>,
}

fn run_row(
    label: String,
    objective: ObjectiveMode,
    base: &TrainConfig,
    index: usize,
    train: &Dataset,
    test: &Dataset,
    settings: &EvalSettings,
) -> SweepRow {
    let seed = row_seed(base.seed, index);
    let cfg = TrainConfig {
        seed,
        objective: objective.clone(),
        decoder: None,
        ..base.clone()
    };
    let (beta, sharing, sigma_params) = match &objective {
        ObjectiveMode::BetaVae { beta } => (Some(*beta), None, None),
        ObjectiveMode::SigmaVaeOptimal { sharing } => {
            (None, Some(sharing.name()), Some(sharing.parameter_count(train.chw())))
        }
        _ => (None, None, None),
    };
    let outcome = fit(train, &cfg).and_then(|(model, _)| evaluate_model(&model, &objective, test, settings, seed));
    SweepRow {
        label,
        objective: objective.name().to_string(),
        beta,
        sharing,
        sigma_params,
        seed,
        error: outcome.as_ref().err().map(|e| e.to_string()),
        record: outcome.ok(),
    }
}

fn optimal_sharing(base: &TrainConfig) -> SharingScheme {
    match &base.objective {
        ObjectiveMode::SigmaVaeOptimal { sharing } => sharing.clone(),
        _ => SharingScheme::shared(),
    }
}

/// One β-VAE per β, then one optimal-σ run, each on its own row seed.
pub fn beta_sweep(
    train: &Dataset,
    test: &Dataset,
    betas: &[f64],
    base: &TrainConfig,
    settings: &EvalSettings,
) -> Result<Vec<SweepRow>> {
    if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
        return Err(Error::Config(format!("beta {b} must be positive")));
    }
    let mut rows: Vec<SweepRow> = betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| {
            run_row(format!("beta={beta}"), ObjectiveMode::BetaVae { beta }, base, i, train, test, settings)
        })
        .collect();
    let sharing = optimal_sharing(base);
    rows.push(run_row(
        "sigma-vae".into(),
        ObjectiveMode::SigmaVaeOptimal { sharing },
        base,
        betas.len(),
        train,
        test,
        settings,
    ));
    Ok(rows)
}

/// One optimal-σ run per sharing scheme, ordered by variance-parameter
/// count.
pub fn sharing_sweep(
    train: &Dataset,
    test: &Dataset,
    schemes: &[SharingScheme],
    base: &TrainConfig,
    settings: &EvalSettings,
) -> Result<Vec<SweepRow>> {
    let mut schemes = schemes.to_vec();
    schemes.sort_by_key(|s| s.complexity(train.chw()));
    Ok(schemes
        .into_iter()
        .enumerate()
        .map(|(i, sharing)| {
            run_row(
                sharing.name(),
                ObjectiveMode::SigmaVaeOptimal { sharing },
                base,
                i,
                train,
                test,
                settings,
            )
        })
        .collect())
}
