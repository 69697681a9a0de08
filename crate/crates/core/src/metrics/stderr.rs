use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoders::{optimal_log_sigma, DecoderKind, SharingScheme};
use crate::error::{Error, Result};
use crate::numerics::{sample_normal, Rng, Tape, Tensor};
use crate::vae::{HeadVars, VaeModel};

/// Spread of the batchwise optimal σ, as percentages of its mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaStderr {
    /// Fixed batch, fresh posterior draws per trial.
    pub inner_pct: f64,
    /// Fresh batch per trial.
    pub outer_pct: f64,
    pub mean_sigma: f64,
    pub batch_size: usize,
    pub trials: usize,
}

pub const MIN_TRIALS: usize = 30;

fn batch_sigma(model: &VaeModel, sharing: &SharingScheme, x: &Tensor, rng: &mut Rng) -> Result<f64> {
    let tape = Tape::new();
    let p = model.bind_frozen(&tape);
    let (mu, ls) = p.encode(tape.constant(x.clone()));
    let eps = tape.constant(sample_normal(rng, &mu.shape()));
    let HeadVars::Mean(mean) = p.decode(mu + ls.exp() * eps) else {
        return Err(Error::contract("sigma_mc_stderr needs a Gaussian decoder with a mean-only head"));
    };
    tape.check()?;
    let lam = optimal_log_sigma(x, &mean.value(), sharing, model.config.decoder.clip)?;
    Ok(lam.map(|l| (2.0 * l).exp()).mean().sqrt())
}

/// Relative sample standard deviation in percent. Deviations are taken from
/// the first value, so a constant input gives exactly zero.
fn spread_pct(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let k = v[0];
    let s1: f64 = v.iter().map(|x| x - k).sum();
    let s2: f64 = v.iter().map(|x| (x - k) * (x - k)).sum();
    let mean = k + s1 / n;
    let var = ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0);
    (mean, 100.0 * var.sqrt() / mean)
}

/// Standard error of one batch estimate of the optimal σ, from `trials`
/// recomputations. Uses the model's own sharing scheme, or full sharing for
/// other mean-only Gaussian decoders.
pub fn sigma_mc_stderr(
    model: &VaeModel,
    data: &Dataset,
    batch_size: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<SigmaStderr> {
    if trials < MIN_TRIALS {
        return Err(Error::contract(format!("sigma_mc_stderr needs at least {MIN_TRIALS} trials")));
    }
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::contract(format!(
            "sigma_mc_stderr: batch size {batch_size} for {} images",
            data.len()
        )));
    }
    let sharing = match &model.config.decoder.kind {
        DecoderKind::OptimalSigma { sharing } => sharing.clone(),
        _ => SharingScheme::shared(),
    };
    let pick = |rng: &mut Rng| {
        let mut idx = rng.permutation(data.len());
        idx.truncate(batch_size);
        idx.sort_unstable();
        idx
    };

    let fixed = data.batch(&pick(rng));
    let mut inner = Vec::with_capacity(trials);
    for _ in 0..trials {
        inner.push(batch_sigma(model, &sharing, &fixed, rng)?);
    }
    let mut outer = Vec::with_capacity(trials);
    for _ in 0..trials {
        let x = data.batch(&pick(rng));
        outer.push(batch_sigma(model, &sharing, &x, rng)?);
    }
    let (_, inner_pct) = spread_pct(&inner);
    let (mean_sigma, outer_pct) = spread_pct(&outer);
    Ok(SigmaStderr {
        inner_pct,
        outer_pct,
        mean_sigma,
        batch_size,
        trials,
    })
}
