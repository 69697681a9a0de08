use serde::{Deserialize, Serialize};

use super::discrete::byte_bits;
use super::discretized::{discretized_gaussian_pmf, logistic_mixture_pmf};
use super::{DecoderKind, DecoderSpec};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Rng, Tensor};

/// Decoder head outputs after the per-variant link functions, as plain
/// tensors. Trailing axes named below are the per-sub-pixel parameter axes.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderOutput {
    /// `log_sigma` broadcasts onto `mean`.
    Gaussian { mean: Tensor, log_sigma: Tensor },
    Bernoulli { probs: Tensor },
    /// `[..., 256]`.
    Categorical { logits: Tensor },
    /// `[..., 8]`, most significant bit first.
    Bitwise { logits: Tensor },
    DiscretizedGaussian { mean: Tensor, log_sigma: Tensor },
    /// Each `[..., K]`.
    LogisticMixture {
        means: Tensor,
        log_scales: Tensor,
        logits: Tensor,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Distribution mean, or expected intensity for discrete decoders.
    #[default]
    Mean,
    /// A draw from the distribution.
    Sample,
}

fn matches_spec(spec: &DecoderSpec, out: &DecoderOutput) -> bool {
    use DecoderKind as K;
    use DecoderOutput as O;
    matches!(
        (&spec.kind, out),
        (K::UnitGaussian | K::SharedSigma | K::PerPixelSigma | K::OptimalSigma { .. }, O::Gaussian { .. })
            | (K::Bernoulli, O::Bernoulli { .. })
            | (K::Categorical256, O::Categorical { .. })
            | (K::BitwiseCategorical, O::Bitwise { .. })
            | (K::DiscretizedGaussian, O::DiscretizedGaussian { .. })
            | (K::DiscretizedLogisticMixture { .. }, O::LogisticMixture { .. })
    )
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

/// Expected intensity of a 256-way mass, or a draw from it, as a float.
fn reduce_pmf(p: &[f64; 256], rng: &mut Rng, mode: SampleMode) -> f64 {
    match mode {
        SampleMode::Mean => {
            let total: f64 = p.iter().sum();
            p.iter().enumerate().map(|(k, &m)| k as f64 * m).sum::<f64>() / total / 255.0
        }
        SampleMode::Sample => {
            let total: f64 = p.iter().sum();
            let mut u = rng.uniform() * total;
            for (k, &m) in p.iter().enumerate() {
                if u < m {
                    return k as f64 / 255.0;
                }
                u -= m;
            }
            // Rounding left a sliver past the last bin with mass.
            let last = p.iter().rposition(|&m| m > 0.0).unwrap_or(255);
            last as f64 / 255.0
        }
    }
}

fn softmax_pmf(logits: &[f64]) -> [f64; 256] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; 256];
    for (slot, &l) in p.iter_mut().zip(logits) {
        *slot = (l - m).exp();
    }
    p
}

fn bitwise_pmf(logits: &[f64]) -> [f64; 256] {
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let mut p = [0.0; 256];
    for (byte, slot) in p.iter_mut().enumerate() {
        *slot = byte_bits(byte as u8)
            .iter()
            .zip(&probs)
            .map(|(&b, &q)| if b == 1.0 { q } else { 1.0 - q })
            .product();
    }
    p
}

/// Turns decoder outputs into an image tensor in `[0, 1]`.
///
/// Parameter axes are removed: a categorical `[B, D, 256]` yields `[B, D]`.
pub fn decoder_sample(
    spec: &DecoderSpec,
    out: &DecoderOutput,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<Tensor> {
    if !matches_spec(spec, out) {
        return Err(Error::contract(format!(
            "decoder_sample: outputs do not belong to decoder {}",
            spec.name()
        )));
    }
    let img = match out {
        DecoderOutput::Gaussian { mean, log_sigma } => {
            let lam = log_sigma.broadcast_to(mean.shape())?;
            match mode {
                SampleMode::Mean => mean.clone(),
                SampleMode::Sample => {
                    let mut eps = vec![0.0; mean.len()];
                    rng.fill_normal(&mut eps);
                    let data = mean
                        .data()
                        .iter()
                        .zip(lam.data())
                        .zip(&eps)
                        .map(|((&m, &l), &e)| m + l.exp() * e)
                        .collect();
                    Tensor::from_vec(mean.shape(), data)
                }
            }
        }
        DecoderOutput::Bernoulli { probs } => match mode {
            SampleMode::Mean => probs.clone(),
            SampleMode::Sample => {
                let data = probs.data().iter().map(|&p| if rng.uniform() < p { 1.0 } else { 0.0 }).collect();
                Tensor::from_vec(probs.shape(), data)
            }
        },
        DecoderOutput::Categorical { logits } => {
            per_row(logits, 256, rng, mode, |row| softmax_pmf(row))?
        }
        DecoderOutput::Bitwise { logits } => per_row(logits, 8, rng, mode, bitwise_pmf)?,
        DecoderOutput::DiscretizedGaussian { mean, log_sigma } => {
            let lam = log_sigma.broadcast_to(mean.shape())?;
            let data = mean
                .data()
                .iter()
                .zip(lam.data())
                .map(|(&m, &l)| reduce_pmf(&discretized_gaussian_pmf(m, l), rng, mode))
                .collect();
            Tensor::from_vec(mean.shape(), data)
        }
        DecoderOutput::LogisticMixture {
            means,
            log_scales,
            logits,
        } => {
            if means.shape() != log_scales.shape() || means.shape() != logits.shape() || means.ndim() < 2 {
                return Err(Error::shape(
                    "decoder_sample",
                    format!("mixture parameters {:?}", means.shape()),
                ));
            }
            let k = *means.shape().last().unwrap();
            let data = means
                .data()
                .chunks(k)
                .zip(log_scales.data().chunks(k))
                .zip(logits.data().chunks(k))
                .map(|((m, s), l)| reduce_pmf(&logistic_mixture_pmf(m, s, l), rng, mode))
                .collect();
            Tensor::from_vec(&drop_last(means.shape()), data)
        }
    };
    Ok(img.map(|v| v.clamp(0.0, 1.0)))
}

fn per_row(
    t: &Tensor,
    width: usize,
    rng: &mut Rng,
    mode: SampleMode,
    pmf: impl Fn(&[f64]) -> [f64; 256],
) -> Result<Tensor> {
    if t.ndim() < 2 || *t.shape().last().unwrap() != width {
        return Err(Error::shape(
            "decoder_sample",
            format!("expected trailing axis {width}, got {:?}", t.shape()),
        ));
    }
    let data = t.data().chunks(width).map(|row| reduce_pmf(&pmf(row), rng, mode)).collect();
    Ok(Tensor::from_vec(&drop_last(t.shape()), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::{ClipBounds, SharingScheme};

    #[test]
    fn gaussian_mean_mode_returns_the_mean() {
        let mean = Tensor::from_vec(&[1, 3], vec![0.1, 0.5, 0.9]);
        let out = DecoderOutput::Gaussian {
            mean: mean.clone(),
            log_sigma: Tensor::scalar(-1.0),
        };
        let img = decoder_sample(&DecoderSpec::shared_sigma(), &out, &mut Rng::new(0), SampleMode::Mean).unwrap();
        assert_eq!(img, mean);
    }

    #[test]
    fn one_hot_categorical_gives_its_byte() {
        let mut logits = vec![-1e3; 256];
        logits[17] = 0.0;
        let out = DecoderOutput::Categorical {
            logits: Tensor::from_vec(&[1, 1, 256], logits),
        };
        let spec = DecoderSpec::new(DecoderKind::Categorical256);
        for mode in [SampleMode::Mean, SampleMode::Sample] {
            let img = decoder_sample(&spec, &out, &mut Rng::new(1), mode).unwrap();
            assert_eq!(img.shape(), &[1, 1]);
            assert!((img.item() - 17.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_draws_have_the_decoder_variance() {
        let sigma: f64 = 0.1;
        let out = DecoderOutput::Gaussian {
            mean: Tensor::full(&[10_000, 4], 0.5),
            log_sigma: Tensor::scalar(sigma.ln()),
        };
        let spec = DecoderSpec::optimal_sigma(SharingScheme::shared());
        let img = decoder_sample(&spec, &out, &mut Rng::new(2), SampleMode::Sample).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = img.data().iter().skip(j).step_by(4).copied().collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (col.len() - 1) as f64;
            assert!((v / (sigma * sigma) - 1.0).abs() < 0.05, "pixel {j}: {v}");
        }
    }

    #[test]
    fn outputs_are_clamped_and_discrete_means_lie_on_the_grid() {
        let out = DecoderOutput::Gaussian {
            mean: Tensor::from_vec(&[1, 2], vec![-0.5, 1.5]),
            log_sigma: Tensor::scalar(0.0),
        };
        let img = decoder_sample(&DecoderSpec::unit_gaussian(), &out, &mut Rng::new(3), SampleMode::Mean).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);

        let spec = DecoderSpec::new(DecoderKind::DiscretizedGaussian);
        let out = DecoderOutput::DiscretizedGaussian {
            mean: Tensor::from_vec(&[1, 1], vec![100.0 / 255.0]),
            log_sigma: Tensor::scalar(ClipBounds::default().lambda_min),
        };
        for mode in [SampleMode::Mean, SampleMode::Sample] {
            let img = decoder_sample(&spec, &out, &mut Rng::new(4), mode).unwrap();
            assert!((img.item() * 255.0 - 100.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bitwise_and_mixture_shapes() {
        let spec = DecoderSpec::new(DecoderKind::BitwiseCategorical);
        let out = DecoderOutput::Bitwise {
            logits: Tensor::full(&[2, 3, 8], 30.0),
        };
        let img = decoder_sample(&spec, &out, &mut Rng::new(5), SampleMode::Sample).unwrap();
        assert_eq!(img.shape(), &[2, 3]);
        assert!(img.data().iter().all(|&v| v == 1.0));

        let spec = DecoderSpec::logistic_mixture(2);
        let out = DecoderOutput::LogisticMixture {
            means: Tensor::full(&[1, 4, 2], 0.5),
            log_scales: Tensor::full(&[1, 4, 2], -3.0),
            logits: Tensor::zeros(&[1, 4, 2]),
        };
        let img = decoder_sample(&spec, &out, &mut Rng::new(6), SampleMode::Mean).unwrap();
        assert_eq!(img.shape(), &[1, 4]);
        assert!(img.data().iter().all(|&v| (v - 0.5).abs() < 0.01));
    }

    #[test]
    fn mismatched_outputs_are_rejected() {
        let out = DecoderOutput::Bernoulli {
            probs: Tensor::zeros(&[1, 1]),
        };
        assert!(decoder_sample(&DecoderSpec::unit_gaussian(), &out, &mut Rng::new(0), SampleMode::Mean).is_err());
    }
}
