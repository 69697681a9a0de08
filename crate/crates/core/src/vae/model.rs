use serde::{Deserialize, Serialize};

use crate::decoders::{soft_clip, soft_clip_value, ClipBounds, DecoderKind, DecoderSpec, SharingScheme};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

/// Bounds for the posterior log standard deviation.
pub const POSTERIOR_CLIP: ClipBounds = ClipBounds {
    lambda_min: -6.0,
    lambda_max: 2.0,
};

const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[channels, height, width]` of the data.
    pub chw: [usize; 3],
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    /// Hidden widths of the encoder; the decoder mirrors them.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub decoder: DecoderSpec,
}

fn default_latent() -> usize {
    20
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

impl ModelConfig {
    pub fn new(chw: [usize; 3], decoder: DecoderSpec) -> Self {
        ModelConfig {
            chw,
            latent_dim: default_latent(),
            hidden: default_hidden(),
            decoder,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.chw.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "model extents must be positive: chw {:?}, latent {}, hidden {:?}",
                self.chw, self.latent_dim, self.hidden
            )));
        }
        self.decoder.validate()
    }
}

/// Exponential moving average (decay 0.99, bias-corrected) of the batchwise
/// optimal variance, kept per sharing group wherever groups do not depend on
/// the batch, and averaged over the batch otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningVariance {
    pub ema: Tensor,
    pub steps: u64,
}

pub const RUNNING_DECAY: f64 = 0.99;

impl RunningVariance {
    fn new(shape: &[usize]) -> Self {
        RunningVariance {
            ema: Tensor::zeros(shape),
            steps: 0,
        }
    }

    pub fn update(&mut self, batch_var: &Tensor) -> Result<()> {
        let target = batch_var.sum_to_shape(self.ema.shape())?;
        let scale = self.ema.len() as f64 / batch_var.len() as f64;
        for (e, t) in self.ema.data_mut().iter_mut().zip(target.data()) {
            *e = RUNNING_DECAY * *e + (1.0 - RUNNING_DECAY) * t * scale;
        }
        self.steps += 1;
        Ok(())
    }

    /// Bias-corrected variance estimate, `None` before the first update.
    pub fn variance(&self) -> Option<Tensor> {
        if self.steps == 0 {
            return None;
        }
        let correction = 1.0 - RUNNING_DECAY.powi(self.steps.min(i32::MAX as u64) as i32);
        Some(self.ema.map(|v| v / correction))
    }
}

/// Encoder and decoder MLPs plus the decoder-variance state.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
    /// Present for optimal-σ decoders.
    pub running: Option<RunningVariance>,
}

fn layer_dims(config: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    let d = config.input_dim();
    let l = config.latent_dim;
    let mut enc = vec![d];
    enc.extend(&config.hidden);
    enc.push(2 * l);
    let mut dec = vec![l];
    dec.extend(config.hidden.iter().rev());
    dec.push(config.decoder.outputs_per_dim() * d);
    (enc, dec)
}

/// Shape the running variance keeps: the group shape with the batch axis
/// always collapsed.
fn running_shape(chw: [usize; 3], sharing: &SharingScheme) -> Vec<usize> {
    let mut shape = vec![1, chw[0], chw[1], chw[2]];
    for a in sharing.axis_indices() {
        shape[a] = 1;
    }
    shape
}

impl VaeModel {
    /// Random initialization: weights `N(0, 2/fan_in)` for hidden layers and
    /// `N(0, 1/fan_in)` for output layers, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, INIT_STREAM);
        let mut model = Self::zeros(config)?;
        for (name, t) in model.params.iter_mut() {
            if !name.ends_with(".weight") {
                continue;
            }
            let fan_in = t.shape()[0] as f64;
            let gain = if is_output_layer(name, &model.config) { 1.0 } else { 2.0 };
            let std = (gain / fan_in).sqrt();
            rng.fill_normal(t.data_mut());
            for v in t.data_mut() {
                *v *= std;
            }
        }
        Ok(model)
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (enc, dec) = layer_dims(&config);
        let mut params = Vec::new();
        for (prefix, dims) in [("encoder", &enc), ("decoder", &dec)] {
            for (i, w) in dims.windows(2).enumerate() {
                params.push((format!("{prefix}.{i}.weight"), Tensor::zeros(&[w[0], w[1]])));
                params.push((format!("{prefix}.{i}.bias"), Tensor::zeros(&[w[1]])));
            }
        }
        if matches!(config.decoder.kind, DecoderKind::SharedSigma) {
            params.push(("global_lambda".into(), Tensor::scalar(0.0)));
        }
        let running = match &config.decoder.kind {
            DecoderKind::OptimalSigma { sharing } => Some(RunningVariance::new(&running_shape(config.chw, sharing))),
            _ => None,
        };
        Ok(VaeModel {
            config,
            params,
            running,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .param_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn decoder(&self) -> &DecoderSpec {
        &self.config.decoder
    }

    /// Soft-clipped shared log σ, for shared-σ decoders.
    pub fn shared_log_sigma(&self) -> Option<f64> {
        self.param("global_lambda")
            .map(|t| soft_clip_value(t.item(), self.config.decoder.clip))
    }

    /// Test-time log σ of an optimal-σ decoder, shaped to broadcast onto
    /// `[B, C, H, W]`. Before any update the upper clip bound is used.
    pub fn running_log_sigma(&self) -> Option<Tensor> {
        let running = self.running.as_ref()?;
        let clip = self.config.decoder.clip;
        Some(match running.variance() {
            Some(v) => v.map(|s| {
                if s <= 0.0 {
                    clip.lambda_min
                } else {
                    (0.5 * s.ln()).clamp(clip.lambda_min, clip.lambda_max)
                }
            }),
            None => Tensor::full(running.ema.shape(), clip.lambda_max),
        })
    }

    /// Scalar summary of the running σ: root of the mean running variance.
    pub fn running_sigma(&self) -> Option<f64> {
        self.running_log_sigma().map(|l| l.map(|v| (2.0 * v).exp()).mean().sqrt())
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Registers parameters as constants (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    /// Uses caller-provided vars, one per parameter in [`Self::params`]
    /// order, e.g. leaves created by a gradient checker.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> Bound<'t> {
        assert_eq!(vars.len(), self.params.len(), "bind_vars: one var per parameter");
        for (v, (name, t)) in vars.iter().zip(&self.params) {
            assert_eq!(v.shape(), t.shape(), "bind_vars: shape of {name}");
        }
        Bound {
            vars,
            layers: self.config.hidden.len() + 1,
            config: self.config.clone(),
        }
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    fn bind_with<'t>(&self, tape: &'t Tape, grad: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| if grad { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let layers = self.config.hidden.len() + 1;
        Bound {
            vars,
            layers,
            config: self.config.clone(),
        }
    }
}

fn is_output_layer(name: &str, config: &ModelConfig) -> bool {
    name.ends_with(&format!(".{}.weight", config.hidden.len()))
}

/// Model parameters bound to one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    layers: usize,
    config: ModelConfig,
}

/// Decoder head outputs as tape variables, after link functions.
pub enum HeadVars<'t> {
    /// Gaussian means in `[0, 1]`, `[B, C, H, W]`.
    Mean(Var<'t>),
    /// Means plus soft-clipped per-pixel log σ, both `[B, C, H, W]`.
    MeanLogSigma(Var<'t>, Var<'t>),
    /// Bernoulli probabilities, `[B, C, H, W]`.
    Probs(Var<'t>),
    /// `[B, D, 256]`.
    Categorical(Var<'t>),
    /// `[B, D, 8]`.
    Bits(Var<'t>),
    /// Means, log-scales, mixture logits, each `[B, D, K]`.
    Mixture(Var<'t>, Var<'t>, Var<'t>),
}

impl<'t> Bound<'t> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter vars in the model's parameter order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn mlp(&self, x: Var<'t>, offset: usize) -> Var<'t> {
        let mut h = x;
        for i in 0..self.layers {
            let w = self.vars[offset + 2 * i];
            let b = self.vars[offset + 2 * i + 1];
            h = h.matmul(w) + b;
            if i + 1 < self.layers {
                h = h.relu();
            }
        }
        h
    }

    /// Posterior mean and soft-clipped log std, each `[B, latent]`.
    pub fn encode(&self, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let b = x.shape()[0];
        let flat = x.reshape(&[b, self.config.input_dim()]);
        let out = self.mlp(flat, 0);
        let l = self.config.latent_dim;
        let mu = out.narrow(1, 0, l);
        let log_sigma = soft_clip(out.narrow(1, l, l), POSTERIOR_CLIP);
        (mu, log_sigma)
    }

    /// Raw decoder output `[B, outputs_per_dim · D]`.
    pub fn decode_raw(&self, z: Var<'t>) -> Var<'t> {
        self.mlp(z, 2 * self.layers)
    }

    pub fn decode(&self, z: Var<'t>) -> HeadVars<'t> {
        let raw = self.decode_raw(z);
        let b = raw.shape()[0];
        let [c, h, w] = self.config.chw;
        let d = c * h * w;
        let img = [b, c, h, w];
        let clip = self.config.decoder.clip;
        match self.config.decoder.kind {
            DecoderKind::UnitGaussian | DecoderKind::SharedSigma | DecoderKind::OptimalSigma { .. } => {
                HeadVars::Mean(raw.sigmoid().reshape(&img))
            }
            DecoderKind::PerPixelSigma | DecoderKind::DiscretizedGaussian => HeadVars::MeanLogSigma(
                raw.narrow(1, 0, d).sigmoid().reshape(&img),
                soft_clip(raw.narrow(1, d, d), clip).reshape(&img),
            ),
            DecoderKind::Bernoulli => HeadVars::Probs(raw.sigmoid().reshape(&img)),
            DecoderKind::Categorical256 => HeadVars::Categorical(raw.reshape(&[b, d, 256])),
            DecoderKind::BitwiseCategorical => HeadVars::Bits(raw.reshape(&[b, d, 8])),
            DecoderKind::DiscretizedLogisticMixture { components: k } => {
                let part = |i: usize| raw.narrow(1, i * d * k, d * k).reshape(&[b, d, k]);
                HeadVars::Mixture(part(0), part(1), part(2))
            }
        }
    }

    /// The shared log σ as a differentiable scalar, for shared-σ decoders.
    pub fn shared_log_sigma(&self) -> Option<Var<'t>> {
        if matches!(self.config.decoder.kind, DecoderKind::SharedSigma) {
            let raw = *self.vars.last().unwrap();
            Some(soft_clip(raw, self.config.decoder.clip))
        } else {
            None
        }
    }
}
