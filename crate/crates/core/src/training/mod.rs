//! Adam, the training loop and checkpoints.
//!
//! Every random choice in a run derives from the config seed: weights from
//! one stream, the per-epoch shuffles from one stream per epoch, and
//! posterior noise from a stream whose position is checkpointed. A run is
//! therefore reproducible bit-for-bit on one platform, including across a
//! save and resume.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoders::DecoderSpec;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor};
use crate::vae::{elbo_terms, Batch, LossBreakdown, ModelConfig, ObjectiveMode, VaeModel};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Consecutive non-finite steps tolerated before a run aborts.
pub const MAX_BAD_STEPS: u32 = 3;

const SHUFFLE_STREAM: u64 = 0x5348_0000_0000;
const NOISE_STREAM: u64 = 0x4e4f_4953;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub objective: ObjectiveMode,
    /// Defaults to the objective's own decoder.
    pub decoder: Option<DecoderSpec>,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Evaluation hook period in steps; `None` fires once per epoch.
    pub eval_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 10,
            seed: 0,
            objective: ObjectiveMode::SigmaVaeOptimal {
                sharing: crate::decoders::SharingScheme::shared(),
            },
            decoder: None,
            latent_dim: 20,
            hidden: vec![128, 128],
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn decoder_spec(&self) -> Result<DecoderSpec> {
        match (&self.decoder, self.objective.default_decoder()) {
            (Some(d), _) => Ok(d.clone()),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(Error::Config(format!(
                "objective {} needs an explicit decoder",
                self.objective.name()
            ))),
        }
    }

    pub fn model_config(&self, chw: [usize; 3]) -> Result<ModelConfig> {
        Ok(ModelConfig {
            chw,
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            decoder: self.decoder_spec()?,
        })
    }

    /// Checks the config on its own and against a dataset size.
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("batch_size, latent_dim and hidden widths must be positive".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training images",
                self.batch_size, dataset_len
            )));
        }
        let spec = self.decoder_spec()?;
        spec.validate()?;
        self.objective.validate(&spec)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len / self.batch_size) as u64
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients leave everything
/// untouched and name the offending parameter.
pub fn adam_step(params: &mut [(String, Tensor)], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract("adam_step: one gradient and moment per parameter"));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NumericInstability {
                term: format!("gradient of {name}"),
            });
        }
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One logged optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based count of steps taken so far.
    pub step: u64,
    /// 0-based epoch the step belongs to.
    pub epoch: u64,
    pub loss: LossBreakdown,
}

/// Resumable training state over one dataset.
pub struct Trainer<'d> {
    model: VaeModel,
    adam: AdamState,
    config: TrainConfig,
    data: &'d Dataset,
    noise: Rng,
    step: u64,
    bad_steps: u32,
    order: Option<(u64, Vec<usize>)>,
}

impl<'d> Trainer<'d> {
    /// Fresh run: the model is initialized from the config seed.
    pub fn new(config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        config.validate(data.len())?;
        let model = VaeModel::new(config.model_config(data.chw())?, config.seed)?;
        Self::with_model(model, config, data)
    }

    /// Fresh optimizer state around an existing model.
    pub fn with_model(model: VaeModel, config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        config.validate(data.len())?;
        if model.config != config.model_config(data.chw())? {
            return Err(Error::Config("model does not match the training config and data".into()));
        }
        Ok(Trainer {
            adam: AdamState::new(model.params()),
            noise: Rng::with_stream(config.seed, NOISE_STREAM),
            model,
            config,
            data,
            step: 0,
            bad_steps: 0,
            order: None,
        })
    }

    /// Continues a checkpointed run on the same data.
    pub fn resume(ckpt: Checkpoint, data: &'d Dataset) -> Result<Self> {
        ckpt.train.validate(data.len())?;
        if ckpt.model.config != ckpt.train.model_config(data.chw())? {
            return Err(Error::Checkpoint("checkpoint does not match the dataset shape".into()));
        }
        let noise = Rng::from_state(&ckpt.rng).ok_or_else(|| Error::Checkpoint("bad rng state".into()))?;
        Ok(Trainer {
            model: ckpt.model,
            adam: ckpt.adam,
            config: ckpt.train,
            data,
            noise,
            step: ckpt.step,
            bad_steps: ckpt.bad_steps,
            order: None,
        })
    }

    pub fn model(&self) -> &VaeModel {
        &self.model
    }

    pub fn into_model(self) -> VaeModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.config.steps_per_epoch(self.data.len())
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Whether the evaluation hook is due after the current step.
    pub fn eval_due(&self) -> bool {
        match self.config.eval_every {
            Some(k) => self.step % k == 0,
            None => self.step % self.steps_per_epoch() == 0,
        }
    }

    pub fn checkpoint(&self, echo: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            train: self.config.clone(),
            step: self.step,
            bad_steps: self.bad_steps,
            rng: self.noise.state(),
            echo,
        }
    }

    /// Seeded permutation for one epoch; every image appears once.
    pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
        Rng::with_stream(seed, SHUFFLE_STREAM + epoch).permutation(n)
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let within = (self.step % spe) as usize;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, Self::epoch_order(self.config.seed, epoch, self.data.len())));
        }
        let b = self.config.batch_size;
        self.order.as_ref().unwrap().1[within * b..(within + 1) * b].to_vec()
    }

    /// One optimization step. Returns `Ok(None)` for a skipped non-finite
    /// step and an abort error after [`MAX_BAD_STEPS`] in a row.
    pub fn step_once(&mut self) -> Result<Option<StepRecord>> {
        let epoch = self.step / self.steps_per_epoch();
        let idx = self.batch_indices();
        let batch = Batch::from_dataset(self.data, &idx);
        self.step += 1;
        let outcome = self.try_update(&batch);
        match outcome {
            Ok(loss) => {
                self.bad_steps = 0;
                Ok(Some(StepRecord {
                    step: self.step,
                    epoch,
                    loss,
                }))
            }
            Err(e) if e.is_numeric() => {
                self.bad_steps += 1;
                if self.bad_steps >= MAX_BAD_STEPS {
                    return Err(Error::TrainingAborted {
                        step: self.step,
                        decoder: self.model.decoder().name().to_string(),
                        reason: format!("{MAX_BAD_STEPS} consecutive non-finite steps, last: {e}"),
                    });
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn try_update(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let terms = elbo_terms(&bound, batch, &self.config.objective, &mut self.noise)?;
        let loss = terms.breakdown();
        let group_variance = terms.group_variance.clone();
        let grads = tape.backward(terms.total)?;
        let grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
        adam_step(self.model.params_mut(), &grads, &mut self.adam, self.config.learning_rate)?;
        if let (Some(running), Some(var)) = (self.model.running.as_mut(), group_variance) {
            running.update(&var)?;
        }
        Ok(loss)
    }

    /// Trains to the configured number of epochs, calling `hook` after
    /// every successful step.
    pub fn run(&mut self, mut hook: impl FnMut(&Trainer<'d>, &StepRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            if let Some(rec) = self.step_once()? {
                hook(self, &rec)?;
            }
        }
        Ok(())
    }
}

/// Trains a freshly initialized model and returns it with the step log.
pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<(VaeModel, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let mut log = Vec::new();
    trainer.run(|_, rec| {
        log.push(*rec);
        Ok(())
    })?;
    Ok((trainer.into_model(), log))
}
