//! Denoiser training loop.
//!
//! Each step draws its batch and noise from an RNG stream keyed by
//! `(seed, step)`, so a run resumed from a checkpoint (weights, optimizer
//! moments, step counter) continues exactly as the uninterrupted run would.
//! Per-sample gradients are computed on independent tapes and reduced in
//! sample order, which keeps results identical for any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{draw_training_example, make_schedule, DiffusionSchedule, TrainingExample};
use crate::diffusion::{DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::objects::Condition;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Checkpoint, Grads, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_adam")]
    pub adam: AdamConfig,
    #[serde(default = "default_dropout")]
    pub cond_dropout: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

fn default_batch() -> usize {
    16
}

fn default_adam() -> AdamConfig {
    AdamConfig::with_lr(1e-4)
}

fn default_dropout() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn new(steps: u64) -> Self {
        Self { steps, batch_size: 16, adam: default_adam(), cond_dropout: 0.1, seed: 0, schedule: ScheduleConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        self.schedule.build().map(|_| ())
    }
}

/// A canonicalized object ready for training: row-major `[n x 4]` points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub points: Vec<f64>,
    pub condition: Condition,
}

/// Everything needed to reproduce a non-finite step.
#[derive(Debug, Clone, Serialize)]
pub struct NanDump {
    pub step: u64,
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub conditions: Vec<[f64; 6]>,
    pub null_condition: Vec<bool>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
}

/// Per-sample squared error and gradients of `scale * sse`.
fn sample_grads(model: &Denoiser, ex: &TrainingExample, scale: f64) -> Result<(f64, Grads)> {
    let n = ex.x_t.len() / 4;
    let mut tape = Tape::<f32>::new();
    let p = model.params().bind(&mut tape, true);
    let x = tape.constant(Tensor::new(vec![n, 4], ex.x_t.iter().map(|&v| v as f32).collect())?);
    let y = model.forward(&mut tape, &p, x, ex.t, &ex.condition, None)?;
    let target: Vec<f32> = ex.eps.iter().map(|&v| v as f32).collect();
    let sse = tape.sse(y, &target, None)?;
    let loss = tape.scale(sse, scale);
    tape.backward(loss)?;
    Ok((tape.value(sse).data()[0] as f64, p.grads(&tape, model.params())))
}

pub struct Trainer {
    pub model: Denoiser,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub config: TrainConfig,
    sched: DiffusionSchedule,
}

impl Trainer {
    pub fn new(model: Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, model.params());
        Ok(Self { sched: config.schedule.build()?, model, adam, step: 0, config })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        rng
    }

    /// One optimizer step on a batch drawn with replacement from `data`.
    ///
    /// The loss is the mean squared error over every channel of the batch.
    /// A non-finite loss or gradient leaves the weights untouched and
    /// returns the batch description instead.
    pub fn step(&mut self, data: &[TrainSample]) -> Result<std::result::Result<StepReport, NanDump>> {
        if data.is_empty() {
            return Err(Error::InvalidData("no training samples".into()));
        }
        let mut rng = self.step_rng();
        let mut indices = Vec::with_capacity(self.config.batch_size);
        let mut examples = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let j = rng.random_range(0..data.len());
            let s = &data[j];
            examples.push(draw_training_example(&s.points, &s.condition, &self.sched, &mut rng, self.config.cond_dropout)?);
            indices.push(j);
        }
        let total: usize = examples.iter().map(|e| e.x_t.len()).sum();
        let scale = 1.0 / total as f64;
        let model = &self.model;
        let results: Vec<(f64, Grads)> =
            examples.par_iter().map(|ex| sample_grads(model, ex, scale)).collect::<Result<_>>()?;
        let mut grads = Grads::zeros(model.params());
        let mut sse = 0.0;
        for (s, g) in &results {
            sse += s;
            grads.add_assign(g);
        }
        let loss = sse * scale;
        if !loss.is_finite() || !grads.is_finite() {
            return Ok(Err(NanDump {
                step: self.step,
                indices,
                timesteps: examples.iter().map(|e| e.t).collect(),
                conditions: examples.iter().map(|e| e.condition.to_array()).collect(),
                null_condition: examples.iter().map(|e| e.condition.is_null).collect(),
                losses: results.iter().map(|r| r.0).collect(),
            }));
        }
        self.adam.update(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(Ok(StepReport { step: self.step, loss }))
    }

    /// Parameters, optimizer moments, and the step counter; `meta` gains `step` and `train`.
    pub fn to_checkpoint(&self, mut meta: serde_json::Map<String, serde_json::Value>) -> Result<Checkpoint> {
        meta.insert("step".into(), self.step.into());
        meta.insert("train".into(), serde_json::to_value(self.config)?);
        let mut ck = self.model.to_checkpoint(serde_json::Value::Object(meta))?;
        ck.tensors.extend(self.adam.state_tensors(self.model.params()));
        Ok(ck)
    }

    /// Restores a run; `config` may extend `steps` but must otherwise match the stored run.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = Denoiser::from_checkpoint(ck)?;
        let step = ck.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| Error::Contract("checkpoint has no step counter".into()))?;
        if let Some(stored) = ck.meta.get("train") {
            let stored: TrainConfig = serde_json::from_value(stored.clone())?;
            if (TrainConfig { steps: config.steps, ..stored }) != config {
                return Err(Error::Contract("resume config differs from the checkpointed run".into()));
            }
        }
        let adam = Adam::from_state(config.adam, step, model.params(), |k| ck.tensor(k).cloned())?;
        Ok(Self { sched: config.schedule.build()?, model, adam, step, config })
    }
}
