use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{scheduled_sampling_prob, Adam, AdamConfig};
use super::{generate, train_rollout, BatchFrames, FrameSource, GuardedFrames, RolloutConfig};
use crate::checkpoint::Checkpoint;
use crate::data::Video;
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::loss::{elbo_baseline, elbo_slamp, Elbo, LossBreakdown};
use crate::model::{Model, Variant};
use crate::rollout::RolloutOutput;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub updates_per_epoch: usize,
    pub optimizer: AdamConfig,
    pub scheduled_sampling: bool,
    /// Decay constant `k` of the ground-truth feeding probability.
    pub sampling_decay: f64,
    pub seed: u64,
    /// Validation clips scored after each epoch (0 disables validation).
    pub validation_videos: usize,
    pub log_every: usize,
    /// Draw a random window of each clip instead of its first frames.
    pub random_crop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 1,
            updates_per_epoch: 1000,
            optimizer: AdamConfig::default(),
            scheduled_sampling: false,
            sampling_decay: 3000.0,
            seed: 0,
            validation_videos: 32,
            log_every: 10,
            random_crop: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.updates_per_epoch == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size, updates_per_epoch and log_every must be positive".into(),
            ));
        }
        if !(self.sampling_decay > 0.0) {
            return Err(Error::Config("sampling_decay must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainRecord {
    Update {
        step: u64,
        epsilon: f64,
        grad_norm: f64,
        wall_time_s: f64,
        #[serde(flatten)]
        losses: LossBreakdown,
    },
    Validation {
        step: u64,
        val_psnr: f64,
        improved: bool,
        wall_time_s: f64,
    },
}

pub type TrainLog = Vec<TrainRecord>;

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_step: u64,
    pub best_val_psnr: Option<f64>,
    pub last_losses: Option<LossBreakdown>,
    pub log: TrainLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SinkEvent {
    /// Validation PSNR improved.
    Best,
    /// End of an epoch.
    Latest,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn objective<T: Real>(variant: Variant, out: &mut RolloutOutput<T>, model: &Model<T>) -> Result<Elbo> {
    let (beta, w) = (model.config.beta, model.config.recon_weights);
    match variant {
        Variant::Baseline => elbo_baseline(out, beta, w),
        Variant::Slamp => elbo_slamp(out, beta, w),
    }
}

/// Loss of a teacher-forced rollout with noise drawn from `seed`.
pub fn evaluate_batch_loss<T: Real>(
    model: &Model<T>,
    batch: &dyn FrameSource<T>,
    rollout: &RolloutConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = train_rollout(model, batch, rollout, &mut rng, None)?;
    Ok(objective(model.variant(), &mut out, model)?.breakdown)
}

/// Mean PSNR of one sampled future per clip against the held-out frames.
pub fn validation_psnr(
    model: &Model<f32>,
    videos: &[&Video],
    rollout: &RolloutConfig,
    seed: u64,
) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Precondition("no validation clips".into()));
    }
    let clips: Vec<Tensor<f32>> = videos
        .iter()
        .map(|v| v.window(0, rollout.frames()))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = clips.iter().collect();
    let batch = BatchFrames::<f32>::from_clips(&refs)?;
    let guard = GuardedFrames::new(&batch, rollout.t_cond);
    let mut rngs: Vec<ChaCha8Rng> = (0..clips.len() as u64).map(|i| step_rng(seed, i)).collect();
    let gen = generate(model, &guard, rollout, &mut rngs)?;
    let mut total = 0.0;
    for (r, clip) in clips.iter().enumerate() {
        let pred = gen.clip(r);
        for k in 0..rollout.t_pred {
            total += psnr(&pred.index_outer(k), &clip.index_outer(rollout.t_cond + k), 1.0)?;
        }
    }
    Ok(total / (clips.len() * rollout.t_pred) as f64)
}

/// Model, optimizer and progress counters of a training run.
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub global_step: u64,
    pub best_val_psnr: Option<f64>,
}

impl Trainer {
    pub fn new(model: Model<f32>, optimizer: AdamConfig) -> Self {
        let optimizer = Adam::new(optimizer, &model.params);
        Self {
            model,
            optimizer,
            global_step: 0,
            best_val_psnr: None,
        }
    }

    pub fn resume(ckpt: &Checkpoint, optimizer: AdamConfig) -> Result<Self> {
        let model = ckpt.build_model::<f32>()?;
        let optimizer = match &ckpt.optimizer {
            Some(state) => Adam::import(optimizer, &model.params, state)?,
            None => Adam::new(optimizer, &model.params),
        };
        let best_val_psnr = ckpt.metadata.get("best_val_psnr").and_then(|v| v.as_f64());
        Ok(Self {
            model,
            optimizer,
            global_step: ckpt.global_step,
            best_val_psnr,
        })
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            Some(self.optimizer.export(&self.model.params)),
            self.global_step,
            serde_json::json!({ "seed": seed, "best_val_psnr": self.best_val_psnr }),
        )
    }

    fn draw_batch(&self, videos: &[Video], rollout: &RolloutConfig, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<BatchFrames<f32>> {
        let b = cfg.batch_size.min(videos.len());
        let picks = sample(rng, videos.len(), b);
        let clips: Vec<Tensor<f32>> = picks
            .iter()
            .map(|i| {
                let v = &videos[i];
                let spare = v.len().saturating_sub(rollout.frames());
                let start = if cfg.random_crop && spare > 0 {
                    rng.random_range(0..=spare)
                } else {
                    0
                };
                v.window(start, rollout.frames())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<f32>> = clips.iter().collect();
        BatchFrames::from_clips(&refs)
    }

    /// One optimizer update; returns the losses and the pre-clip gradient norm.
    pub fn update(
        &mut self,
        videos: &[Video],
        rollout: &RolloutConfig,
        cfg: &TrainConfig,
    ) -> Result<(LossBreakdown, f64, f64)> {
        let mut rng = step_rng(cfg.seed, self.global_step);
        let batch = self.draw_batch(videos, rollout, cfg, &mut rng)?;
        let epsilon = if cfg.scheduled_sampling {
            scheduled_sampling_prob(self.global_step, cfg.sampling_decay)
        } else {
            1.0
        };
        let flags: Option<Vec<Vec<bool>>> = cfg.scheduled_sampling.then(|| {
            (0..rollout.steps())
                .map(|j| {
                    (0..batch.batch())
                        .map(|_| j > 0 && !rng.random_bool(epsilon))
                        .collect()
                })
                .collect()
        });
        let mut out = train_rollout(&self.model, &batch, rollout, &mut rng, flags.as_deref())?;
        let elbo = objective(self.model.variant(), &mut out, &self.model)?;
        if !elbo.breakdown.is_finite() {
            return Err(Error::NonFinite {
                step: self.global_step,
                detail: serde_json::to_string(&elbo.breakdown)?,
            });
        }
        let grads = out.graph.backward(elbo.total)?.into_params();
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                step: self.global_step,
                detail: format!("non-finite gradient; losses {}", serde_json::to_string(&elbo.breakdown)?),
            });
        }
        let norm = self.optimizer.update(&mut self.model.params, grads);
        self.global_step += 1;
        Ok((elbo.breakdown, norm, epsilon))
    }
}

/// Runs `epochs × updates_per_epoch` updates from the trainer's current step,
/// writing NDJSON records to `log` and checkpoints to `sink`.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &[Video],
    val: &[Video],
    rollout: &RolloutConfig,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(SinkEvent, &Checkpoint) -> Result<()>,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    cfg.validate()?;
    rollout.validate(trainer.model.variant())?;
    if train.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let started = Instant::now();
    let mut records = Vec::new();
    let mut last = None;
    let total = (cfg.epochs * cfg.updates_per_epoch) as u64;
    let end = (trainer.global_step / cfg.updates_per_epoch as u64) * cfg.updates_per_epoch as u64 + total;
    let mut emit = |rec: TrainRecord, records: &mut Vec<TrainRecord>| -> Result<()> {
        serde_json::to_writer(&mut *log, &rec)?;
        log.write_all(b"\n")?;
        records.push(rec);
        Ok(())
    };
    while trainer.global_step < end {
        let (losses, grad_norm, epsilon) = trainer.update(train, rollout, cfg)?;
        last = Some(losses);
        let step = trainer.global_step;
        if step % cfg.log_every as u64 == 0 || step == end {
            let rec = TrainRecord::Update {
                step,
                epsilon,
                grad_norm,
                wall_time_s: started.elapsed().as_secs_f64(),
                losses,
            };
            emit(rec, &mut records)?;
        }
        if step % cfg.updates_per_epoch as u64 == 0 || step == end {
            if cfg.validation_videos > 0 && !val.is_empty() {
                let subset: Vec<&Video> = val.iter().take(cfg.validation_videos).collect();
                let score = validation_psnr(&trainer.model, &subset, rollout, cfg.seed ^ 0x5eed)?;
                let improved = trainer.best_val_psnr.is_none_or(|b| score > b);
                if improved {
                    trainer.best_val_psnr = Some(score);
                    sink(SinkEvent::Best, &trainer.checkpoint(cfg.seed))?;
                }
                let rec = TrainRecord::Validation {
                    step,
                    val_psnr: score,
                    improved,
                    wall_time_s: started.elapsed().as_secs_f64(),
                };
                emit(rec, &mut records)?;
            }
            sink(SinkEvent::Latest, &trainer.checkpoint(cfg.seed))?;
        }
    }
    Ok(TrainSummary {
        final_step: trainer.global_step,
        best_val_psnr: trainer.best_val_psnr,
        last_losses: last,
        log: records,
    })
}
