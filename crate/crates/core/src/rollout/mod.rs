//! The temporal engine: teacher-forced training rollouts, generation with
//! learned priors after the conditioning window, and the optimizer loop.
//!
//! Frames are indexed from zero here; the first predicted frame is the
//! second frame of the clip (index 1), recorded as `first_pred_index = 2`
//! in one-based terms.

mod optim;
mod train;

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{reparameterize_var, GaussianVars, Model, SkipAverage, Variant};
use crate::tensor::{Real, Tensor};
use crate::warp::{combine_var, inverse_warp_var};

pub use optim::{clip_global_norm, scheduled_sampling_prob, Adam, AdamConfig};
pub use train::{
    evaluate_batch_loss, train_loop, validation_psnr, SinkEvent, TrainConfig, TrainLog,
    TrainRecord, TrainSummary, Trainer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub t_cond: usize,
    pub t_pred: usize,
    /// One-based index of the first predicted frame; only 2 is supported.
    pub first_pred_index: usize,
    /// Replaces the mask network with a constant appearance weight.
    pub mask_override: Option<f64>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            t_cond: 5,
            t_pred: 10,
            first_pred_index: 2,
            mask_override: None,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        let min_cond = match variant {
            Variant::Baseline => 1,
            Variant::Slamp => 2,
        };
        if self.t_cond < min_cond {
            return Err(Error::Config(format!(
                "t_cond must be at least {min_cond} for the {variant} variant"
            )));
        }
        if self.t_pred == 0 {
            return Err(Error::Config("t_pred must be positive".into()));
        }
        if self.first_pred_index != 2 {
            return Err(Error::Config(
                "first_pred_index: only 2 (predict from the second frame) is supported".into(),
            ));
        }
        if let Some(m) = self.mask_override {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config("mask_override must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Frames consumed by one rollout.
    pub fn frames(&self) -> usize {
        self.t_cond + self.t_pred
    }

    /// Predicted steps: every frame after the first.
    pub fn steps(&self) -> usize {
        self.frames() - 1
    }
}

/// Batched frames addressable by time index, each `[n, c, h, w]`.
pub trait FrameSource<T: Real> {
    fn batch(&self) -> usize;
    fn len(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Tensor<T>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct BatchFrames<T> {
    frames: Vec<Tensor<T>>,
}

impl<T: Real> BatchFrames<T> {
    pub fn new(frames: Vec<Tensor<T>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Precondition("no frames".into()))?;
        if first.shape().len() != 4 {
            return Err(Error::Shape(format!("frames must be [n, c, h, w], got {:?}", first.shape())));
        }
        for f in &frames {
            f.expect_shape(first.shape())?;
        }
        Ok(Self { frames })
    }

    /// Stacks clips of shape `[t, c, h, w]` into a batch.
    pub fn from_clips(clips: &[&Tensor<f32>]) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Precondition("empty batch".into()))?;
        let t = first.dim(0);
        let mut frames = Vec::with_capacity(t);
        for i in 0..t {
            let rows: Vec<Tensor<T>> = clips
                .iter()
                .map(|c| {
                    c.expect_shape(first.shape())?;
                    Ok(c.index_outer(i).cast())
                })
                .collect::<Result<_>>()?;
            frames.push(Tensor::stack(&rows)?);
        }
        Self::new(frames)
    }

    /// `n` copies of one clip.
    pub fn repeat(clip: &Tensor<f32>, n: usize) -> Result<Self> {
        Self::from_clips(&vec![clip; n])
    }

    /// Replaces one frame, e.g. to plant a sentinel.
    pub fn set_frame(&mut self, index: usize, frame: Tensor<T>) -> Result<()> {
        frame.expect_shape(self.frames[0].shape())?;
        self.frames[index] = frame;
        Ok(())
    }
}

impl<T: Real> FrameSource<T> for BatchFrames<T> {
    fn batch(&self) -> usize {
        self.frames[0].dim(0)
    }

    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<Tensor<T>> {
        self.frames.get(index).cloned().ok_or(Error::Length {
            expected: index + 1,
            found: self.frames.len(),
        })
    }
}

/// A view that refuses and counts reads at or beyond `visible`.
pub struct GuardedFrames<'a, T: Real> {
    inner: &'a dyn FrameSource<T>,
    visible: usize,
    violations: Cell<usize>,
}

impl<'a, T: Real> GuardedFrames<'a, T> {
    pub fn new(inner: &'a dyn FrameSource<T>, visible: usize) -> Self {
        Self {
            inner,
            visible,
            violations: Cell::new(0),
        }
    }

    pub fn violations(&self) -> usize {
        self.violations.get()
    }
}

impl<T: Real> FrameSource<T> for GuardedFrames<'_, T> {
    fn batch(&self) -> usize {
        self.inner.batch()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn frame(&self, index: usize) -> Result<Tensor<T>> {
        if index >= self.visible {
            self.violations.set(self.violations.get() + 1);
            return Err(Error::FutureAccess {
                index,
                visible: self.visible,
            });
        }
        self.inner.frame(index)
    }
}

/// Tape handles produced at one prediction step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub x_p: Var,
    pub x_f: Var,
    pub x_hat: Var,
    pub flow: Var,
    pub mask: Var,
    pub posterior_p: Option<GaussianVars>,
    pub prior_p: GaussianVars,
    pub posterior_f: Option<GaussianVars>,
    pub prior_f: Option<GaussianVars>,
    pub z_p: Var,
    pub z_f: Option<Var>,
}

pub struct RolloutOutput<T: Real> {
    pub graph: Graph<T>,
    pub steps: Vec<StepVars>,
    /// Ground-truth frame per step; absent for generation.
    pub targets: Option<Vec<Var>>,
}

impl<T: Real> RolloutOutput<T> {
    pub fn values(&self, pick: impl Fn(&StepVars) -> Var) -> Vec<Tensor<T>> {
        self.steps
            .iter()
            .map(|s| self.graph.value(pick(s)).clone())
            .collect()
    }

    pub fn predictions(&self) -> Vec<Tensor<T>> {
        self.values(|s| s.x_hat)
    }
}

/// Predicted frames of a generation plus the full rollout behind them.
pub struct Generation<T: Real> {
    /// `t_pred` frames, each `[n, c, h, w]`.
    pub frames: Vec<Tensor<T>>,
    pub rollout: RolloutOutput<T>,
}

impl<T: Real> Generation<T> {
    /// Row `r` as a clip `[t_pred, c, h, w]`.
    pub fn clip(&self, r: usize) -> Tensor<T> {
        let rows: Vec<Tensor<T>> = self.frames.iter().map(|f| f.index_outer(r)).collect();
        Tensor::stack(&rows).expect("homogeneous frames")
    }
}

fn normal_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("shape")
}

enum Noise<'a, R> {
    Shared(&'a mut R),
    PerRow(&'a mut [R]),
}

impl<R: Rng> Noise<'_, R> {
    fn draw<T: Real>(&mut self, n: usize, d: usize) -> Tensor<T> {
        match self {
            Noise::Shared(rng) => normal_tensor(*rng, &[n, d]),
            Noise::PerRow(rngs) => {
                let rows: Vec<Tensor<T>> = rngs.iter_mut().map(|r| normal_tensor(r, &[d])).collect();
                Tensor::stack(&rows).expect("shape")
            }
        }
    }
}

/// Replaces rows of `truth` flagged in `flags` by the matching rows of `generated`.
fn mix_rows<T: Real>(truth: &Tensor<T>, generated: &Tensor<T>, flags: &[bool]) -> Tensor<T> {
    let row = truth.len() / truth.dim(0);
    let mut out = truth.clone();
    for (r, &use_gen) in flags.iter().enumerate() {
        if use_gen {
            out.data_mut()[r * row..(r + 1) * row]
                .copy_from_slice(&generated.data()[r * row..(r + 1) * row]);
        }
    }
    out
}

fn run<T: Real, R: Rng>(
    model: &Model<T>,
    source: &dyn FrameSource<T>,
    cfg: &RolloutConfig,
    training: bool,
    mut noise: Noise<'_, R>,
    use_generated: Option<&[Vec<bool>]>,
) -> Result<RolloutOutput<T>> {
    cfg.validate(model.variant())?;
    let steps = cfg.steps();
    if training && source.len() < cfg.frames() {
        return Err(Error::Precondition(format!(
            "clip has {} frames, rollout needs {}",
            source.len(),
            cfg.frames()
        )));
    }
    if !training && source.len() < cfg.t_cond {
        return Err(Error::Precondition(format!(
            "{} conditioning frames available, {} required",
            source.len(),
            cfg.t_cond
        )));
    }
    if let Some(flags) = use_generated {
        if flags.len() != steps {
            return Err(Error::Length {
                expected: steps,
                found: flags.len(),
            });
        }
    }
    let n = source.batch();
    let mc = &model.config;
    let mut g = Graph::new();
    let mut state = model.initial_state(&mut g, n);
    let first = source.frame(0)?;
    first.expect_shape(&[n, mc.channels, mc.image_size, mc.image_size])?;
    let mut used: Vec<Var> = vec![g.input(first)];
    let mut skips_p = SkipAverage::default();
    let mut skips_f = SkipAverage::default();
    let mut out_steps: Vec<StepVars> = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);

    for j in 0..steps {
        let i = j + 1;
        if let (Some(flags), Some(last)) = (use_generated, out_steps.last()) {
            let row_flags = &flags[j];
            if row_flags.len() != n {
                return Err(Error::Length {
                    expected: n,
                    found: row_flags.len(),
                });
            }
            if row_flags.iter().any(|&b| b) {
                let mixed = mix_rows(g.value(used[i - 1]), g.value(last.x_hat), row_flags);
                used[i - 1] = g.input(mixed);
            }
        }
        let prev = used[i - 1];
        let prev2 = if i >= 2 { used[i - 2] } else { prev };
        let observed = training || i < cfg.t_cond;
        let target = if observed {
            Some(g.input(source.frame(i)?))
        } else {
            None
        };

        let (h_prev, sk) = model.pixel_encode(&mut g, prev)?;
        skips_p.update(&mut g, &sk)?;
        let prior_p = model.prior_p(&mut g, &mut state, h_prev)?;
        let posterior_p = match target {
            Some(t) => {
                let (h_t, _) = model.pixel_encode(&mut g, t)?;
                Some(model.posterior_p(&mut g, &mut state, h_t)?)
            }
            None => None,
        };
        let eps = noise.draw(n, mc.latent_pixel);
        let z_p = reparameterize_var(&mut g, posterior_p.unwrap_or(prior_p), eps)?;
        let g_p = model.predict_p(&mut g, &mut state, h_prev, z_p)?;
        let x_p = model.appearance_decode(&mut g, g_p, skips_p.get()?)?;

        let (flow, prior_f, posterior_f, z_f) = match model.variant() {
            Variant::Baseline => (model.flow_decode(&mut g, g_p, skips_p.get()?)?, None, None, None),
            Variant::Slamp => {
                let (hf_prev, fsk) = model.motion_encode(&mut g, prev2, prev)?;
                skips_f.update(&mut g, &fsk)?;
                let prior_f = model.prior_f(&mut g, &mut state, hf_prev)?;
                let posterior_f = match target {
                    Some(t) => {
                        let (hf_t, _) = model.motion_encode(&mut g, prev, t)?;
                        Some(model.posterior_f(&mut g, &mut state, hf_t)?)
                    }
                    None => None,
                };
                let eps = noise.draw(n, mc.latent_flow);
                let z_f = reparameterize_var(&mut g, posterior_f.unwrap_or(prior_f), eps)?;
                let g_f = model.predict_f(&mut g, &mut state, hf_prev, z_f)?;
                let flow = model.flow_decode(&mut g, g_f, skips_f.get()?)?;
                (flow, Some(prior_f), posterior_f, Some(z_f))
            }
        };
        let x_f = inverse_warp_var(&mut g, prev, flow)?;
        let mask = match cfg.mask_override {
            Some(m) => g.input(Tensor::full(&[n, 1, mc.image_size, mc.image_size], T::of(m))),
            None => model.mask_predict(&mut g, x_p, x_f)?,
        };
        let x_hat = combine_var(&mut g, x_p, x_f, mask)?;

        match target {
            Some(t) => {
                used.push(t);
                targets.push(t);
            }
            None => used.push(x_hat),
        }
        out_steps.push(StepVars {
            x_p,
            x_f,
            x_hat,
            flow,
            mask,
            posterior_p,
            prior_p,
            posterior_f,
            prior_f,
            z_p,
            z_f,
        });
    }
    Ok(RolloutOutput {
        graph: g,
        steps: out_steps,
        targets: training.then_some(targets),
    })
}

/// Posterior-driven rollout over a full clip.
///
/// `use_generated[j][r]` feeds row `r`'s own previous prediction (detached)
/// instead of the ground-truth frame as the previous frame of step `j`;
/// entries for step 0 are ignored since no prediction exists yet.
pub fn train_rollout<T: Real, R: Rng>(
    model: &Model<T>,
    source: &dyn FrameSource<T>,
    cfg: &RolloutConfig,
    rng: &mut R,
    use_generated: Option<&[Vec<bool>]>,
) -> Result<RolloutOutput<T>> {
    run(model, source, cfg, true, Noise::Shared(rng), use_generated)
}

/// Samples `t_pred` future frames: posteriors while ground truth is visible,
/// learned priors afterwards. Row `r` draws its noise from `rngs[r]` only.
pub fn generate<T: Real, R: Rng>(
    model: &Model<T>,
    conditioning: &dyn FrameSource<T>,
    cfg: &RolloutConfig,
    rngs: &mut [R],
) -> Result<Generation<T>> {
    if rngs.len() != conditioning.batch() {
        return Err(Error::Length {
            expected: conditioning.batch(),
            found: rngs.len(),
        });
    }
    let rollout = run(model, conditioning, cfg, false, Noise::PerRow(rngs), None)?;
    let skip = cfg.t_cond - 1;
    let frames = rollout.steps[skip..]
        .iter()
        .map(|s| rollout.graph.value(s.x_hat).clone())
        .collect();
    Ok(Generation { frames, rollout })
}
