//! Learnable components: frame and motion encoders, recurrent Gaussian heads,
//! recurrent frame predictors, and the appearance, flow and mask decoders.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::ReconWeights;
use crate::nn::{Conv, Linear, LstmCell, LstmState, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One latent stream whose predictor feeds all three decoders.
    Baseline,
    /// Separate pixel and flow streams with a motion encoder.
    Slamp,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Slamp => "slamp",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "slamp" => Ok(Variant::Slamp),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Square frames of `image_size × image_size` pixels.
    pub image_size: usize,
    pub channels: usize,
    /// Width `g` of encoder features and predictor outputs.
    pub feature_dim: usize,
    pub latent_pixel: usize,
    pub latent_flow: usize,
    pub rnn_width: usize,
    pub head_layers: usize,
    pub predictor_layers: usize,
    /// Output channels of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    pub mask_width: usize,
    pub se_ratio: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Flow bound in pixels; half the image size when absent.
    pub max_displacement: Option<f64>,
    pub beta: f64,
    pub recon_weights: ReconWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Slamp,
            image_size: 32,
            channels: 1,
            feature_dim: 128,
            latent_pixel: 20,
            latent_flow: 20,
            rnn_width: 128,
            head_layers: 1,
            predictor_layers: 2,
            encoder_channels: vec![8, 16, 32],
            mask_width: 8,
            se_ratio: 4,
            logvar_min: -10.0,
            logvar_max: 10.0,
            max_displacement: None,
            beta: 1e-4,
            recon_weights: ReconWeights::default(),
        }
    }
}

impl ModelConfig {
    /// Full-scale settings: 64×64 frames, 256-unit LSTMs.
    pub fn paper() -> Self {
        Self {
            image_size: 64,
            rnn_width: 256,
            encoder_channels: vec![32, 64, 128, 256],
            mask_width: 32,
            ..Self::default()
        }
    }

    /// A very small network for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            feature_dim: 6,
            latent_pixel: 3,
            latent_flow: 3,
            rnn_width: 5,
            encoder_channels: vec![2, 3],
            mask_width: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("feature_dim", self.feature_dim),
            ("latent_pixel", self.latent_pixel),
            ("latent_flow", self.latent_flow),
            ("rnn_width", self.rnn_width),
            ("head_layers", self.head_layers),
            ("predictor_layers", self.predictor_layers),
            ("mask_width", self.mask_width),
            ("se_ratio", self.se_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config(
                "encoder_channels must be a non-empty list of positive widths".into(),
            ));
        }
        let factor = 1usize << self.encoder_channels.len();
        if self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by {factor} ({} stride-2 stages)",
                self.image_size,
                self.encoder_channels.len()
            )));
        }
        if self.mask_width < self.se_ratio {
            return Err(Error::Config(format!(
                "mask_width {} is smaller than the squeeze ratio {}",
                self.mask_width, self.se_ratio
            )));
        }
        if !(self.logvar_min < self.logvar_max) {
            return Err(Error::Config("logvar_min must be below logvar_max".into()));
        }
        if let Some(d) = self.max_displacement {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config("max_displacement must be positive".into()));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be a nonnegative number".into()));
        }
        Ok(())
    }

    pub fn max_disp(&self) -> f64 {
        self.max_displacement
            .unwrap_or(self.image_size as f64 / 2.0)
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// True when both configs build identical parameter sets.
    pub fn same_architecture(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            beta: 0.0,
            recon_weights: ReconWeights::default(),
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<T> {
    pub mean: Tensor<T>,
    pub log_variance: Tensor<T>,
}

impl<T: Real> GaussianParams<T> {
    pub fn new(mean: Tensor<T>, log_variance: Tensor<T>) -> Result<Self> {
        let p = Self { mean, log_variance };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.log_variance.expect_shape(self.mean.shape())?;
        if !self.mean.is_finite() || !self.log_variance.is_finite() {
            return Err(Error::Precondition("non-finite Gaussian parameters".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Tape handles of a Gaussian's mean and log-variance.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_variance: Var,
}

impl GaussianVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> GaussianParams<T> {
        GaussianParams {
            mean: g.value(self.mean).clone(),
            log_variance: g.value(self.log_variance).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Pixel,
    Flow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample<T> {
    pub values: Tensor<T>,
    pub stream: Stream,
}

/// `z = mean + exp(log_variance / 2) ⊙ noise`.
pub fn reparameterize<T: Real>(
    p: &GaussianParams<T>,
    noise: &Tensor<T>,
    stream: Stream,
) -> Result<LatentSample<T>> {
    noise.expect_shape(p.mean.shape())?;
    let half = T::of(0.5);
    let std = p.log_variance.map(|lv| (lv * half).exp());
    let scaled = std.zip_map(noise, |s, e| s * e)?;
    Ok(LatentSample {
        values: p.mean.zip_map(&scaled, |m, s| m + s)?,
        stream,
    })
}

pub fn reparameterize_var<T: Real>(
    g: &mut Graph<T>,
    p: GaussianVars,
    noise: Tensor<T>,
) -> Result<Var> {
    let half = g.scale(p.log_variance, 0.5);
    let std = g.exp(half);
    let eps = g.input(noise);
    let scaled = g.mul(std, eps)?;
    g.add(p.mean, scaled)
}

/// Element-wise mean of every skip set in `history`, stage by stage.
pub fn skip_running_average<T: Real>(history: &[Vec<Tensor<T>>]) -> Result<Vec<Tensor<T>>> {
    let first = history
        .first()
        .ok_or_else(|| Error::Precondition("skip history is empty".into()))?;
    let k = T::of(history.len() as f64);
    let mut out = Vec::with_capacity(first.len());
    for stage in 0..first.len() {
        let mut acc = Tensor::zeros(first[stage].shape());
        for entry in history {
            if entry.len() != first.len() {
                return Err(Error::Shape("skip sets differ in stage count".into()));
            }
            entry[stage].expect_shape(first[stage].shape())?;
            acc.add_assign(&entry[stage]);
        }
        out.push(acc.map(|v| v / k));
    }
    Ok(out)
}

/// Incremental mean of skip sets with O(1) state per stage.
#[derive(Clone, Debug, Default)]
pub struct RunningMean<T> {
    count: usize,
    mean: Vec<Tensor<T>>,
}

impl<T: Real> RunningMean<T> {
    pub fn push(&mut self, skips: &[Tensor<T>]) -> Result<()> {
        self.count += 1;
        if self.count == 1 {
            self.mean = skips.to_vec();
            return Ok(());
        }
        if skips.len() != self.mean.len() {
            return Err(Error::Shape("skip sets differ in stage count".into()));
        }
        let k = T::of(self.count as f64);
        for (m, s) in self.mean.iter_mut().zip(skips) {
            *m = m.zip_map(s, |a, b| a + (b - a) / k)?;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Result<&[Tensor<T>]> {
        if self.count == 0 {
            return Err(Error::Precondition("skip history is empty".into()));
        }
        Ok(&self.mean)
    }
}

/// The running skip mean on the tape, so gradients reach every encoding.
#[derive(Clone, Debug, Default)]
pub struct SkipAverage {
    count: usize,
    mean: Vec<Var>,
}

impl SkipAverage {
    pub fn update<T: Real>(&mut self, g: &mut Graph<T>, skips: &[Var]) -> Result<()> {
        self.count += 1;
        if self.count == 1 {
            self.mean = skips.to_vec();
            return Ok(());
        }
        let k = self.count as f64;
        for (m, &s) in self.mean.iter_mut().zip(skips) {
            let old = g.scale(*m, (k - 1.0) / k);
            let new = g.scale(s, 1.0 / k);
            *m = g.add(old, new)?;
        }
        Ok(())
    }

    pub fn get(&self) -> Result<&[Var]> {
        if self.count == 0 {
            return Err(Error::Precondition("skip history is empty".into()));
        }
        Ok(&self.mean)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Conv>,
    out: Linear,
    input_channels: usize,
    size: usize,
}

impl Encoder {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_channels: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let mut cin = input_channels;
        let mut stages = Vec::new();
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            stages.push(Conv::new(store, &format!("{name}.conv{i}"), cin, c, 3, 2, rng));
            cin = c;
        }
        let res = cfg.image_size >> cfg.encoder_channels.len();
        let out = Linear::new(store, &format!("{name}.out"), cin * res * res, cfg.feature_dim, rng);
        Self {
            stages,
            out,
            input_channels,
            size: cfg.image_size,
        }
    }

    /// `[n, c, h, w]` → (`[n, g]` features, one skip tensor per stage).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let n = g.shape(x)[0];
        g.value(x)
            .expect_shape(&[n, self.input_channels, self.size, self.size])?;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let c = conv.forward(g, store, h)?;
            h = g.leaky_relu(c, LEAKY_SLOPE);
            skips.push(h);
        }
        let flat_len = g.value(h).len() / n;
        let flat = g.reshape(h, &[n, flat_len])?;
        let feat = self.out.forward(g, store, flat)?;
        Ok((g.tanh(feat), skips))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    input: Linear,
    stages: Vec<Conv>,
    start: [usize; 3],
}

impl Decoder {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        out_channels: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let chans = &cfg.encoder_channels;
        let last = *chans.last().expect("validated");
        let res = cfg.image_size >> chans.len();
        let input = Linear::new(store, &format!("{name}.input"), cfg.feature_dim, last * res * res, rng);
        let stages = (0..chans.len())
            .map(|s| {
                let cout = if s == 0 { out_channels } else { chans[s - 1] };
                Conv::new(store, &format!("{name}.conv{s}"), 2 * chans[s], cout, 3, 1, rng)
            })
            .collect();
        Self {
            input,
            stages,
            start: [last, res, res],
        }
    }

    /// Pre-activation output `[n, out_channels, h, w]` from features and skips.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feat: Var,
        skips: &[Var],
    ) -> Result<Var> {
        if skips.len() != self.stages.len() {
            return Err(Error::Shape(format!(
                "decoder expects {} skip stages, got {}",
                self.stages.len(),
                skips.len()
            )));
        }
        let n = g.shape(feat)[0];
        let lin = self.input.forward(g, store, feat)?;
        let [c, h, w] = self.start;
        let grid = g.reshape(lin, &[n, c, h, w])?;
        let mut x = g.leaky_relu(grid, LEAKY_SLOPE);
        for s in (0..self.stages.len()).rev() {
            let joined = g.concat(&[x, skips[s]])?;
            let up = g.upsample2x(joined)?;
            x = self.stages[s].forward(g, store, up)?;
            if s > 0 {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    down: Linear,
    up: Linear,
}

impl SqueezeExcite {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let d = self.down.forward(g, store, pooled)?;
        let d = g.relu(d);
        let u = self.up.forward(g, store, d)?;
        let s = g.sigmoid(u);
        g.channel_scale(x, s)
    }
}

/// Five stride-1 convolutions with squeeze-excitation after the second and fourth.
#[derive(Clone, Debug)]
pub struct MaskNet {
    convs: Vec<Conv>,
    excite: Vec<SqueezeExcite>,
}

impl MaskNet {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let w = cfg.mask_width;
        let ins = [2 * cfg.channels, w, w, w, w];
        let outs = [w, w, w, w, 1];
        let convs = (0..5)
            .map(|i| Conv::new(store, &format!("mask.conv{i}"), ins[i], outs[i], 3, 1, rng))
            .collect();
        let excite = (0..2)
            .map(|i| SqueezeExcite {
                down: Linear::new(store, &format!("mask.se{i}.down"), w, w / cfg.se_ratio, rng),
                up: Linear::new(store, &format!("mask.se{i}.up"), w / cfg.se_ratio, w, rng),
            })
            .collect();
        Self { convs, excite }
    }

    /// Appearance weight in (0, 1), shape `[n, 1, h, w]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xp: Var,
        xf: Var,
    ) -> Result<Var> {
        let mut h = g.concat(&[xp, xf])?;
        for i in 0..4 {
            let c = self.convs[i].forward(g, store, h)?;
            h = g.leaky_relu(c, LEAKY_SLOPE);
            if i % 2 == 1 {
                h = self.excite[i / 2].forward(g, store, h)?;
            }
        }
        let logits = self.convs[4].forward(g, store, h)?;
        Ok(g.sigmoid(logits))
    }
}

#[derive(Clone, Debug)]
pub struct GaussianHead {
    embed: Linear,
    cells: Vec<LstmCell>,
    mean: Linear,
    logvar: Linear,
    range: (f64, f64),
}

impl GaussianHead {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        latent: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.rnn_width;
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), cfg.feature_dim, w, rng),
            cells: (0..cfg.head_layers)
                .map(|l| LstmCell::new(store, &format!("{name}.lstm{l}"), w, w, rng))
                .collect(),
            mean: Linear::new(store, &format!("{name}.mean"), w, latent, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), w, latent, rng),
            range: (cfg.logvar_min, cfg.logvar_max),
        }
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> Vec<LstmState> {
        self.cells.iter().map(|c| c.zero_state(g, batch)).collect()
    }

    /// One recurrent step from features `h`; log-variance is clamped.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        state: &mut [LstmState],
    ) -> Result<GaussianVars> {
        let mut x = self.embed.forward(g, store, h)?;
        for (cell, st) in self.cells.iter().zip(state.iter_mut()) {
            *st = cell.step(g, store, x, *st)?;
            x = st.h;
        }
        let mean = self.mean.forward(g, store, x)?;
        let raw = self.logvar.forward(g, store, x)?;
        let log_variance = g.clamp(raw, self.range.0, self.range.1);
        Ok(GaussianVars { mean, log_variance })
    }
}

#[derive(Clone, Debug)]
pub struct Predictor {
    embed: Linear,
    cells: Vec<LstmCell>,
    out: Linear,
}

impl Predictor {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        latent: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.rnn_width;
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), cfg.feature_dim + latent, w, rng),
            cells: (0..cfg.predictor_layers)
                .map(|l| LstmCell::new(store, &format!("{name}.lstm{l}"), w, w, rng))
                .collect(),
            out: Linear::new(store, &format!("{name}.out"), w, cfg.feature_dim, rng),
        }
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> Vec<LstmState> {
        self.cells.iter().map(|c| c.zero_state(g, batch)).collect()
    }

    /// `g_t` from the previous features and the current latent sample.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h_prev: Var,
        z: Var,
        state: &mut [LstmState],
    ) -> Result<Var> {
        let input = g.concat(&[h_prev, z])?;
        let mut x = self.embed.forward(g, store, input)?;
        for (cell, st) in self.cells.iter().zip(state.iter_mut()) {
            *st = cell.step(g, store, x, *st)?;
            x = st.h;
        }
        let out = self.out.forward(g, store, x)?;
        Ok(g.tanh(out))
    }
}

/// Modules of the flow stream; absent in the baseline.
#[derive(Clone, Debug)]
pub struct FlowStream {
    pub encoder: Encoder,
    pub posterior: GaussianHead,
    pub prior: GaussianHead,
    pub predictor: Predictor,
}

#[derive(Clone, Debug)]
pub struct Modules {
    pub pixel_encoder: Encoder,
    pub posterior: GaussianHead,
    pub prior: GaussianHead,
    pub predictor: Predictor,
    pub pixel_decoder: Decoder,
    pub flow_decoder: Decoder,
    pub mask: MaskNet,
    pub flow: Option<FlowStream>,
}

/// Recurrent activations of every head for one rollout.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub posterior_p: Vec<LstmState>,
    pub prior_p: Vec<LstmState>,
    pub predictor_p: Vec<LstmState>,
    pub posterior_f: Vec<LstmState>,
    pub prior_f: Vec<LstmState>,
    pub predictor_f: Vec<LstmState>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub modules: Modules,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let cfg = &config;
        let pixel_encoder = Encoder::new(&mut store, "pixel_enc", cfg.channels, cfg, rng);
        let posterior = GaussianHead::new(&mut store, "posterior_p", cfg.latent_pixel, cfg, rng);
        let prior = GaussianHead::new(&mut store, "prior_p", cfg.latent_pixel, cfg, rng);
        let predictor = Predictor::new(&mut store, "predictor_p", cfg.latent_pixel, cfg, rng);
        let pixel_decoder = Decoder::new(&mut store, "pixel_dec", cfg.channels, cfg, rng);
        let flow_decoder = Decoder::new(&mut store, "flow_dec", 2, cfg, rng);
        let mask = MaskNet::new(&mut store, cfg, rng);
        let flow = match cfg.variant {
            Variant::Baseline => None,
            Variant::Slamp => Some(FlowStream {
                encoder: Encoder::new(&mut store, "motion_enc", 2 * cfg.channels, cfg, rng),
                posterior: GaussianHead::new(&mut store, "posterior_f", cfg.latent_flow, cfg, rng),
                prior: GaussianHead::new(&mut store, "prior_f", cfg.latent_flow, cfg, rng),
                predictor: Predictor::new(&mut store, "predictor_f", cfg.latent_flow, cfg, rng),
            }),
        };
        Ok(Self {
            config,
            params: store,
            modules: Modules {
                pixel_encoder,
                posterior,
                prior,
                predictor,
                pixel_decoder,
                flow_decoder,
                mask,
                flow,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::default();
        for (_, name, t) in self.params.iter() {
            params.insert(name, t.cast());
        }
        Model {
            config: self.config.clone(),
            params,
            modules: self.modules.clone(),
        }
    }

    pub fn initial_state(&self, g: &mut Graph<T>, batch: usize) -> RecurrentState {
        let m = &self.modules;
        let (posterior_f, prior_f, predictor_f) = match &m.flow {
            Some(f) => (
                f.posterior.zero_state(g, batch),
                f.prior.zero_state(g, batch),
                f.predictor.zero_state(g, batch),
            ),
            None => (Vec::new(), Vec::new(), Vec::new()),
        };
        RecurrentState {
            posterior_p: m.posterior.zero_state(g, batch),
            prior_p: m.prior.zero_state(g, batch),
            predictor_p: m.predictor.zero_state(g, batch),
            posterior_f,
            prior_f,
            predictor_f,
        }
    }

    fn flow_stream(&self) -> Result<&FlowStream> {
        self.modules
            .flow
            .as_ref()
            .ok_or_else(|| Error::Precondition("the baseline has no flow stream".into()))
    }

    pub fn pixel_encode(&self, g: &mut Graph<T>, frame: Var) -> Result<(Var, Vec<Var>)> {
        self.modules.pixel_encoder.forward(g, &self.params, frame)
    }

    /// Encodes the channel-concatenated pair `(prev, cur)`.
    pub fn motion_encode(&self, g: &mut Graph<T>, prev: Var, cur: Var) -> Result<(Var, Vec<Var>)> {
        let f = self.flow_stream()?;
        let pair = g.concat(&[prev, cur])?;
        f.encoder.forward(g, &self.params, pair)
    }

    pub fn posterior_p(&self, g: &mut Graph<T>, st: &mut RecurrentState, h: Var) -> Result<GaussianVars> {
        self.modules.posterior.step(g, &self.params, h, &mut st.posterior_p)
    }

    pub fn prior_p(&self, g: &mut Graph<T>, st: &mut RecurrentState, h: Var) -> Result<GaussianVars> {
        self.modules.prior.step(g, &self.params, h, &mut st.prior_p)
    }

    pub fn posterior_f(&self, g: &mut Graph<T>, st: &mut RecurrentState, h: Var) -> Result<GaussianVars> {
        self.flow_stream()?
            .posterior
            .step(g, &self.params, h, &mut st.posterior_f)
    }

    pub fn prior_f(&self, g: &mut Graph<T>, st: &mut RecurrentState, h: Var) -> Result<GaussianVars> {
        self.flow_stream()?
            .prior
            .step(g, &self.params, h, &mut st.prior_f)
    }

    pub fn predict_p(
        &self,
        g: &mut Graph<T>,
        st: &mut RecurrentState,
        h_prev: Var,
        z: Var,
    ) -> Result<Var> {
        self.modules
            .predictor
            .step(g, &self.params, h_prev, z, &mut st.predictor_p)
    }

    pub fn predict_f(
        &self,
        g: &mut Graph<T>,
        st: &mut RecurrentState,
        h_prev: Var,
        z: Var,
    ) -> Result<Var> {
        self.flow_stream()?
            .predictor
            .step(g, &self.params, h_prev, z, &mut st.predictor_f)
    }

    /// Appearance prediction in [0, 1].
    pub fn appearance_decode(&self, g: &mut Graph<T>, feat: Var, skips: &[Var]) -> Result<Var> {
        let pre = self.modules.pixel_decoder.forward(g, &self.params, feat, skips)?;
        Ok(g.sigmoid(pre))
    }

    /// Two-channel displacement field bounded by the configured maximum.
    pub fn flow_decode(&self, g: &mut Graph<T>, feat: Var, skips: &[Var]) -> Result<Var> {
        let pre = self.modules.flow_decoder.forward(g, &self.params, feat, skips)?;
        let bounded = g.tanh(pre);
        Ok(g.scale(bounded, self.config.max_disp()))
    }

    pub fn mask_predict(&self, g: &mut Graph<T>, xp: Var, xf: Var) -> Result<Var> {
        self.modules.mask.forward(g, &self.params, xp, xf)
    }
}

/// Scalar parameter count of the appearance-only model sharing `cfg`'s sizes:
/// pixel encoder, one posterior, one prior, one predictor and the pixel decoder.
pub fn svg_parameter_count(cfg: &ModelConfig) -> usize {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::default();
    Encoder::new(&mut store, "pixel_enc", cfg.channels, cfg, &mut rng);
    GaussianHead::new(&mut store, "posterior_p", cfg.latent_pixel, cfg, &mut rng);
    GaussianHead::new(&mut store, "prior_p", cfg.latent_pixel, cfg, &mut rng);
    Predictor::new(&mut store, "predictor_p", cfg.latent_pixel, cfg, &mut rng);
    Decoder::new(&mut store, "pixel_dec", cfg.channels, cfg, &mut rng);
    store.scalar_count()
}

/// Parameter counts of a standalone flow decoder and mask network.
pub fn flow_and_mask_parameter_count(cfg: &ModelConfig) -> (usize, usize) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut flow = ParamStore::<f32>::default();
    Decoder::new(&mut flow, "flow_dec", 2, cfg, &mut rng);
    let mut mask = ParamStore::<f32>::default();
    MaskNet::new(&mut mask, cfg, &mut rng);
    (flow.scalar_count(), mask.scalar_count())
}
