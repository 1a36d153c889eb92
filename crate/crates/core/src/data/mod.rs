//! Stochastic Moving MNIST: digit sources, the bouncing-digit generator and
//! dataset splits.

mod container;
mod glyphs;
mod idx;

use std::f64::consts::TAU;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use container::{dataset_hash, read_dataset, write_dataset, DatasetHeader, Encoding};
pub use glyphs::synthetic_digits;
pub use idx::{parse_idx, serialize_idx, IDX_IMAGES};

/// A stack of grayscale images with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    count: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageSet {
    pub fn new(count: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if count == 0 || height == 0 || width == 0 {
            return Err(Error::Format(format!(
                "image set needs positive dimensions, got {count}×{height}×{width}"
            )));
        }
        if pixels.len() != count * height * width {
            return Err(Error::Length {
                expected: count * height * width,
                found: pixels.len(),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            count,
            height,
            width,
            pixels,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Row-major pixels of image `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Every image resampled to `size × size` with a triangle filter.
    pub fn resized(&self, size: usize) -> Result<Self> {
        if size == self.height && size == self.width {
            return Ok(self.clone());
        }
        let mut pixels = Vec::with_capacity(self.count * size * size);
        for i in 0..self.count {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(self.width as u32, self.height as u32, self.image(i).to_vec())
                    .ok_or_else(|| Error::Shape("image buffer size".into()))?;
            let out = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
            pixels.extend(out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Self::new(self.count, size, size, pixels)
    }
}

/// Generator settings for one family of clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MovingMnistConfig {
    pub canvas: usize,
    pub digits: usize,
    pub frames: usize,
    pub glyph_size: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Draw a fresh speed at each bounce; otherwise only the direction changes.
    pub resample_speed_on_bounce: bool,
}

impl Default for MovingMnistConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MovingMnistConfig {
    pub fn desk() -> Self {
        Self {
            canvas: 32,
            digits: 1,
            frames: 15,
            glyph_size: 14,
            speed_min: 1.0,
            speed_max: 2.0,
            resample_speed_on_bounce: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            canvas: 64,
            digits: 2,
            frames: 15,
            glyph_size: 28,
            speed_min: 2.0,
            speed_max: 4.0,
            resample_speed_on_bounce: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.digits) {
            return Err(Error::Config(format!("digit count {} not in {{1, 2}}", self.digits)));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("clips need at least 2 frames, got {}", self.frames)));
        }
        if self.glyph_size == 0 || self.glyph_size > self.canvas {
            return Err(Error::Config(format!(
                "glyph of {} px does not fit a {} px canvas",
                self.glyph_size, self.canvas
            )));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return Err(Error::Config(format!(
                "invalid speed range [{}, {}]",
                self.speed_min, self.speed_max
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }

    fn motion(&self) -> Motion {
        Motion {
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            resample_speed: self.resample_speed_on_bounce,
        }
    }
}

/// Bounce law parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub speed_min: f64,
    pub speed_max: f64,
    pub resample_speed: bool,
}

/// Square canvas holding a `glyph_height × glyph_width` sprite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Canvas {
    pub size: usize,
    pub glyph_height: usize,
    pub glyph_width: usize,
}

impl Canvas {
    /// Largest admissible top-left (row, col).
    pub fn limits(&self) -> Result<[f64; 2]> {
        if self.glyph_height > self.size || self.glyph_width > self.size {
            return Err(Error::Config(format!(
                "glyph {}×{} larger than canvas {}",
                self.glyph_height, self.glyph_width, self.size
            )));
        }
        Ok([
            (self.size - self.glyph_height) as f64,
            (self.size - self.glyph_width) as f64,
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DigitState {
    pub glyph_index: usize,
    /// Top-left (row, col) in continuous canvas coordinates.
    pub position: [f64; 2],
    /// (d_row, d_col) per frame.
    pub velocity: [f64; 2],
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, sign: [i8; 2]) -> [f64; 2] {
    loop {
        let a = rng.random_range(0.0..TAU);
        let d = [a.sin(), a.cos()];
        if (0..2).all(|k| sign[k] == 0 || (d[k] * sign[k] as f64) > 0.0) {
            return d;
        }
    }
}

/// Advances one frame, reflecting off the canvas walls.
pub fn step_digit<R: Rng + ?Sized>(
    state: &DigitState,
    canvas: Canvas,
    motion: &Motion,
    rng: &mut R,
) -> Result<DigitState> {
    let hi = canvas.limits()?;
    let mut position = [0.0; 2];
    let mut away = [0i8; 2];
    for k in 0..2 {
        let mut p = state.position[k] + state.velocity[k];
        if p < 0.0 {
            p = -p;
            away[k] = 1;
        } else if p > hi[k] {
            p = 2.0 * hi[k] - p;
            away[k] = -1;
        }
        position[k] = p.clamp(0.0, hi[k]);
    }
    let velocity = if away == [0, 0] {
        state.velocity
    } else {
        let speed = if motion.resample_speed {
            rng.random_range(motion.speed_min..=motion.speed_max)
        } else {
            state.velocity[0].hypot(state.velocity[1])
        };
        let d = random_direction(rng, away);
        [speed * d[0], speed * d[1]]
    };
    Ok(DigitState {
        glyph_index: state.glyph_index,
        position,
        velocity,
    })
}

/// A clip `[T, C, H, W]` with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Tensor<f32>,
    pub seed: u64,
    pub config_hash: String,
}

impl Video {
    pub fn new(frames: Tensor<f32>, seed: u64, config_hash: String) -> Result<Self> {
        if frames.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "video must be [T, C, H, W], got {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[0] < 2 {
            return Err(Error::Precondition(format!(
                "video needs at least 2 frames, got {}",
                frames.shape()[0]
            )));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            seed,
            config_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    /// Frames `start..start + len` as a new `[len, C, H, W]` tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor<f32>> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Length {
                expected: start + len.max(1),
                found: self.len(),
            });
        }
        let per: usize = self.frame_shape().iter().product();
        let [c, h, w] = self.frame_shape();
        Tensor::new(
            &[len, c, h, w],
            self.frames.data()[start * per..(start + len) * per].to_vec(),
        )
    }
}

fn rasterize(digits: &ImageSet, states: &[DigitState], size: usize, out: &mut [f32]) {
    let (gh, gw) = (digits.height(), digits.width());
    for s in states {
        let r0 = s.position[0].round() as usize;
        let c0 = s.position[1].round() as usize;
        let glyph = digits.image(s.glyph_index);
        for i in 0..gh {
            let row = &mut out[(r0 + i) * size + c0..(r0 + i) * size + c0 + gw];
            for (dst, &v) in row.iter_mut().zip(&glyph[i * gw..(i + 1) * gw]) {
                *dst = dst.max(v);
            }
        }
    }
}

/// Generates one clip and the continuous digit states behind every frame.
pub fn generate_with_trajectories(
    cfg: &MovingMnistConfig,
    digits: &ImageSet,
    seed: u64,
) -> Result<(Video, Vec<Vec<DigitState>>)> {
    cfg.validate()?;
    let canvas = Canvas {
        size: cfg.canvas,
        glyph_height: digits.height(),
        glyph_width: digits.width(),
    };
    let hi = canvas.limits()?;
    let motion = cfg.motion();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states: Vec<DigitState> = (0..cfg.digits)
        .map(|_| {
            let glyph_index = rng.random_range(0..digits.count());
            let position = [rng.random_range(0.0..=hi[0]), rng.random_range(0.0..=hi[1])];
            let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
            let d = random_direction(&mut rng, [0, 0]);
            DigitState {
                glyph_index,
                position,
                velocity: [speed * d[0], speed * d[1]],
            }
        })
        .collect();
    let hw = cfg.canvas * cfg.canvas;
    let mut data = vec![0.0f32; cfg.frames * hw];
    let mut trajectory = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            states = states
                .iter()
                .map(|s| step_digit(s, canvas, &motion, &mut rng))
                .collect::<Result<_>>()?;
        }
        rasterize(digits, &states, cfg.canvas, &mut data[t * hw..(t + 1) * hw]);
        trajectory.push(states.clone());
    }
    let frames = Tensor::new(&[cfg.frames, 1, cfg.canvas, cfg.canvas], data)?;
    Ok((Video::new(frames, seed, cfg.hash())?, trajectory))
}

pub fn generate_moving_mnist(cfg: &MovingMnistConfig, digits: &ImageSet, seed: u64) -> Result<Video> {
    generate_with_trajectories(cfg, digits, seed).map(|(v, _)| v)
}

/// Seed of clip `index` in a dataset generated from `seed`.
pub fn clip_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// `count` clips; glyphs are resampled to the configured size first.
pub fn generate_dataset(
    cfg: &MovingMnistConfig,
    digits: &ImageSet,
    count: usize,
    seed: u64,
) -> Result<Vec<Video>> {
    cfg.validate()?;
    let glyphs = digits.resized(cfg.glyph_size)?;
    (0..count as u64)
        .map(|i| generate_moving_mnist(cfg, &glyphs, clip_seed(seed, i)))
        .collect()
}

/// Disjoint index sets over a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..count` and cuts it by `ratios` (train, val, test).
pub fn dataset_split(count: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let val = (count as f64 * ratios[1]).round() as usize;
    let test = (count as f64 * ratios[2]).round() as usize;
    let train = count.saturating_sub(val + test);
    if train == 0 || val == 0 || test == 0 || val + test > count {
        return Err(Error::Config(format!(
            "splitting {count} videos by {ratios:?} leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_ix = order.split_off(train + val);
    let val_ix = order.split_off(train);
    Ok(Splits {
        train: order,
        val: val_ix,
        test: test_ix,
    })
}

/// Fixed-size batches over `indices`; an incomplete tail batch is dropped.
pub fn batches<'a>(
    videos: &'a [Video],
    indices: &'a [usize],
    batch_size: usize,
) -> impl Iterator<Item = Vec<&'a Video>> + 'a {
    indices
        .chunks_exact(batch_size.max(1))
        .map(move |chunk| chunk.iter().map(|&i| &videos[i]).collect())
}
