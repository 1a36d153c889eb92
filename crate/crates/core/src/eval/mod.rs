//! Frame metrics and the best-of-N sampling protocol.

mod visual;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Video;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rollout::{generate, BatchFrames, GuardedFrames, RolloutConfig};
use crate::tensor::{Real, Tensor};

pub use visual::{diversity_average, flow_to_color, plot_curves, save_grid, Diversity, Tile};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over `[.., H, W]` planes, averaged across
/// leading (channel) axes. Dynamic range 1.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let rank = a.shape().len();
    if rank < 2 {
        return Err(Error::Shape(format!("ssim needs [.., H, W], got {:?}", a.shape())));
    }
    let (h, w) = (a.shape()[rank - 2], a.shape()[rank - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let planes = a.len() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let x: Vec<f64> = a.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.f64()).collect();
        let y: Vec<f64> = b.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.f64()).collect();
        let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
        let syy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
        let sxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / planes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    pub fn score(self, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(pred, target, 1.0),
            Metric::Ssim => ssim(pred, target),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Per-frame aggregate of one metric over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub metric: Metric,
    pub per_frame: Vec<f64>,
    /// 95% normal-approximation half-widths across videos.
    pub per_frame_ci95: Vec<f64>,
    pub mean: f64,
    pub mean_ci95: f64,
}

fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

impl MetricCurve {
    /// Aggregates per-video curves (each of length `T_pred`).
    pub fn from_videos(metric: Metric, curves: &[Vec<f64>]) -> Result<Self> {
        let len = curves
            .first()
            .ok_or_else(|| Error::Precondition("no curves to aggregate".into()))?
            .len();
        if let Some(c) = curves.iter().find(|c| c.len() != len) {
            return Err(Error::Length {
                expected: len,
                found: c.len(),
            });
        }
        let (per_frame, per_frame_ci95) = (0..len)
            .map(|t| mean_ci(&curves.iter().map(|c| c[t]).collect::<Vec<_>>()))
            .unzip();
        let averages: Vec<f64> = curves.iter().map(|c| c.iter().sum::<f64>() / len as f64).collect();
        let (mean, mean_ci95) = mean_ci(&averages);
        Ok(Self {
            metric,
            per_frame,
            per_frame_ci95,
            mean,
            mean_ci95,
        })
    }
}

/// Index of the candidate with the highest frame-averaged score; ties keep
/// the earliest.
pub fn select_best(scores: &[Vec<f64>]) -> Option<usize> {
    let avg = |s: &Vec<f64>| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        let v = avg(s);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Noise stream of sample `sample` for test video `video`.
pub fn sample_rng(seed: u64, video: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((video as u64) << 32) | sample as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfN {
    pub n: usize,
    pub seed: u64,
    /// Confidence intervals are computed across test videos.
    pub ci_over: String,
    pub videos: usize,
    pub curves: Vec<MetricCurve>,
    /// Selected sample per video, keyed by metric.
    pub best_indices: BTreeMap<Metric, Vec<usize>>,
}

impl BestOfN {
    pub fn curve(&self, metric: Metric) -> Option<&MetricCurve> {
        self.curves.iter().find(|c| c.metric == metric)
    }
}

/// Options of [`best_of_n_eval`].
#[derive(Clone, Debug)]
pub struct BestOfNOptions {
    pub n: usize,
    pub metrics: Vec<Metric>,
    pub seed: u64,
    /// Samples generated per forward pass; does not affect results.
    pub chunk: usize,
}

/// Per-frame scores of every sample of one video, `[metric][sample][frame]`.
pub fn sample_scores<T: Real>(
    model: &Model<T>,
    video: &Video,
    video_index: usize,
    rollout: &RolloutConfig,
    opts: &BestOfNOptions,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let clip = video.window(0, rollout.frames())?;
    let mut scores = vec![Vec::with_capacity(opts.n); opts.metrics.len()];
    let mut start = 0;
    while start < opts.n {
        let rows = opts.chunk.max(1).min(opts.n - start);
        let batch = BatchFrames::<T>::repeat(&clip, rows)?;
        let guard = GuardedFrames::new(&batch, rollout.t_cond);
        let mut rngs: Vec<ChaCha8Rng> = (start..start + rows)
            .map(|s| sample_rng(opts.seed, video_index, s))
            .collect();
        let gen = generate(model, &guard, rollout, &mut rngs)?;
        for r in 0..rows {
            let pred: Tensor<f32> = gen.clip(r).cast();
            for (m, metric) in opts.metrics.iter().enumerate() {
                let curve = (0..rollout.t_pred)
                    .map(|k| metric.score(&pred.index_outer(k), &clip.index_outer(rollout.t_cond + k)))
                    .collect::<Result<Vec<_>>>()?;
                scores[m].push(curve);
            }
        }
        start += rows;
    }
    Ok(scores)
}

/// For each video, samples `n` futures, selects the best per metric by its
/// frame average and aggregates the selected curves over videos.
pub fn best_of_n_eval<T: Real>(
    model: &Model<T>,
    videos: &[&Video],
    rollout: &RolloutConfig,
    opts: &BestOfNOptions,
) -> Result<BestOfN> {
    if opts.n == 0 {
        return Err(Error::Precondition("best-of-N needs N ≥ 1".into()));
    }
    if videos.is_empty() || opts.metrics.is_empty() {
        return Err(Error::Precondition("need at least one video and one metric".into()));
    }
    let mut selected: Vec<Vec<Vec<f64>>> = vec![Vec::new(); opts.metrics.len()];
    let mut best_indices: BTreeMap<Metric, Vec<usize>> = BTreeMap::new();
    for (v, video) in videos.iter().enumerate() {
        let scores = sample_scores(model, video, v, rollout, opts)?;
        for (m, metric) in opts.metrics.iter().enumerate() {
            let best = select_best(&scores[m]).expect("n ≥ 1");
            selected[m].push(scores[m][best].clone());
            best_indices.entry(*metric).or_default().push(best);
        }
    }
    let curves = opts
        .metrics
        .iter()
        .zip(&selected)
        .map(|(m, c)| MetricCurve::from_videos(*m, c))
        .collect::<Result<_>>()?;
    Ok(BestOfN {
        n: opts.n,
        seed: opts.seed,
        ci_over: "videos".into(),
        videos: videos.len(),
        curves,
        best_indices,
    })
}

/// Mean PSNR over predicted frames of repeating the last conditioning frame.
pub fn copy_last_psnr(videos: &[&Video], rollout: &RolloutConfig) -> Result<f64> {
    let mut total = 0.0;
    for v in videos {
        let last = v.frames.index_outer(rollout.t_cond - 1);
        for k in 0..rollout.t_pred {
            total += psnr(&last, &v.frames.index_outer(rollout.t_cond + k), 1.0)?;
        }
    }
    Ok(total / (videos.len() * rollout.t_pred) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = random(0, &[1, 8, 8], 0.0, 1.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &random(0, &[8, 8], 0.0, 1.0), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula() {
        for seed in 0..10 {
            let a = random(seed, &[3, 5, 7], 0.0, 1.0);
            let b = random(seed + 100, &[3, 5, 7], 0.0, 1.0);
            let mut se = 0.0;
            for i in 0..a.len() {
                let d = a.data()[i] - b.data()[i];
                se += d * d;
            }
            let direct = 10.0 * (1.0 / (se / 105.0)).log10();
            assert!((psnr(&a, &b, 1.0).unwrap() - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let a = random(1, &[16, 16], 0.2, 0.8);
        let noise = random(2, &[16, 16], -1.0, 1.0);
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let b = a.zip_map(&noise, |x, n| x + amp * n).unwrap();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_examples() {
        let a = random(3, &[2, 16, 16], 0.0, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let zeros = Tensor::<f64>::zeros(&[16, 16]);
        let ones = Tensor::<f64>::full(&[16, 16], 1.0);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let expected = c1 / (1.0 + c1) * (c2 / c2);
        assert!((ssim(&zeros, &ones).unwrap() - expected).abs() < 1e-9);
        let b = random(4, &[2, 16, 16], 0.0, 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        let small = Tensor::<f64>::zeros(&[10, 16]);
        assert!(matches!(ssim(&small, &small), Err(Error::Precondition(_))));
    }

    #[test]
    fn ssim_tolerates_a_small_common_offset() {
        let a = random(5, &[20, 20], 0.2, 0.7);
        let b = random(6, &[20, 20], 0.2, 0.7);
        let base = ssim(&a, &b).unwrap();
        let shifted = ssim(&a.map(|v| v + 0.05), &b.map(|v| v + 0.05)).unwrap();
        assert!((base - shifted).abs() < 1e-3);
    }

    #[test]
    fn metrics_can_disagree_on_the_best_sample() {
        let target = random(7, &[1, 24, 24], 0.2, 0.8).cast::<f32>();
        let offset = target.map(|v| v + 0.15);
        let noise = random(8, &[1, 24, 24], -0.17, 0.17).cast::<f32>();
        let noisy = target.zip_map(&noise, |x, n| x + n).unwrap();
        let cands = [offset, noisy];
        let by = |m: Metric| {
            let s: Vec<Vec<f64>> = cands.iter().map(|c| vec![m.score(c, &target).unwrap()]).collect();
            select_best(&s).unwrap()
        };
        assert_eq!(by(Metric::Psnr), 1);
        assert_eq!(by(Metric::Ssim), 0);
    }

    #[test]
    fn curve_aggregation_and_intervals() {
        let c = MetricCurve::from_videos(Metric::Psnr, &[vec![10.0, 20.0], vec![12.0, 22.0]]).unwrap();
        assert_eq!(c.per_frame, vec![11.0, 21.0]);
        assert!((c.per_frame_ci95[0] - 1.96 * (2f64 / 2.0).sqrt()).abs() < 1e-12);
        assert_eq!(c.mean, 16.0);
        let single = MetricCurve::from_videos(Metric::Ssim, &[vec![0.5, 0.7]]).unwrap();
        assert_eq!(single.per_frame_ci95, vec![0.0, 0.0]);
        assert!(MetricCurve::from_videos(Metric::Psnr, &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn select_best_prefers_earliest_tie() {
        assert_eq!(select_best(&[vec![1.0, 3.0], vec![2.0, 2.0], vec![0.0, 1.0]]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    proptest! {
        #[test]
        fn nested_sets_never_lower_the_best(scores in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 1..40), k in 1usize..40) {
            let k = k.min(scores.len());
            let avg = |s: &Vec<f64>| s.iter().sum::<f64>() / 3.0;
            let small = avg(&scores[select_best(&scores[..k]).unwrap()]);
            let large = avg(&scores[select_best(&scores).unwrap()]);
            prop_assert!(large >= small);
        }
    }
}
