//! Variational objectives: analytic diagonal-Gaussian KL, L2 reconstruction
//! and the per-time-step evidence lower bounds for both model variants.
//!
//! All objectives are reported as losses (negated bounds): reconstruction
//! errors plus `beta`-weighted KL terms, to be minimized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::model::{GaussianParams, GaussianVars};
use crate::rollout::RolloutOutput;
use crate::tensor::{Real, Tensor};

/// Relative weights of the three reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconWeights {
    pub combined: f64,
    pub appearance: f64,
    pub motion: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        Self {
            combined: 1.0,
            appearance: 1.0,
            motion: 1.0,
        }
    }
}

/// Scalar loss terms of one rollout. Reconstruction fields hold the weighted
/// terms, so `total` is always their plain sum plus `beta·(kl_pixel + kl_flow)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_combined: f64,
    pub recon_appearance: f64,
    pub recon_motion: f64,
    pub kl_pixel: f64,
    pub kl_flow: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn reconstruction(&self) -> f64 {
        self.recon_combined + self.recon_appearance + self.recon_motion
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_combined,
            self.recon_appearance,
            self.recon_motion,
            self.kl_pixel,
            self.kl_flow,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-dimension `KL(N(mq, e^lq) ‖ N(mp, e^lp))`.
fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    0.5 * ((lq - lp).exp() + (mp - mq).powi(2) / lp.exp() - 1.0 + lp - lq)
}

/// Analytic KL divergence between diagonal Gaussians, summed over every entry.
pub fn gaussian_kl<T: Real>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::Shape(format!(
            "KL between {:?} and {:?}",
            q.mean.shape(),
            p.mean.shape()
        )));
    }
    Ok((0..q.mean.len())
        .map(|i| {
            kl_term(
                q.mean.data()[i].f64(),
                q.log_variance.data()[i].f64(),
                p.mean.data()[i].f64(),
                p.log_variance.data()[i].f64(),
            )
        })
        .sum())
}

/// Sum of squared errors over steps and pixels, averaged over the batch.
///
/// Each step is a batched frame tensor `[n, c, h, w]`.
pub fn recon_l2<T: Real>(pred: &[Tensor<T>], target: &[Tensor<T>]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predicted steps vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        p.expect_shape(t.shape())?;
        let batch = p.shape().first().copied().unwrap_or(1).max(1);
        let sse: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum();
        total += sse / batch as f64;
    }
    Ok(total)
}

struct KlOp {
    batch: usize,
}

impl<T: Real> CustomOp<T> for KlOp {
    fn name(&self) -> &'static str {
        "gaussian_kl"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let scale = grad.data()[0] / T::of(self.batch as f64);
        let half = T::of(0.5);
        let n = inputs[0].len();
        let mut d = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
        for i in 0..n {
            let (mq, lq) = (inputs[0].data()[i], inputs[1].data()[i]);
            let (mp, lp) = (inputs[2].data()[i], inputs[3].data()[i]);
            let inv_vp = (-lp).exp();
            let ratio = (lq - lp).exp();
            let diff = mq - mp;
            d[0][i] = scale * diff * inv_vp;
            d[1][i] = scale * half * (ratio - T::one());
            d[2][i] = -scale * diff * inv_vp;
            d[3][i] = scale * half * (T::one() - ratio - diff * diff * inv_vp);
        }
        d.into_iter()
            .zip(inputs)
            .map(|(v, t)| Some(Tensor::new(t.shape(), v).expect("shape")))
            .collect()
    }
}

/// Batch-averaged KL between `[n, d]` posterior and prior parameters on the tape.
pub fn gaussian_kl_var<T: Real>(g: &mut Graph<T>, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let shape = g.shape(q.mean).to_vec();
    for v in [q.log_variance, p.mean, p.log_variance] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::Shape(format!("KL operands {:?} vs {:?}", shape, g.shape(v))));
        }
    }
    let batch = shape.first().copied().unwrap_or(1).max(1);
    let mut total = 0.0;
    for i in 0..g.value(q.mean).len() {
        total += kl_term(
            g.value(q.mean).data()[i].f64(),
            g.value(q.log_variance).data()[i].f64(),
            g.value(p.mean).data()[i].f64(),
            g.value(p.log_variance).data()[i].f64(),
        );
    }
    let value = Tensor::scalar(T::of(total / batch as f64));
    Ok(g.custom(
        vec![q.mean, q.log_variance, p.mean, p.log_variance],
        value,
        Box::new(KlOp { batch }),
    ))
}

struct SquaredErrorOp {
    batch: usize,
}

impl<T: Real> CustomOp<T> for SquaredErrorOp {
    fn name(&self) -> &'static str {
        "squared_error"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let k = T::of(2.0) * grad.data()[0] / T::of(self.batch as f64);
        let dp = inputs[0].zip_map(inputs[1], |p, t| k * (p - t)).expect("shape");
        let dt = dp.map(|v| -v);
        vec![Some(dp), Some(dt)]
    }
}

/// Batch-averaged sum of squared errors of one step on the tape.
pub fn recon_l2_var<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.value(pred).expect_shape(g.shape(target))?;
    let batch = g.shape(pred).first().copied().unwrap_or(1).max(1);
    let sse: f64 = g
        .value(pred)
        .data()
        .iter()
        .zip(g.value(target).data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum();
    let value = Tensor::scalar(T::of(sse / batch as f64));
    Ok(g.custom(vec![pred, target], value, Box::new(SquaredErrorOp { batch })))
}

/// The tape node of the total loss together with its scalar breakdown.
#[derive(Clone, Copy, Debug)]
pub struct Elbo {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn sum_vars<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
    }
    Ok(acc)
}

fn scalar<T: Real>(g: &Graph<T>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).data()[0].f64())
}

fn assemble<T: Real>(
    out: &mut RolloutOutput<T>,
    beta: f64,
    weights: ReconWeights,
    with_flow: bool,
) -> Result<Elbo> {
    let targets = out
        .targets
        .clone()
        .ok_or_else(|| Error::Precondition("rollout carries no training targets".into()))?;
    if targets.len() != out.steps.len() {
        return Err(Error::Shape(format!(
            "{} steps but {} targets",
            out.steps.len(),
            targets.len()
        )));
    }
    let g = &mut out.graph;
    let mut combined = Vec::new();
    let mut appearance = Vec::new();
    let mut motion = Vec::new();
    let mut kl_p = Vec::new();
    let mut kl_f = Vec::new();
    for (step, &target) in out.steps.iter().zip(&targets) {
        combined.push(recon_l2_var(g, step.x_hat, target)?);
        appearance.push(recon_l2_var(g, step.x_p, target)?);
        motion.push(recon_l2_var(g, step.x_f, target)?);
        let q = step
            .posterior_p
            .ok_or_else(|| Error::Shape("step without a pixel posterior".into()))?;
        kl_p.push(gaussian_kl_var(g, q, step.prior_p)?);
        if with_flow {
            let (q, p) = match (step.posterior_f, step.prior_f) {
                (Some(q), Some(p)) => (q, p),
                _ => return Err(Error::Shape("step without flow-stream parameters".into())),
            };
            kl_f.push(gaussian_kl_var(g, q, p)?);
        }
    }
    let mut terms = Vec::new();
    let mut weighted = [0.0; 3];
    for (slot, (vars, w)) in [
        (&combined, weights.combined),
        (&appearance, weights.appearance),
        (&motion, weights.motion),
    ]
    .into_iter()
    .enumerate()
    {
        let s = sum_vars(g, vars)?.expect("at least one step");
        weighted[slot] = w * scalar(g, Some(s));
        if w != 0.0 {
            terms.push(g.scale(s, w));
        }
    }
    let kl_pixel = sum_vars(g, &kl_p)?;
    let kl_flow = sum_vars(g, &kl_f)?;
    if let Some(k) = sum_vars(g, &[kl_pixel, kl_flow].into_iter().flatten().collect::<Vec<_>>())? {
        terms.push(g.scale(k, beta));
    }
    let total = match sum_vars(g, &terms)? {
        Some(t) => t,
        None => g.input(Tensor::scalar(T::zero())),
    };
    let breakdown = LossBreakdown {
        recon_combined: weighted[0],
        recon_appearance: weighted[1],
        recon_motion: weighted[2],
        kl_pixel: scalar(g, kl_pixel),
        kl_flow: scalar(g, kl_flow),
        beta,
        total: scalar(g, Some(total)),
    };
    Ok(Elbo { total, breakdown })
}

/// Single-stream bound: three reconstructions plus the pixel-stream KL.
/// Any flow-stream parameters in the rollout are ignored.
pub fn elbo_baseline<T: Real>(
    out: &mut RolloutOutput<T>,
    beta: f64,
    weights: ReconWeights,
) -> Result<Elbo> {
    assemble(out, beta, weights, false)
}

/// Two-stream bound: three reconstructions plus pixel- and flow-stream KLs.
pub fn elbo_slamp<T: Real>(
    out: &mut RolloutOutput<T>,
    beta: f64,
    weights: ReconWeights,
) -> Result<Elbo> {
    assemble(out, beta, weights, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gp(mean: &[f64], lv: &[f64]) -> GaussianParams<f64> {
        GaussianParams::new(
            Tensor::from_f64(&[mean.len()], mean).unwrap(),
            Tensor::from_f64(&[lv.len()], lv).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let q = gp(&[0.3, -1.2], &[0.5, -2.0]);
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let q = gp(&[1.0], &[0.0]);
        let p = gp(&[0.0], &[0.0]);
        assert!((gaussian_kl(&q, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_dimension_mismatch_is_shape_error() {
        let q = gp(&[1.0], &[0.0]);
        let p = gp(&[0.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(gaussian_kl(&q, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn recon_examples() {
        let a = Tensor::<f64>::full(&[1, 1, 2, 2], 0.3);
        assert_eq!(recon_l2(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let p = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[0.5]).unwrap();
        let t = Tensor::from_f64(&[1, 1, 1, 1], &[0.0]).unwrap();
        assert!((recon_l2(&[p], &[t]).unwrap() - 0.25).abs() < 1e-15);
        assert!(recon_l2(&[a.clone()], &[Tensor::zeros(&[1, 1, 2, 3])]).is_err());
    }

    #[test]
    fn recon_is_scaled_gaussian_nll() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let sigma2: f64 = 0.5;
        let n = 3 * 2 * 4 * 4;
        let p: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let pt = Tensor::<f64>::from_f64(&[3, 2, 4, 4], &p).unwrap();
        let tt = Tensor::from_f64(&[3, 2, 4, 4], &t).unwrap();
        // Batch-averaged negative log-likelihood of an isotropic Gaussian.
        let nll: f64 = p
            .iter()
            .zip(&t)
            .map(|(a, b)| 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() + (a - b).powi(2) / (2.0 * sigma2))
            .sum::<f64>()
            / 3.0;
        let constant = (n / 3) as f64 * 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
        let l2 = recon_l2(&[pt], &[tt]).unwrap();
        assert!(((nll - constant) * 2.0 * sigma2 - l2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_factorizes(
            mq in proptest::collection::vec(-3.0f64..3.0, 5),
            lq in proptest::collection::vec(-4.0f64..4.0, 5),
            mp in proptest::collection::vec(-3.0f64..3.0, 5),
            lp in proptest::collection::vec(-4.0f64..4.0, 5),
        ) {
            let full = gaussian_kl(&gp(&mq, &lq), &gp(&mp, &lp)).unwrap();
            prop_assert!(full >= 0.0);
            let parts: f64 = (0..5)
                .map(|i| gaussian_kl(&gp(&mq[i..=i], &lq[i..=i]), &gp(&mp[i..=i], &lp[i..=i])).unwrap())
                .sum();
            prop_assert!((full - parts).abs() <= 1e-12 * full.max(1.0));
        }
    }

    #[test]
    fn kl_var_gradient_matches_finite_differences() {
        let vals = [
            vec![0.3, -0.7, 1.1, 0.2],
            vec![0.1, -0.4, 0.6, -1.3],
            vec![-0.5, 0.2, 0.9, 0.0],
            vec![0.4, 0.3, -0.8, 0.7],
        ];
        let eval = |vals: &[Vec<f64>; 4]| {
            let mut g = Graph::<f64>::new();
            let v: Vec<Var> = vals
                .iter()
                .map(|x| g.variable(Tensor::from_f64(&[2, 2], x).unwrap()))
                .collect();
            let kl = gaussian_kl_var(
                &mut g,
                GaussianVars { mean: v[0], log_variance: v[1] },
                GaussianVars { mean: v[2], log_variance: v[3] },
            )
            .unwrap();
            (g, v, kl)
        };
        let (g, v, kl) = eval(&vals);
        let grads = g.backward(kl).unwrap();
        for a in 0..4 {
            for j in 0..4 {
                let h = 1e-6;
                let mut p = vals.clone();
                p[a][j] += h;
                let mut m = vals.clone();
                m[a][j] -= h;
                let (gp_, _, kp) = eval(&p);
                let (gm, _, km) = eval(&m);
                let fd = (gp_.value(kp).data()[0] - gm.value(km).data()[0]) / (2.0 * h);
                let an = grads.wrt(v[a]).unwrap().data()[j];
                assert!((fd - an).abs() < 1e-8, "{a},{j}: {fd} vs {an}");
            }
        }
    }
}
