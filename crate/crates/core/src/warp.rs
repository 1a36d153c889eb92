//! Differentiable inverse warping and mask fusion.
//!
//! Flow fields are `[n, 2, h, w]` (or `[2, h, w]`) pixel displacements with
//! channel 0 the row offset and channel 1 the column offset. They point from
//! the target pixel to the source location it samples: for a target pixel `p`
//! the warped value is `source(p + flow(p))`. Samples outside the source are
//! clamped to the border.

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Bilinear lookup of one continuous position with clamp-to-edge padding.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    /// Fractional offsets inside the cell.
    a: T,
    b: T,
    /// False when the coordinate was clamped (zero gradient on that axis).
    row_live: bool,
    col_live: bool,
}

impl<T: Real> Tap<T> {
    fn new(row: T, col: T, h: usize, w: usize) -> Self {
        let (rr, row_live) = clamp_coord(row, h);
        let (cc, col_live) = clamp_coord(col, w);
        let r0 = rr.floor().f64() as usize;
        let c0 = cc.floor().f64() as usize;
        let r0 = r0.min(h - 1);
        let c0 = c0.min(w - 1);
        Self {
            r0,
            r1: (r0 + 1).min(h - 1),
            c0,
            c1: (c0 + 1).min(w - 1),
            a: rr - T::of(r0 as f64),
            b: cc - T::of(c0 as f64),
            row_live,
            col_live,
        }
    }

    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.a) * (one - self.b),
            (one - self.a) * self.b,
            self.a * (one - self.b),
            self.a * self.b,
        ]
    }

    fn sample(&self, plane: &[T], w: usize) -> T {
        let [w00, w01, w10, w11] = self.weights();
        w00 * plane[self.r0 * w + self.c0]
            + w01 * plane[self.r0 * w + self.c1]
            + w10 * plane[self.r1 * w + self.c0]
            + w11 * plane[self.r1 * w + self.c1]
    }

    /// `(d/drow, d/dcol)` of the sampled value.
    fn coord_grad(&self, plane: &[T], w: usize) -> (T, T) {
        let one = T::one();
        let p00 = plane[self.r0 * w + self.c0];
        let p01 = plane[self.r0 * w + self.c1];
        let p10 = plane[self.r1 * w + self.c0];
        let p11 = plane[self.r1 * w + self.c1];
        let dr = if self.row_live {
            (one - self.b) * (p10 - p00) + self.b * (p11 - p01)
        } else {
            T::zero()
        };
        let dc = if self.col_live {
            (one - self.a) * (p01 - p00) + self.a * (p11 - p10)
        } else {
            T::zero()
        };
        (dr, dc)
    }
}

fn clamp_coord<T: Real>(x: T, size: usize) -> (T, bool) {
    let hi = T::of((size - 1) as f64);
    if x < T::zero() {
        (T::zero(), false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}

/// Shapes of a batched sampling problem.
#[derive(Clone, Copy, Debug)]
struct SampleDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn sample_dims(image: &[usize], coords: &[usize], displacement: bool) -> Result<SampleDims> {
    if image.len() != 4 || coords.len() != 4 || coords[1] != 2 || coords[0] != image[0] {
        return Err(Error::Shape(format!(
            "sampling image {:?} at coordinates {:?}",
            image, coords
        )));
    }
    if displacement && (coords[2] != image[2] || coords[3] != image[3]) {
        return Err(Error::Shape(format!(
            "flow {:?} does not match source {:?}",
            coords, image
        )));
    }
    if image[2] == 0 || image[3] == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(SampleDims {
        n: image[0],
        c: image[1],
        h: image[2],
        w: image[3],
        ho: coords[2],
        wo: coords[3],
    })
}

/// Builds the tap for output pixel `(i, j)` of batch item `b`.
fn tap_at<T: Real>(coords: &[T], d: &SampleDims, b: usize, i: usize, j: usize, disp: bool) -> Tap<T> {
    let plane = d.ho * d.wo;
    let base = b * 2 * plane + i * d.wo + j;
    let (mut row, mut col) = (coords[base], coords[base + plane]);
    if disp {
        row += T::of(i as f64);
        col += T::of(j as f64);
    }
    Tap::new(row, col, d.h, d.w)
}

fn sample_forward<T: Real>(image: &Tensor<T>, coords: &Tensor<T>, disp: bool) -> Result<Tensor<T>> {
    let d = sample_dims(image.shape(), coords.shape(), disp)?;
    let mut out = vec![T::zero(); d.n * d.c * d.ho * d.wo];
    let (src, cd) = (image.data(), coords.data());
    for b in 0..d.n {
        for i in 0..d.ho {
            for j in 0..d.wo {
                let tap = tap_at(cd, &d, b, i, j, disp);
                for ch in 0..d.c {
                    let plane = &src[(b * d.c + ch) * d.h * d.w..][..d.h * d.w];
                    out[((b * d.c + ch) * d.ho + i) * d.wo + j] = tap.sample(plane, d.w);
                }
            }
        }
    }
    Tensor::new(&[d.n, d.c, d.ho, d.wo], out)
}

fn sample_backward<T: Real>(
    image: &Tensor<T>,
    coords: &Tensor<T>,
    grad: &Tensor<T>,
    disp: bool,
) -> (Tensor<T>, Tensor<T>) {
    let d = sample_dims(image.shape(), coords.shape(), disp).expect("validated in forward");
    let mut dimage = vec![T::zero(); image.len()];
    let mut dcoords = vec![T::zero(); coords.len()];
    let (src, cd, g) = (image.data(), coords.data(), grad.data());
    let plane_out = d.ho * d.wo;
    for b in 0..d.n {
        for i in 0..d.ho {
            for j in 0..d.wo {
                let tap = tap_at(cd, &d, b, i, j, disp);
                let wts = tap.weights();
                let (mut gr, mut gc) = (T::zero(), T::zero());
                for ch in 0..d.c {
                    let off = (b * d.c + ch) * d.h * d.w;
                    let gv = g[((b * d.c + ch) * d.ho + i) * d.wo + j];
                    let (dr, dc) = tap.coord_grad(&src[off..off + d.h * d.w], d.w);
                    gr += gv * dr;
                    gc += gv * dc;
                    let dst = &mut dimage[off..off + d.h * d.w];
                    dst[tap.r0 * d.w + tap.c0] += gv * wts[0];
                    dst[tap.r0 * d.w + tap.c1] += gv * wts[1];
                    dst[tap.r1 * d.w + tap.c0] += gv * wts[2];
                    dst[tap.r1 * d.w + tap.c1] += gv * wts[3];
                }
                let base = b * 2 * plane_out + i * d.wo + j;
                dcoords[base] = gr;
                dcoords[base + plane_out] = gc;
            }
        }
    }
    (
        Tensor::new(image.shape(), dimage).expect("shape"),
        Tensor::new(coords.shape(), dcoords).expect("shape"),
    )
}

/// Lifts `[c, h, w]` to `[1, c, h, w]`; passes 4-D through.
fn batched<T: Real>(t: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match t.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok((t.clone().reshape(&s)?, true))
        }
        4 => Ok((t.clone(), false)),
        _ => Err(Error::Shape(format!("expected [c,h,w] or [n,c,h,w], got {:?}", t.shape()))),
    }
}

fn unbatched<T: Real>(t: Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

/// Samples `image` at per-pixel absolute `(row, col)` positions.
pub fn bilinear_sample<T: Real>(image: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let (img, squeeze) = batched(image)?;
    let (crd, _) = batched(coords)?;
    unbatched(sample_forward(&img, &crd, false)?, squeeze)
}

/// `out(p) = source(p + flow(p))`.
pub fn inverse_warp<T: Real>(source: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (src, squeeze) = batched(source)?;
    let (fl, _) = batched(flow)?;
    unbatched(sample_forward(&src, &fl, true)?, squeeze)
}

/// The identity sampling grid `[2, h, w]`.
pub fn identity_grid<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        data.extend(std::iter::repeat_n(T::of(i as f64), w));
    }
    for _ in 0..h {
        data.extend((0..w).map(|j| T::of(j as f64)));
    }
    Tensor::new(&[2, h, w], data).expect("shape")
}

struct SampleOp {
    displacement: bool,
}

impl<T: Real> CustomOp<T> for SampleOp {
    fn name(&self) -> &'static str {
        if self.displacement {
            "inverse_warp"
        } else {
            "bilinear_sample"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (di, dc) = sample_backward(inputs[0], inputs[1], grad, self.displacement);
        vec![Some(di), Some(dc)]
    }
}

/// Tape version of [`bilinear_sample`] on `[n, c, h, w]` / `[n, 2, ho, wo]`.
pub fn bilinear_sample_var<T: Real>(g: &mut Graph<T>, image: Var, coords: Var) -> Result<Var> {
    let value = sample_forward(g.value(image), g.value(coords), false)?;
    Ok(g.custom(vec![image, coords], value, Box::new(SampleOp { displacement: false })))
}

/// Tape version of [`inverse_warp`], differentiable in source and flow.
pub fn inverse_warp_var<T: Real>(g: &mut Graph<T>, source: Var, flow: Var) -> Result<Var> {
    let value = sample_forward(g.value(source), g.value(flow), true)?;
    Ok(g.custom(vec![source, flow], value, Box::new(SampleOp { displacement: true })))
}

fn combine_dims(xp: &[usize], xf: &[usize], mask: &[usize]) -> Result<(usize, usize, usize)> {
    if xp != xf || xp.len() != 4 || mask.len() != 4 || mask[1] != 1 || mask[0] != xp[0] || mask[2..] != xp[2..] {
        return Err(Error::Shape(format!(
            "combine: appearance {:?}, motion {:?}, mask {:?}",
            xp, xf, mask
        )));
    }
    Ok((xp[0], xp[1], xp[2] * xp[3]))
}

fn combine_forward<T: Real>(xp: &Tensor<T>, xf: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, hw) = combine_dims(xp.shape(), xf.shape(), mask.shape())?;
    let mut out = vec![T::zero(); xp.len()];
    for b in 0..n {
        let m = &mask.data()[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for k in 0..hw {
                let (a, b) = (xp.data()[off + k], xf.data()[off + k]);
                let mixed = m[k] * a + (T::one() - m[k]) * b;
                // Rounding can step one ulp outside the segment.
                out[off + k] = mixed.max(a.min(b)).min(a.max(b));
            }
        }
    }
    Tensor::new(xp.shape(), out)
}

fn check_mask<T: Real>(mask: &Tensor<T>) -> Result<()> {
    if let Some(v) = mask
        .data()
        .iter()
        .find(|v| !(**v >= T::zero() && **v <= T::one()))
    {
        return Err(Error::Precondition(format!("mask value {v} outside [0, 1]")));
    }
    Ok(())
}

/// `mask ⊙ x_p + (1 − mask) ⊙ x_f`, the mask broadcast over channels.
pub fn combine<T: Real>(xp: &Tensor<T>, xf: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    check_mask(mask)?;
    let (p, squeeze) = batched(xp)?;
    let (f, _) = batched(xf)?;
    let (m, _) = batched(mask)?;
    unbatched(combine_forward(&p, &f, &m)?, squeeze)
}

struct CombineOp;

impl<T: Real> CustomOp<T> for CombineOp {
    fn name(&self) -> &'static str {
        "combine"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (xp, xf, mask) = (inputs[0], inputs[1], inputs[2]);
        let (n, c, hw) = combine_dims(xp.shape(), xf.shape(), mask.shape()).expect("validated");
        let mut dxp = vec![T::zero(); xp.len()];
        let mut dxf = vec![T::zero(); xf.len()];
        let mut dm = vec![T::zero(); mask.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for k in 0..hw {
                    let mv = mask.data()[b * hw + k];
                    let gv = grad.data()[off + k];
                    dxp[off + k] = gv * mv;
                    dxf[off + k] = gv * (T::one() - mv);
                    dm[b * hw + k] += gv * (xp.data()[off + k] - xf.data()[off + k]);
                }
            }
        }
        vec![
            Some(Tensor::new(xp.shape(), dxp).expect("shape")),
            Some(Tensor::new(xf.shape(), dxf).expect("shape")),
            Some(Tensor::new(mask.shape(), dm).expect("shape")),
        ]
    }
}

/// Tape version of [`combine`] on batched tensors.
pub fn combine_var<T: Real>(g: &mut Graph<T>, xp: Var, xf: Var, mask: Var) -> Result<Var> {
    check_mask(g.value(mask))?;
    let value = combine_forward(g.value(xp), g.value(xf), g.value(mask))?;
    Ok(g.custom(vec![xp, xf, mask], value, Box::new(CombineOp)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn identity_grid_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random(&[2, 5, 6], 0.0, 1.0, &mut rng);
        let out = bilinear_sample(&img, &identity_grid(5, 6)).unwrap();
        assert!(out.max_abs_diff(&img) <= 1e-12);
    }

    #[test]
    fn integer_positions_give_exact_pixels() {
        let img = Tensor::<f64>::from_f64(&[1, 2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let coords = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 0.0, 2.0, 1.0]).unwrap();
        let out = bilinear_sample(&img, &coords).unwrap();
        assert_eq!(out.data(), &[0.6, 0.2]);
    }

    #[test]
    fn midpoint_interpolates_linearly() {
        let img = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.2, 0.6]).unwrap();
        let coords = Tensor::<f64>::from_f64(&[2, 1, 1], &[0.0, 0.5]).unwrap();
        let out = bilinear_sample(&img, &coords).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_coordinates_clamp_to_border() {
        let img = Tensor::<f64>::from_f64(&[1, 2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let coords = Tensor::<f64>::from_f64(&[2, 1, 2], &[-5.0, 9.0, -3.0, 7.5]).unwrap();
        let out = bilinear_sample(&img, &coords).unwrap();
        assert_eq!(out.data(), &[0.1, 0.4]);
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random(&[3, 1, 8, 8], 0.0, 1.0, &mut rng);
        let out = inverse_warp(&img, &Tensor::zeros(&[3, 2, 8, 8])).unwrap();
        assert!(out.max_abs_diff(&img) <= 1e-12);
    }

    #[test]
    fn unit_column_flow_undoes_right_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 7);
        let img = random(&[1, h, w], 0.0, 1.0, &mut rng);
        let mut shifted = Tensor::zeros(&[1, h, w]);
        for r in 0..h {
            for c in 1..w {
                shifted.data_mut()[r * w + c] = img.data()[r * w + c - 1];
            }
        }
        let mut flow = Tensor::zeros(&[2, h, w]);
        flow.data_mut()[h * w..].iter_mut().for_each(|v| *v = 1.0);
        let out = inverse_warp(&shifted, &flow).unwrap();
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                assert_eq!(out.data()[r * w + c], img.data()[r * w + c]);
            }
        }
    }

    #[test]
    fn warp_rejects_mismatched_flow() {
        let img = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(matches!(
            inverse_warp(&img, &Tensor::zeros(&[2, 4, 5])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn combine_endpoints_and_midpoint() {
        let xp = Tensor::<f64>::full(&[1, 2, 2], 0.2);
        let xf = Tensor::full(&[1, 2, 2], 0.8);
        let ones = Tensor::full(&[1, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(combine(&xp, &xf, &ones).unwrap(), xp);
        assert_eq!(combine(&xp, &xf, &zeros).unwrap(), xf);
        let mid = combine(&xp, &xf, &Tensor::full(&[1, 2, 2], 0.5)).unwrap();
        assert!(mid.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn combine_broadcasts_mask_over_channels() {
        let xp = Tensor::<f64>::from_f64(&[2, 1, 1], &[1.0, 0.0]).unwrap();
        let xf = Tensor::<f64>::from_f64(&[2, 1, 1], &[0.0, 1.0]).unwrap();
        let m = Tensor::<f64>::from_f64(&[1, 1, 1], &[0.25]).unwrap();
        assert_eq!(combine(&xp, &xf, &m).unwrap().data(), &[0.25, 0.75]);
    }

    #[test]
    fn combine_rejects_out_of_range_mask() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let bad = Tensor::full(&[1, 2, 2], 1.5);
        assert!(matches!(combine(&x, &x, &bad), Err(Error::Precondition(_))));
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random(&[1, 2, 5, 5], 0.0, 1.0, &mut rng);
        let flow = random(&[1, 2, 5, 5], -1.7, 1.7, &mut rng);
        let probe = random(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let loss = |s: &Tensor<f64>, f: &Tensor<f64>| {
            let out = sample_forward(s, f, true).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (ds, df) = sample_backward(&src, &flow, &probe, true);
        let h = 1e-7;
        for j in 0..flow.len() {
            let mut p = flow.clone();
            p.data_mut()[j] += h;
            let mut m = flow.clone();
            m.data_mut()[j] -= h;
            let fd = (loss(&src, &p) - loss(&src, &m)) / (2.0 * h);
            assert!((fd - df.data()[j]).abs() < 1e-6, "flow {j}: {fd} vs {}", df.data()[j]);
        }
        for j in 0..src.len() {
            let mut p = src.clone();
            p.data_mut()[j] += h;
            let mut m = src.clone();
            m.data_mut()[j] -= h;
            let fd = (loss(&p, &flow) - loss(&m, &flow)) / (2.0 * h);
            assert!((fd - ds.data()[j]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn sampling_stays_within_source_range(
            seed in any::<u64>(),
            h in 1usize..6,
            w in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random(&[1, h, w], -2.0, 3.0, &mut rng);
            let coords = random(&[2, 4, 4], -3.0, 8.0, &mut rng);
            let out = bilinear_sample(&img, &coords).unwrap();
            let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in out.data() {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn combine_is_convex(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xp = random(&[2, 3, 3], 0.0, 1.0, &mut rng);
            let xf = random(&[2, 3, 3], 0.0, 1.0, &mut rng);
            let m = random(&[1, 3, 3], 0.0, 1.0, &mut rng);
            let out = combine(&xp, &xf, &m).unwrap();
            for k in 0..out.len() {
                let (a, b) = (xp.data()[k], xf.data()[k]);
                prop_assert!(out.data()[k] >= a.min(b) - 1e-12);
                prop_assert!(out.data()[k] <= a.max(b) + 1e-12);
            }
        }
    }
}
