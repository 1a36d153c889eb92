//! Layer building blocks over the autodiff tape.

use rand::Rng;

use crate::error::Result;
use crate::graph::{sigmoid, CustomOp, Graph, Var};
use crate::params::{fan_in_uniform, orthogonal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.insert(
            &format!("{name}.weight"),
            fan_in_uniform(&[dout, din], din, rng),
        );
        let b = store.insert(&format!("{name}.bias"), fan_in_uniform(&[dout], din, rng));
        Self { w, b, din, dout }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.insert(
            &format!("{name}.weight"),
            fan_in_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
        );
        let b = store.insert(&format!("{name}.bias"), fan_in_uniform(&[cout], fan_in, rng));
        Self {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Hidden and cell activations of one LSTM layer, each `[batch, width]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    /// `[4·width, input + width]`, gate order input, forget, cell, output.
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub width: usize,
}

impl LstmCell {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let cols = input + width;
        let mut w: Tensor<T> = fan_in_uniform(&[4 * width, cols], cols, rng);
        // Recurrent blocks get orthogonal kernels.
        for gate in 0..4 {
            let q = orthogonal(width, width, rng);
            for r in 0..width {
                for c in 0..width {
                    w.data_mut()[(gate * width + r) * cols + input + c] = T::of(q[r * width + c]);
                }
            }
        }
        let w = store.insert(&format!("{name}.weight"), w);
        let b = store.insert(&format!("{name}.bias"), Tensor::zeros(&[4 * width]));
        Self {
            w,
            b,
            input,
            width,
        }
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> LstmState {
        let h = g.input(Tensor::zeros(&[batch, self.width]));
        let c = g.input(Tensor::zeros(&[batch, self.width]));
        LstmState { h, c }
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let xh = g.concat(&[x, state.h])?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let gates = g.linear(xh, w, Some(b))?;
        let fused = lstm_gates(g, gates, state.c)?;
        let h = g.slice(fused, 0, self.width)?;
        let c = g.slice(fused, self.width, self.width)?;
        Ok(LstmState { h, c })
    }
}

struct LstmGates {
    width: usize,
}

struct GateValues<T> {
    i: T,
    f: T,
    c: T,
    o: T,
}

impl LstmGates {
    fn gates<T: Real>(&self, pre: &[T], j: usize) -> GateValues<T> {
        let w = self.width;
        GateValues {
            i: sigmoid(pre[j]),
            f: sigmoid(pre[w + j]),
            c: pre[2 * w + j].tanh(),
            o: sigmoid(pre[3 * w + j]),
        }
    }
}

/// Fused gate nonlinearity: `[n, 4w]` pre-activations and `[n, w]` cell → `[n, 2w]` (h, c).
fn lstm_gates<T: Real>(g: &mut Graph<T>, gates: Var, cell: Var) -> Result<Var> {
    let width = g.shape(cell)[1];
    let n = g.shape(cell)[0];
    g.value(gates).expect_shape(&[n, 4 * width])?;
    let op = LstmGates { width };
    let pre = g.value(gates).data();
    let cp = g.value(cell).data();
    let mut out = vec![T::zero(); n * 2 * width];
    for r in 0..n {
        let row = &pre[r * 4 * width..(r + 1) * 4 * width];
        for j in 0..width {
            let gv = op.gates(row, j);
            let c = gv.f * cp[r * width + j] + gv.i * gv.c;
            out[r * 2 * width + j] = gv.o * c.tanh();
            out[r * 2 * width + width + j] = c;
        }
    }
    let value = Tensor::new(&[n, 2 * width], out)?;
    Ok(g.custom(vec![gates, cell], value, Box::new(op)))
}

impl<T: Real> CustomOp<T> for LstmGates {
    fn name(&self) -> &'static str {
        "lstm_gates"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let w = self.width;
        let pre = inputs[0].data();
        let cp = inputs[1].data();
        let n = inputs[1].dim(0);
        let mut dpre = vec![T::zero(); n * 4 * w];
        let mut dcp = vec![T::zero(); n * w];
        let one = T::one();
        for r in 0..n {
            let row = &pre[r * 4 * w..(r + 1) * 4 * w];
            for j in 0..w {
                let gv = self.gates(row, j);
                let c = output.data()[r * 2 * w + w + j];
                let tc = c.tanh();
                let dh = grad.data()[r * 2 * w + j];
                let dc = grad.data()[r * 2 * w + w + j] + dh * gv.o * (one - tc * tc);
                let d = &mut dpre[r * 4 * w..(r + 1) * 4 * w];
                d[j] = dc * gv.c * gv.i * (one - gv.i);
                d[w + j] = dc * cp[r * w + j] * gv.f * (one - gv.f);
                d[2 * w + j] = dc * gv.i * (one - gv.c * gv.c);
                d[3 * w + j] = dh * tc * gv.o * (one - gv.o);
                dcp[r * w + j] = dc * gv.f;
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape(), dpre).expect("shape")),
            Some(Tensor::new(inputs[1].shape(), dcp).expect("shape")),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_step_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::default();
        let cell = LstmCell::new(&mut store, "cell", 3, 4, &mut rng);
        let x0 = fan_in_uniform::<f64, _>(&[2, 3], 1, &mut rng);
        let c0 = fan_in_uniform::<f64, _>(&[2, 4], 1, &mut rng);
        let loss_of = |store: &ParamStore<f64>, c0: &Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let mut st = cell.zero_state(&mut g, 2);
            st.c = g.variable(c0.clone());
            let s1 = cell.step(&mut g, store, x, st).unwrap();
            let s2 = cell.step(&mut g, store, x, s1).unwrap();
            let both = g.concat(&[s2.h, s2.c]).unwrap();
            let sq = g.mul(both, both).unwrap();
            let flat = g.reshape(sq, &[1, 16]).unwrap();
            let ones = g.input(Tensor::full(&[1, 16], 1.0));
            let s = g.linear(flat, ones, None).unwrap();
            let loss = g.reshape(s, &[1]).unwrap();
            (g, loss, st.c)
        };
        let (g, loss, cvar) = loss_of(&store, &c0);
        let grads = g.backward(loss).unwrap();
        let h = 1e-6;
        for (id, grad) in grads.params() {
            for j in (0..grad.len()).step_by(7) {
                let mut plus = store.clone();
                plus.get_mut(*id).data_mut()[j] += h;
                let mut minus = store.clone();
                minus.get_mut(*id).data_mut()[j] -= h;
                let (gp, lp, _) = loss_of(&plus, &c0);
                let (gm, lm, _) = loss_of(&minus, &c0);
                let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
                let an = grad.data()[j];
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {an}");
            }
        }
        let dc = grads.wrt(cvar).unwrap();
        for j in 0..c0.len() {
            let mut plus = c0.clone();
            plus.data_mut()[j] += h;
            let mut minus = c0.clone();
            minus.data_mut()[j] -= h;
            let (gp, lp, _) = loss_of(&store, &plus);
            let (gm, lm, _) = loss_of(&store, &minus);
            let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            assert!((fd - dc.data()[j]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
