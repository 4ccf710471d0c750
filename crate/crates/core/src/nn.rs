//! GRU sequence layers, batch-normalized MLP heads and dropout.

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Forward-pass phase. Training uses batch statistics for batch
/// normalization; `update_stats` controls whether running statistics move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train { update_stats: bool },
    Eval,
}

impl Phase {
    pub const TRAIN: Phase = Phase::Train { update_stats: true };

    pub fn is_training(self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Single-layer GRU. Gate blocks are concatenated column-wise in the order
/// `[z | r | n]`: `w` is `input x 3H`, `u` is `H x 3H`, `b` has `3H` entries.
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

/// Outputs of a GRU pass. `states` is `(steps * batch) x H`, time-major.
#[derive(Debug, Clone, Copy)]
pub struct GruOutput {
    pub states: Var,
    pub last: Var,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let three = 3 * hidden;
        let w = store.trainable(
            format!("{prefix}.w"),
            uniform(rng, &[input, three], 1.0 / (input as f64).sqrt()),
        );
        let u = store.trainable(
            format!("{prefix}.u"),
            uniform(rng, &[hidden, three], 1.0 / (hidden as f64).sqrt()),
        );
        let b = store.trainable(
            format!("{prefix}.b"),
            uniform(rng, &[three], 1.0 / (hidden as f64).sqrt()),
        );
        Self {
            input_size: input,
            hidden_size: hidden,
            w,
            u,
            b,
        }
    }

    /// Runs the recurrence over a time-major input `(steps * batch) x input`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        h0: Option<Var>,
    ) -> Result<GruOutput> {
        if g.value(x).cols() != self.input_size {
            return Err(Error::shape("gru input", g.value(x).shape(), &[self.input_size]));
        }
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let u = g.param(store, self.u);
        let xw = g.matmul(x, w)?;
        let xproj = g.add_row(xw, b)?;
        self.recur(g, xproj, u, batch, h0)
    }

    /// Feeds the same `batch x input` vector at each of `steps` steps.
    pub fn forward_repeated(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        steps: usize,
    ) -> Result<GruOutput> {
        if g.value(input).cols() != self.input_size {
            return Err(Error::shape("gru input", g.value(input).shape(), &[self.input_size]));
        }
        let batch = g.value(input).rows();
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let u = g.param(store, self.u);
        let xw = g.matmul(input, w)?;
        let proj = g.add_row(xw, b)?;
        let xproj = g.tile_rows(proj, steps)?;
        self.recur(g, xproj, u, batch, None)
    }

    fn recur(&self, g: &mut Graph, xproj: Var, u: Var, batch: usize, h0: Option<Var>) -> Result<GruOutput> {
        let states = g.gru(xproj, u, h0, batch)?;
        let rows = g.value(states).rows();
        let last = g.slice_rows(states, rows - batch, batch)?;
        Ok(GruOutput { states, last })
    }

    /// Step-by-step recurrence built only from primitive graph operations.
    /// Used to cross-check the fused kernel.
    pub fn forward_reference(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        h0: Option<Var>,
    ) -> Result<GruOutput> {
        let h = self.hidden_size;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let u = g.param(store, self.u);
        let u_zr = g.slice_cols(u, 0, 2 * h)?;
        let u_n = g.slice_cols(u, 2 * h, h)?;
        let steps = g.value(x).rows() / batch;
        let mut state = match h0 {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&[batch, h])),
        };
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(x, t * batch, batch)?;
            let xw = g.matmul(xt, w)?;
            let xp = g.add_row(xw, b)?;
            let x_zr = g.slice_cols(xp, 0, 2 * h)?;
            let x_n = g.slice_cols(xp, 2 * h, h)?;
            let h_zr = g.matmul(state, u_zr)?;
            let a_zr = g.add(x_zr, h_zr)?;
            let gates = g.sigmoid(a_zr);
            let z = g.slice_cols(gates, 0, h)?;
            let r = g.slice_cols(gates, h, h)?;
            let rh = g.mul(r, state)?;
            let rhu = g.matmul(rh, u_n)?;
            let a_n = g.add(x_n, rhu)?;
            let n = g.tanh(a_n);
            // h' = n + z * (h - n)
            let diff = g.sub(state, n)?;
            let zd = g.mul(z, diff)?;
            state = g.add(n, zd)?;
            outs.push(state);
        }
        let states = g.concat_rows(&outs)?;
        Ok(GruOutput {
            states,
            last: state,
        })
    }
}

/// `affine -> batch norm -> tanh -> affine`.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub input_size: usize,
    pub hidden_size: usize,
    pub output_size: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        let b_in = 1.0 / (input as f64).sqrt();
        let b_h = 1.0 / (hidden as f64).sqrt();
        let w1 = store.trainable(format!("{prefix}.fc1.w"), uniform(rng, &[input, hidden], b_in));
        let b1 = store.trainable(format!("{prefix}.fc1.b"), uniform(rng, &[hidden], b_in));
        let gamma = store.trainable(format!("{prefix}.bn.gamma"), Tensor::full(&[hidden], 1.0));
        let beta = store.trainable(format!("{prefix}.bn.beta"), Tensor::zeros(&[hidden]));
        let running_mean = store.buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[hidden]));
        let running_var = store.buffer(format!("{prefix}.bn.running_var"), Tensor::full(&[hidden], 1.0));
        let w2 = store.trainable(format!("{prefix}.fc2.w"), uniform(rng, &[hidden, output], b_h));
        let b2 = store.trainable(format!("{prefix}.fc2.b"), uniform(rng, &[output], b_h));
        Self {
            input_size: input,
            hidden_size: hidden,
            output_size: output,
            w1,
            b1,
            gamma,
            beta,
            running_mean,
            running_var,
            w2,
            b2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, phase: Phase) -> Result<Var> {
        if g.value(x).cols() != self.input_size || g.value(x).shape().len() != 2 {
            return Err(Error::shape("mlp input", g.value(x).shape(), &[self.input_size]));
        }
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let xw = g.matmul(x, w1)?;
        let pre = g.add_row(xw, b1)?;
        let normalized = match phase {
            Phase::Train { update_stats } => {
                let (xhat, mean, var) = g.batch_norm(pre, BN_EPS)?;
                if update_stats {
                    let rm = store.get(self.running_mean).data();
                    let rv = store.get(self.running_var).data();
                    let new_mean = rm
                        .iter()
                        .zip(&mean)
                        .map(|(r, m)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * m)
                        .collect();
                    let new_var = rv
                        .iter()
                        .zip(&var)
                        .map(|(r, v)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * v)
                        .collect();
                    g.push_buffer_update(self.running_mean, Tensor::vector(new_mean));
                    g.push_buffer_update(self.running_var, Tensor::vector(new_var));
                }
                xhat
            }
            Phase::Eval => {
                let neg_mean = store.get(self.running_mean).data().iter().map(|m| -m).collect();
                let inv_std = store
                    .get(self.running_var)
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                let shift = g.constant(Tensor::vector(neg_mean));
                let scale = g.constant(Tensor::vector(inv_std));
                let centered = g.add_row(pre, shift)?;
                g.mul_row(centered, scale)?
            }
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul_row(normalized, gamma)?;
        let shifted = g.add_row(scaled, beta)?;
        let act = g.tanh(shifted);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let out = g.matmul(act, w2)?;
        g.add_row(out, b2)
    }
}

/// Inverted dropout: training zeroes units with probability `rate` and scales
/// survivors by `1 / (1 - rate)`; evaluation is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate })
    }

    pub fn apply(&self, g: &mut Graph, x: Var, training: bool, rng: &mut Rng) -> Result<Var> {
        if !training || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let mask = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;
    use approx::assert_abs_diff_eq;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.entry(id).kind == crate::params::ParamKind::Trainable {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn time_major(batch: usize, steps: usize, input: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(batch * steps * input);
        for t in 0..steps {
            for b in 0..batch {
                for i in 0..input {
                    data.push(f(t, b, i));
                }
            }
        }
        Tensor::matrix(steps * batch, input, data).unwrap()
    }

    #[test]
    fn zero_gru_stays_zero() {
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 3, 4, &mut sub_rng(1, "t"));
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant(time_major(2, 5, 3, |t, b, i| (t + b + i) as f64 - 2.0));
        let out = gru.forward(&mut g, &store, x, 2, None).unwrap();
        assert!(g.value(out.states).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_update_gate_copies_state() {
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 2, 3, &mut sub_rng(2, "t"));
        // z-gate bias huge => z = 1 => h' = h
        for j in 0..3 {
            store.get_mut(gru.b).data_mut()[j] = 1e3;
        }
        let mut g = Graph::new();
        let x = g.constant(time_major(1, 4, 2, |t, _, i| (t * 2 + i) as f64 * 0.3));
        let h0 = g.constant(Tensor::matrix(1, 3, vec![0.2, -0.4, 0.9]).unwrap());
        let out = gru.forward(&mut g, &store, x, 1, Some(h0)).unwrap();
        for (a, b) in g.value(out.last).data().iter().zip([0.2, -0.4, 0.9]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_unit_gru_matches_hand_recurrence() {
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 1, 1, &mut sub_rng(3, "t"));
        let (wz, wr, wn) = (0.5, -0.3, 0.8);
        let (uz, ur, un) = (0.2, 0.7, -0.6);
        let (bz, br, bn) = (0.1, 0.0, -0.2);
        store.set(gru.w, Tensor::matrix(1, 3, vec![wz, wr, wn]).unwrap()).unwrap();
        store.set(gru.u, Tensor::matrix(1, 3, vec![uz, ur, un]).unwrap()).unwrap();
        store.set(gru.b, Tensor::vector(vec![bz, br, bn])).unwrap();
        let xs = [1.0, -2.0];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0;
        for x in xs {
            let z = sig(wz * x + uz * h + bz);
            let r = sig(wr * x + ur * h + br);
            let n = (wn * x + un * (r * h) + bn).tanh();
            h = (1.0 - z) * n + z * h;
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 1, xs.to_vec()).unwrap());
        let out = gru.forward(&mut g, &store, x, 1, None).unwrap();
        assert_abs_diff_eq!(g.value(out.last).item(), h, epsilon = 1e-14);
    }

    #[test]
    fn fused_gru_matches_reference_values_and_gradients() {
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 3, 5, &mut sub_rng(4, "t"));
        let x_t = time_major(2, 6, 3, |t, b, i| ((t * 7 + b * 3 + i) as f64).sin());
        let h0_t = Tensor::matrix(2, 5, (0..10).map(|i| (i as f64 * 0.37).cos() * 0.5).collect()).unwrap();
        let run = |fused: bool| {
            let mut g = Graph::new();
            let x = g.variable(x_t.clone());
            let h0 = g.variable(h0_t.clone());
            let out = if fused {
                gru.forward(&mut g, &store, x, 2, Some(h0)).unwrap()
            } else {
                gru.forward_reference(&mut g, &store, x, 2, Some(h0)).unwrap()
            };
            let states = g.value(out.states).clone();
            let sq = g.mul(out.states, out.states).unwrap();
            let s = g.sum(sq);
            let last_sum = g.sum(out.last);
            let loss = g.add(s, last_sum).unwrap();
            let grads = g.backward(loss).unwrap();
            (
                states,
                grads.wrt(x).unwrap().to_vec(),
                grads.wrt(h0).unwrap().to_vec(),
                grads.param(gru.u).unwrap().to_vec(),
                grads.param(gru.w).unwrap().to_vec(),
            )
        };
        let a = run(true);
        let b = run(false);
        let close = |x: &[f64], y: &[f64]| {
            assert_eq!(x.len(), y.len());
            for (p, q) in x.iter().zip(y) {
                assert_abs_diff_eq!(*p, *q, epsilon = 1e-12);
            }
        };
        close(a.0.data(), b.0.data());
        close(&a.1, &b.1);
        close(&a.2, &b.2);
        close(&a.3, &b.3);
        close(&a.4, &b.4);
    }

    #[test]
    fn states_bounded_from_zero_start() {
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 2, 4, &mut sub_rng(5, "t"));
        let mut g = Graph::new();
        let x = g.constant(time_major(3, 10, 2, |t, b, i| ((t + 2 * b + 3 * i) as f64).sin() * 3.0));
        let out = gru.forward(&mut g, &store, x, 3, None).unwrap();
        assert!(g.value(out.states).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_mlp_outputs_bias() {
        let mut store = ParamStore::new();
        let head = MlpHead::new(&mut store, "h", 4, 3, 2, &mut sub_rng(6, "t"));
        zero_all(&mut store);
        store.set(head.b2, Tensor::vector(vec![0.25, -1.5])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64).collect()).unwrap());
        let y = head.forward(&mut g, &store, x, Phase::Eval).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn mlp_eval_is_deterministic() {
        let mut store = ParamStore::new();
        let head = MlpHead::new(&mut store, "h", 4, 3, 2, &mut sub_rng(7, "t"));
        let input = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, 0.0, 0.5, -0.5]).unwrap();
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let y = head.forward(&mut g, &store, x, Phase::Eval).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identical_rows_normalize_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let (y, _, var) = g.batch_norm(x, BN_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
        assert!(var.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_norm_standardizes_columns() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..40).map(|i| ((i * 13) % 7) as f64 * 1.7 + i as f64).collect();
        let x = g.constant(Tensor::matrix(10, 4, data).unwrap());
        let (y, _, _) = g.batch_norm(x, BN_EPS).unwrap();
        let v = g.value(y);
        for j in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| v.data()[i * 4 + j]).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 10.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn running_stats_only_move_when_requested() {
        let mut store = ParamStore::new();
        let head = MlpHead::new(&mut store, "h", 2, 3, 1, &mut sub_rng(8, "t"));
        let input = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        head.forward(&mut g, &store, x, Phase::Train { update_stats: false }).unwrap();
        assert!(g.take_buffer_updates().is_empty());
        let x = g.constant(input);
        head.forward(&mut g, &store, x, Phase::TRAIN).unwrap();
        let updates = g.take_buffer_updates();
        assert_eq!(updates.len(), 2);
        assert_eq!(updates[0].0, head.running_mean);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = sub_rng(9, "drop");
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0; 10]));
        let d = Dropout::new(0.5).unwrap();
        assert_eq!(d.apply(&mut g, x, false, &mut rng).unwrap(), x);
        assert_eq!(Dropout::new(0.0).unwrap().apply(&mut g, x, true, &mut rng).unwrap(), x);
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
    }

    #[test]
    fn dropout_survival_rate() {
        let n = 1_000_000;
        let mut rng = sub_rng(10, "drop");
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0; n]));
        let y = Dropout::new(0.5).unwrap().apply(&mut g, x, true, &mut rng).unwrap();
        let v = g.value(y).data();
        let survivors = v.iter().filter(|x| **x != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!(v.iter().all(|x| *x == 0.0 || *x == 2.0));
    }
}
