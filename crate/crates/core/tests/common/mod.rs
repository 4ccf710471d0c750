//! Central finite-difference gradient checks shared by the integration tests.
#![allow(dead_code)]

use rand::seq::index::sample;
use rand::Rng as _;

use stockdd::autodiff::{Graph, Var};
use stockdd::data::N_FACTORS;
use stockdd::distill::DistillParams;
use stockdd::model::{Batch, DisentangleModel, DistillBatch, LossWeights, ModelConfig};
use stockdd::nn::{GruLayer, MlpHead, Phase};
use stockdd::params::{ParamKind, ParamStore};
use stockdd::rng::{sub_rng, Rng};
use stockdd::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so that gradients that are zero up to rounding do not
/// blow up the relative error.
pub const FLOOR: f64 = 1e-6;
const COORDS_PER_TENSOR: usize = 6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn coords(n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= COORDS_PER_TENSOR {
        (0..n).collect()
    } else {
        sample(rng, n, COORDS_PER_TENSOR).into_vec()
    }
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

type Build<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Var + 'a;

fn eval(store: &ParamStore, inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let l = build(&mut g, store, &vars);
    g.scalar(l)
}

/// Largest relative error over sampled coordinates of every trainable
/// parameter and every input of `build`.
pub fn check_graph(store: &ParamStore, inputs: &[Tensor], build: &Build, rng: &mut Rng) -> (f64, usize) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, store, &vars);
    let grads = g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut s = store.clone();
    let ids: Vec<_> = store.ids().filter(|id| store.entry(*id).kind == ParamKind::Trainable).collect();
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for k in coords(n, rng) {
            let base = store.get(id).data()[k];
            let num = central(|h| {
                s.get_mut(id).data_mut()[k] = base + h;
                let v = eval(&s, inputs, build);
                s.get_mut(id).data_mut()[k] = base;
                v
            });
            worst = worst.max(rel_err(analytic[k], num));
            checked += 1;
        }
    }
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for k in coords(n, rng) {
            let base = inputs[i].data()[k];
            let num = central(|h| {
                xs[i].data_mut()[k] = base + h;
                let v = eval(store, &xs, build);
                xs[i].data_mut()[k] = base;
                v
            });
            worst = worst.max(rel_err(analytic[k], num));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Weighted sum of all entries of `v`, so every output coordinate matters.
fn project(g: &mut Graph, v: Var, w: &Tensor) -> Var {
    let c = g.constant(w.clone());
    let p = g.mul(v, c).unwrap();
    g.sum(p)
}

pub fn gru_instance(seed: u64) -> (f64, usize) {
    let mut rng = sub_rng(seed, "gradcheck.gru");
    let batch = rng.random_range(1..=4);
    let steps = rng.random_range(1..=6);
    let input = rng.random_range(1..=5);
    let hidden = rng.random_range(1..=5);
    let with_h0 = rng.random_bool(0.5);
    let mut store = ParamStore::new();
    let layer = GruLayer::new(&mut store, "gru", input, hidden, &mut rng);
    let x = random_tensor(&mut rng, &[steps * batch, input], 1.5);
    let proj = random_tensor(&mut rng, &[steps * batch, hidden], 1.0);
    let mut inputs = vec![x];
    if with_h0 {
        inputs.push(random_tensor(&mut rng, &[batch, hidden], 0.9));
    }
    let build = |g: &mut Graph, s: &ParamStore, v: &[Var]| {
        let out = layer.forward(g, s, v[0], batch, v.get(1).copied()).unwrap();
        project(g, out.states, &proj)
    };
    check_graph(&store, &inputs, &build, &mut rng)
}

pub fn mlp_instance(seed: u64) -> (f64, usize) {
    let mut rng = sub_rng(seed, "gradcheck.mlp");
    let n = rng.random_range(3..=8);
    let input = rng.random_range(1..=5);
    let hidden = rng.random_range(2..=6);
    let output = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    let head = MlpHead::new(&mut store, "mlp", input, hidden, output, &mut rng);
    // move gamma and beta away from their initial values
    for id in [head.gamma, head.beta] {
        let t = random_tensor(&mut rng, &[hidden], 1.0);
        store.set(id, t).unwrap();
    }
    let x = random_tensor(&mut rng, &[n, input], 2.0);
    let proj = random_tensor(&mut rng, &[n, output], 1.0);
    let build = |g: &mut Graph, s: &ParamStore, v: &[Var]| {
        let out = head.forward(g, s, v[0], Phase::Train { update_stats: false }).unwrap();
        project(g, out, &proj)
    };
    check_graph(&store, &[x], &build, &mut rng)
}

pub fn cross_entropy_instance(seed: u64) -> (f64, usize) {
    let mut rng = sub_rng(seed, "gradcheck.ce");
    let n = rng.random_range(1..=6);
    let c = rng.random_range(2..=5);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let logits = random_tensor(&mut rng, &[n, c], 3.0);
    let build = |g: &mut Graph, _: &ParamStore, v: &[Var]| g.cross_entropy(v[0], &labels).unwrap();
    check_graph(&ParamStore::new(), &[logits], &build, &mut rng)
}

pub fn mse_instance(seed: u64) -> (f64, usize) {
    let mut rng = sub_rng(seed, "gradcheck.mse");
    let n = rng.random_range(1..=6);
    let c = rng.random_range(1..=4);
    let pred = random_tensor(&mut rng, &[n, c], 2.0);
    let target = random_tensor(&mut rng, &[n, c], 2.0);
    let build = |g: &mut Graph, _: &ParamStore, v: &[Var]| g.mse(v[0], v[1]).unwrap();
    check_graph(&ParamStore::new(), &[pred, target], &build, &mut rng)
}

/// The full main objective of the seven-network model, including the
/// weighted distillation term, with the dropout mask fixed by re-seeding.
pub fn composite_instance(seed: u64) -> (f64, usize) {
    let mut rng = sub_rng(seed, "gradcheck.composite");
    let config = ModelConfig {
        factors: N_FACTORS,
        window: rng.random_range(2..=5),
        hidden: rng.random_range(2..=4),
        feature: rng.random_range(2..=4),
        mlp_hidden: rng.random_range(2..=4),
        dropout: 0.5,
    };
    let n = rng.random_range(3..=6);
    let mut model = DisentangleModel::new(config, seed).unwrap();
    let x = random_tensor(&mut rng, &[config.window * n, N_FACTORS], 1.5);
    let mut y_m: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    y_m[0] = 0;
    let batch = Batch {
        x,
        y_e: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        y_m,
    };
    let lower = DistillParams::default().lower_bound();
    let distill = DistillBatch {
        ht_e: random_tensor(&mut rng, &[n, config.hidden], 0.9),
        ht_m: random_tensor(&mut rng, &[n, config.hidden], 0.9),
        w_e: (0..n).map(|_| rng.random_range(lower..=1.0)).collect(),
        w_m: (0..n).map(|_| rng.random_range(lower..=1.0)).collect(),
    };
    let w = LossWeights::default();
    let dropout_rng = sub_rng(seed, "gradcheck.composite.dropout");

    let (_, grads, _) = model
        .main_gradients(&batch, &w, Some(&distill), &mut dropout_rng.clone())
        .unwrap();
    let ids: Vec<_> = model
        .store
        .ids()
        .filter(|id| model.store.entry(*id).kind == ParamKind::Trainable)
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let len = model.store.get(id).len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for k in coords(len, &mut rng) {
            let base = model.store.get(id).data()[k];
            let num = central(|h| {
                model.store.get_mut(id).data_mut()[k] = base + h;
                let l = model
                    .losses(&batch, Phase::TRAIN, &w, Some(&distill), Some(&mut dropout_rng.clone()))
                    .unwrap()
                    .l1;
                model.store.get_mut(id).data_mut()[k] = base;
                l
            });
            worst = worst.max(rel_err(analytic[k], num));
            checked += 1;
        }
    }
    (worst, checked)
}

pub type Instance = fn(u64) -> (f64, usize);

pub const FAMILIES: [(&str, Instance, usize); 5] = [
    ("gru", gru_instance, 30),
    ("mlp+bn", mlp_instance, 30),
    ("softmax-ce", cross_entropy_instance, 20),
    ("mse", mse_instance, 20),
    ("composite", composite_instance, 20),
];
