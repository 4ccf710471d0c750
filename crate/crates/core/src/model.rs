//! The disentanglement network: two encoders, a decoder, two predictors and
//! two adversarial predictors, plus a plain GRU regressor used as a baseline.
//!
//! Inputs are time-major `(steps * batch) x factors` matrices: rows
//! `t * batch .. (t + 1) * batch` hold step `t` of every sample.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Gradients, Graph, Var};
use crate::checkpoint;
use crate::data::{StockSample, N_FACTORS, WINDOW};
use crate::distill::{distill_loss, DistillWeights};
use crate::error::{Error, Result};
use crate::nn::{Dropout, GruLayer, MlpHead, Phase};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::{sub_rng, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub factors: usize,
    pub window: usize,
    pub hidden: usize,
    /// Width of the disentangled features `f_E` and `f_M`.
    pub feature: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            factors: N_FACTORS,
            window: WINDOW,
            hidden: 64,
            feature: 64,
            mlp_hidden: 64,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            mu: 0.05,
            xi: 0.8,
        }
    }
}

/// Parameter groups updated by the two alternating objectives.
pub const ENC_PREFIXES: [&str; 2] = ["enc_e.", "enc_m."];
pub const DEC_PREFIXES: [&str; 1] = ["dec."];
pub const PRE_PREFIXES: [&str; 2] = ["pre_e.", "pre_m."];
pub const ADV_PREFIXES: [&str; 2] = ["adv_e.", "adv_m."];

/// A training batch in model layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    /// Excess-return targets, already in training scale.
    pub y_e: Vec<f64>,
    pub y_m: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.y_e.len()
    }

    /// Stacks samples time-major. `label_scale` divides the excess target.
    pub fn from_samples(samples: &[&StockSample], window: usize, label_scale: f64) -> Result<Self> {
        let x = stack_features(samples.iter().map(|s| s.features.as_slice()), samples.len(), window)?;
        Ok(Self {
            x,
            y_e: samples.iter().map(|s| s.y_e / label_scale).collect(),
            y_m: samples.iter().map(|s| s.y_m.index()).collect(),
        })
    }
}

/// Factor-major sample features to a time-major `(window * n) x factors` matrix.
pub fn stack_features<'a>(features: impl Iterator<Item = &'a [f64]>, n: usize, window: usize) -> Result<Tensor> {
    let mut data = vec![0.0; window * n * N_FACTORS];
    let mut count = 0;
    for (b, f) in features.enumerate() {
        if f.len() != N_FACTORS * window {
            return Err(Error::shape("sample features", &[f.len()], &[N_FACTORS * window]));
        }
        for t in 0..window {
            let row = (t * n + b) * N_FACTORS;
            for k in 0..N_FACTORS {
                data[row + k] = f[k * window + t];
            }
        }
        count += 1;
    }
    if count != n {
        return Err(Error::shape("stack_features", &[count], &[n]));
    }
    Tensor::matrix(window * n, N_FACTORS, data)
}

/// Inverse of [`stack_features`]: one factor-major vector per sample.
pub fn unstack_features(x: &Tensor, n: usize, window: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; N_FACTORS * window]; n];
    for t in 0..window {
        for (b, f) in out.iter_mut().enumerate() {
            let row = x.row(t * n + b);
            for k in 0..N_FACTORS {
                f[k * window + t] = row[k];
            }
        }
    }
    out
}

/// Teacher targets and knowledge weights aligned with a batch.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub ht_e: Tensor,
    pub ht_m: Tensor,
    pub w_e: Vec<f64>,
    pub w_m: Vec<f64>,
}

impl DistillBatch {
    /// Rows `idx` of a full-set trace; `None` weights give static distillation.
    pub fn gather(
        ht_e: &Tensor,
        ht_m: &Tensor,
        weights: Option<(&DistillWeights, &DistillWeights)>,
        idx: &[usize],
    ) -> Result<Self> {
        let pick = |t: &Tensor| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(idx.len(), cols, data)
        };
        let (w_e, w_m) = match weights {
            Some((e, m)) => (idx.iter().map(|&i| e.w[i]).collect(), idx.iter().map(|&i| m.w[i]).collect()),
            None => (vec![1.0; idx.len()], vec![1.0; idx.len()]),
        };
        Ok(Self {
            ht_e: pick(ht_e)?,
            ht_m: pick(ht_m)?,
            w_e,
            w_m,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pre: f64,
    pub l_adv: f64,
    pub l_rec: f64,
    pub l_dis: Option<f64>,
    pub l1: f64,
    pub l2: f64,
}

impl LossReport {
    /// `l1` recomputed from the components.
    pub fn composed_l1(&self, w: &LossWeights) -> f64 {
        let base = self.l_pre - w.lambda * self.l_adv + w.mu * self.l_rec;
        match self.l_dis {
            Some(d) => base + w.xi * d,
            None => base,
        }
    }

    fn check_finite(&self, context: &str) -> Result<()> {
        let vals = [self.l_pre, self.l_adv, self.l_rec, self.l1, self.l2, self.l_dis.unwrap_or(0.0)];
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence {
                context: format!("{context}: {self:?}"),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvReport {
    pub l_adv: f64,
    pub l2: f64,
}

#[derive(Debug, Clone)]
struct Encoder {
    gru: GruLayer,
    mlp: MlpHead,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub f_e: Var,
    pub f_m: Var,
    pub states_e: Var,
    pub states_m: Var,
    pub last_e: Var,
    pub last_m: Var,
}

/// Eval-mode outputs over a sample set.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// Excess prediction in training scale.
    pub pred_e: Vec<f64>,
    /// Row-major `n x 3` class probabilities.
    pub probs: Vec<f64>,
    pub adv_e: Vec<f64>,
    pub adv_probs: Vec<f64>,
    pub f_e: Tensor,
    pub f_m: Tensor,
    pub last_e: Tensor,
    pub last_m: Tensor,
}

#[derive(Debug, Clone)]
pub struct DisentangleModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    enc_e: Encoder,
    enc_m: Encoder,
    dec_gru: GruLayer,
    dec_mlp: MlpHead,
    pre_e: MlpHead,
    pre_m: MlpHead,
    adv_e: MlpHead,
    adv_m: MlpHead,
    dropout: Dropout,
}

fn rows_of(t: &mut Vec<f64>, g: &Graph, v: Var) {
    t.extend_from_slice(g.value(v).data());
}

impl DisentangleModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = sub_rng(seed, "model.init");
        let mut store = ParamStore::new();
        let c = config;
        let encoder = |store: &mut ParamStore, name: &str, rng: &mut Rng| Encoder {
            gru: GruLayer::new(store, &format!("{name}.gru"), c.factors, c.hidden, rng),
            mlp: MlpHead::new(store, &format!("{name}.mlp"), c.hidden, c.mlp_hidden, c.feature, rng),
        };
        let enc_e = encoder(&mut store, "enc_e", &mut rng);
        let enc_m = encoder(&mut store, "enc_m", &mut rng);
        let dec_gru = GruLayer::new(&mut store, "dec.gru", 2 * c.feature, c.hidden, &mut rng);
        let dec_mlp = MlpHead::new(&mut store, "dec.mlp", c.hidden, c.mlp_hidden, c.factors, &mut rng);
        let pre_e = MlpHead::new(&mut store, "pre_e", c.feature, c.mlp_hidden, 1, &mut rng);
        let pre_m = MlpHead::new(&mut store, "pre_m", c.feature, c.mlp_hidden, 3, &mut rng);
        let adv_e = MlpHead::new(&mut store, "adv_e", c.feature, c.mlp_hidden, 1, &mut rng);
        let adv_m = MlpHead::new(&mut store, "adv_m", c.feature, c.mlp_hidden, 3, &mut rng);
        Ok(Self {
            config,
            store,
            enc_e,
            enc_m,
            dec_gru,
            dec_mlp,
            pre_e,
            pre_m,
            adv_e,
            adv_m,
            dropout: Dropout::new(c.dropout)?,
        })
    }

    fn trainable_with(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .ids_with_prefixes(prefixes)
            .into_iter()
            .filter(|id| self.store.entry(*id).kind == ParamKind::Trainable)
            .collect()
    }

    /// Trainable parameters of the encoders, decoder and predictors.
    pub fn main_param_ids(&self) -> Vec<ParamId> {
        let mut p: Vec<&str> = ENC_PREFIXES.to_vec();
        p.extend(DEC_PREFIXES);
        p.extend(PRE_PREFIXES);
        self.trainable_with(&p)
    }

    pub fn adv_param_ids(&self) -> Vec<ParamId> {
        self.trainable_with(&ADV_PREFIXES)
    }

    pub fn main_optimizer(&self, cfg: AdamConfig) -> Adam {
        Adam::new(cfg, self.main_param_ids())
    }

    pub fn adv_optimizer(&self, cfg: AdamConfig) -> Adam {
        Adam::new(cfg, self.adv_param_ids())
    }

    fn check_input(&self, x: &Tensor, batch: usize) -> Result<()> {
        let want = [self.config.window * batch, self.config.factors];
        if x.shape() != want {
            return Err(Error::shape("model input", x.shape(), &want));
        }
        Ok(())
    }

    fn run_encoder(&self, g: &mut Graph, enc: &Encoder, x: Var, batch: usize, phase: Phase) -> Result<(Var, Var, Var)> {
        let out = enc.gru.forward(g, &self.store, x, batch, None)?;
        let f = enc.mlp.forward(g, &self.store, out.last, phase)?;
        Ok((f, out.states, out.last))
    }

    pub fn encode(&self, g: &mut Graph, x: Var, batch: usize, phase: Phase) -> Result<Encoded> {
        self.check_input(g.value(x), batch)?;
        let (f_e, states_e, last_e) = self.run_encoder(g, &self.enc_e, x, batch, phase)?;
        let (f_m, states_m, last_m) = self.run_encoder(g, &self.enc_m, x, batch, phase)?;
        Ok(Encoded {
            f_e,
            f_m,
            states_e,
            states_m,
            last_e,
            last_m,
        })
    }

    /// `[f_E | f_M]` is fed at every decoder step; dropout acts on the
    /// decoder's recurrent output in training.
    pub fn decode(&self, g: &mut Graph, f_e: Var, f_m: Var, phase: Phase, rng: Option<&mut Rng>) -> Result<Var> {
        let (we, wm) = (g.value(f_e).shape().to_vec(), g.value(f_m).shape().to_vec());
        if we != wm || we.len() != 2 || we[1] != self.config.feature {
            return Err(Error::shape("decode features", &we, &wm));
        }
        let z = g.concat_cols(&[f_e, f_m])?;
        let out = self.dec_gru.forward_repeated(g, &self.store, z, self.config.window)?;
        let states = match (phase.is_training(), rng) {
            (true, Some(rng)) => self.dropout.apply(g, out.states, true, rng)?,
            (true, None) => return Err(Error::invalid("training-mode decode needs an rng")),
            (false, _) => out.states,
        };
        self.dec_mlp.forward(g, &self.store, states, phase)
    }

    /// Builds the main objective on `g`. `adv_phase` is the phase used for
    /// the adversarial heads, which never update their statistics here.
    fn objective(
        &self,
        g: &mut Graph,
        batch: &Batch,
        phase: Phase,
        w: &LossWeights,
        distill: Option<&DistillBatch>,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, LossReport, Encoded)> {
        let n = batch.size();
        self.check_input(&batch.x, n)?;
        let adv_phase = match phase {
            Phase::Train { .. } => Phase::Train { update_stats: false },
            Phase::Eval => Phase::Eval,
        };
        let x = g.constant(batch.x.clone());
        let enc = self.encode(g, x, n, phase)?;
        let y_e = g.constant(Tensor::matrix(n, 1, batch.y_e.clone())?);

        let pe = self.pre_e.forward(g, &self.store, enc.f_e, phase)?;
        let pm = self.pre_m.forward(g, &self.store, enc.f_m, phase)?;
        let l_pe = g.mse(pe, y_e)?;
        let l_pm = g.cross_entropy(pm, &batch.y_m)?;
        let l_pre = g.add(l_pe, l_pm)?;

        let ae = self.adv_e.forward(g, &self.store, enc.f_m, adv_phase)?;
        let am = self.adv_m.forward(g, &self.store, enc.f_e, adv_phase)?;
        let l_ae = g.mse(ae, y_e)?;
        let l_am = g.cross_entropy(am, &batch.y_m)?;
        let l_adv = g.add(l_ae, l_am)?;

        let x_hat = self.decode(g, enc.f_e, enc.f_m, phase, rng)?;
        let l_rec = g.mse(x_hat, x)?;

        let neg_adv = g.scale(l_adv, -w.lambda);
        let rec = g.scale(l_rec, w.mu);
        let mut l1 = g.add(l_pre, neg_adv)?;
        l1 = g.add(l1, rec)?;
        let mut l_dis = None;
        if let Some(d) = distill {
            let ht_e = g.constant(d.ht_e.clone());
            let ht_m = g.constant(d.ht_m.clone());
            let de = distill_loss(g, &d.w_e, ht_e, enc.last_e)?;
            let dm = distill_loss(g, &d.w_m, ht_m, enc.last_m)?;
            let dis = g.add(de, dm)?;
            let weighted = g.scale(dis, w.xi);
            l1 = g.add(l1, weighted)?;
            l_dis = Some(g.scalar(dis));
        }
        let report = LossReport {
            l_pre: g.scalar(l_pre),
            l_adv: g.scalar(l_adv),
            l_rec: g.scalar(l_rec),
            l_dis,
            l1: g.scalar(l1),
            l2: g.scalar(l_adv),
        };
        Ok((l1, report, enc))
    }

    /// Loss values on a batch without touching parameters or statistics.
    pub fn losses(
        &self,
        batch: &Batch,
        phase: Phase,
        w: &LossWeights,
        distill: Option<&DistillBatch>,
        rng: Option<&mut Rng>,
    ) -> Result<LossReport> {
        let phase = match phase {
            Phase::Train { .. } => Phase::Train { update_stats: false },
            Phase::Eval => Phase::Eval,
        };
        let mut g = Graph::new();
        Ok(self.objective(&mut g, batch, phase, w, distill, rng)?.1)
    }

    /// Gradients of `l1` with respect to every parameter it touches, plus
    /// the pending running-statistics updates.
    pub fn main_gradients(
        &self,
        batch: &Batch,
        w: &LossWeights,
        distill: Option<&DistillBatch>,
        rng: &mut Rng,
    ) -> Result<(LossReport, Gradients, Vec<(ParamId, Tensor)>)> {
        let mut g = Graph::new();
        let (l1, report, _) = self.objective(&mut g, batch, Phase::TRAIN, w, distill, Some(rng))?;
        report.check_finite("main step")?;
        let updates = g.take_buffer_updates();
        let grads = g.backward(l1)?;
        Ok((report, grads, updates))
    }

    fn ensure_owned(&self, opt: &Adam, allowed: &[ParamId]) -> Result<()> {
        let allowed: HashSet<ParamId> = allowed.iter().copied().collect();
        if opt.ids().iter().all(|id| allowed.contains(id)) {
            Ok(())
        } else {
            Err(Error::invalid("optimizer owns parameters outside its group"))
        }
    }

    /// Minimizes `l1` over encoders, decoder and predictors.
    pub fn train_step_main(
        &mut self,
        batch: &Batch,
        opt: &mut Adam,
        w: &LossWeights,
        distill: Option<&DistillBatch>,
        rng: &mut Rng,
    ) -> Result<LossReport> {
        self.ensure_owned(opt, &self.main_param_ids())?;
        let (report, grads, updates) = self.main_gradients(batch, w, distill, rng)?;
        opt.step(&mut self.store, &grads)?;
        for (id, value) in updates {
            self.store.set(id, value)?;
        }
        Ok(report)
    }

    /// Minimizes `l2 = l_adv` over the adversarial heads only. Encoder
    /// features are recomputed with batch statistics and enter as constants.
    pub fn train_step_adv(&mut self, batch: &Batch, opt: &mut Adam) -> Result<AdvReport> {
        let n = batch.size();
        self.check_input(&batch.x, n)?;
        let (f_e, f_m) = {
            let mut g = Graph::new();
            let x = g.constant(batch.x.clone());
            let enc = self.encode(&mut g, x, n, Phase::Train { update_stats: false })?;
            (g.value(enc.f_e).clone(), g.value(enc.f_m).clone())
        };
        self.adv_step_on(f_e, f_m, batch, opt)
    }

    /// One main step followed by one adversary step on the same batch. The
    /// adversary sees the encoder features of the main step's forward pass,
    /// detached, so the encoders run once per batch.
    pub fn train_step_pair(
        &mut self,
        batch: &Batch,
        main_opt: &mut Adam,
        adv_opt: &mut Adam,
        w: &LossWeights,
        distill: Option<&DistillBatch>,
        rng: &mut Rng,
    ) -> Result<(LossReport, AdvReport)> {
        self.ensure_owned(main_opt, &self.main_param_ids())?;
        let mut g = Graph::new();
        let (l1, report, enc) = self.objective(&mut g, batch, Phase::TRAIN, w, distill, Some(rng))?;
        report.check_finite("main step")?;
        let f_e = g.value(enc.f_e).clone();
        let f_m = g.value(enc.f_m).clone();
        let updates = g.take_buffer_updates();
        let grads = g.backward(l1)?;
        main_opt.step(&mut self.store, &grads)?;
        for (id, value) in updates {
            self.store.set(id, value)?;
        }
        let adv = self.adv_step_on(f_e, f_m, batch, adv_opt)?;
        Ok((report, adv))
    }

    fn adv_step_on(&mut self, f_e: Tensor, f_m: Tensor, batch: &Batch, opt: &mut Adam) -> Result<AdvReport> {
        self.ensure_owned(opt, &self.adv_param_ids())?;
        let n = batch.size();
        let mut g = Graph::new();
        let f_e = g.constant(f_e);
        let f_m = g.constant(f_m);
        let y_e = g.constant(Tensor::matrix(n, 1, batch.y_e.clone())?);
        let ae = self.adv_e.forward(&mut g, &self.store, f_m, Phase::TRAIN)?;
        let am = self.adv_m.forward(&mut g, &self.store, f_e, Phase::TRAIN)?;
        let l_ae = g.mse(ae, y_e)?;
        let l_am = g.cross_entropy(am, &batch.y_m)?;
        let l_adv = g.add(l_ae, l_am)?;
        let value = g.scalar(l_adv);
        if !value.is_finite() {
            return Err(Error::Divergence {
                context: format!("adversary step: l_adv = {value}"),
            });
        }
        let updates = g.take_buffer_updates();
        let grads = g.backward(l_adv)?;
        opt.step(&mut self.store, &grads)?;
        for (id, v) in updates {
            self.store.set(id, v)?;
        }
        Ok(AdvReport { l_adv: value, l2: value })
    }

    /// Eval-mode outputs for `x` holding `n` samples.
    pub fn forward_eval(&self, x: &Tensor, n: usize) -> Result<Predictions> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let enc = self.encode(&mut g, xv, n, Phase::Eval)?;
        let pe = self.pre_e.forward(&mut g, &self.store, enc.f_e, Phase::Eval)?;
        let pm = self.pre_m.forward(&mut g, &self.store, enc.f_m, Phase::Eval)?;
        let ae = self.adv_e.forward(&mut g, &self.store, enc.f_m, Phase::Eval)?;
        let am = self.adv_m.forward(&mut g, &self.store, enc.f_e, Phase::Eval)?;
        Ok(Predictions {
            pred_e: g.value(pe).data().to_vec(),
            probs: softmax(g.value(pm)).into_data(),
            adv_e: g.value(ae).data().to_vec(),
            adv_probs: softmax(g.value(am)).into_data(),
            f_e: g.value(enc.f_e).clone(),
            f_m: g.value(enc.f_m).clone(),
            last_e: g.value(enc.last_e).clone(),
            last_m: g.value(enc.last_m).clone(),
        })
    }

    /// Eval-mode predictions over samples, processed in chunks.
    pub fn predict(&self, samples: &[&StockSample], chunk: usize) -> Result<Predictions> {
        let c = self.config;
        let mut out = Predictions {
            pred_e: Vec::new(),
            probs: Vec::new(),
            adv_e: Vec::new(),
            adv_probs: Vec::new(),
            f_e: Tensor::zeros(&[0, c.feature]),
            f_m: Tensor::zeros(&[0, c.feature]),
            last_e: Tensor::zeros(&[0, c.hidden]),
            last_m: Tensor::zeros(&[0, c.hidden]),
        };
        let (mut fe, mut fm, mut le, mut lm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for part in samples.chunks(chunk.max(1)) {
            let x = stack_features(part.iter().map(|s| s.features.as_slice()), part.len(), c.window)?;
            let p = self.forward_eval(&x, part.len())?;
            out.pred_e.extend(p.pred_e);
            out.probs.extend(p.probs);
            out.adv_e.extend(p.adv_e);
            out.adv_probs.extend(p.adv_probs);
            fe.extend_from_slice(p.f_e.data());
            fm.extend_from_slice(p.f_m.data());
            le.extend_from_slice(p.last_e.data());
            lm.extend_from_slice(p.last_m.data());
        }
        let n = samples.len();
        out.f_e = Tensor::matrix(n, c.feature, fe)?;
        out.f_m = Tensor::matrix(n, c.feature, fm)?;
        out.last_e = Tensor::matrix(n, c.hidden, le)?;
        out.last_m = Tensor::matrix(n, c.hidden, lm)?;
        Ok(out)
    }

    /// Eval-mode decoder output for given feature rows, time-major.
    pub fn decode_eval(&self, f_e: &Tensor, f_m: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let fe = g.constant(f_e.clone());
        let fm = g.constant(f_m.clone());
        let x_hat = self.decode(&mut g, fe, fm, Phase::Eval, None)?;
        Ok(g.value(x_hat).clone())
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "kind": "disentangle", "model": self.config, "extra": extra });
        checkpoint::save(path, &self.store, &meta.to_string())
    }

    /// Loads a checkpoint written by [`DisentangleModel::save`].
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (stored, meta) = checkpoint::load(path)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)?;
        if meta["kind"] != "disentangle" {
            return Err(Error::Checkpoint(format!("{} is not a disentangle checkpoint", path.display())));
        }
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let mut model = Self::new(config, 0)?;
        model.store.load_from(&stored)?;
        Ok((model, meta["extra"].clone()))
    }
}

/// A single GRU encoder with a regression head, trained on excess return only.
#[derive(Debug, Clone)]
pub struct GruBaseline {
    pub config: ModelConfig,
    pub store: ParamStore,
    gru: GruLayer,
    head: MlpHead,
}

impl GruBaseline {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = sub_rng(seed, "baseline.init");
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", config.factors, config.hidden, &mut rng);
        let head = MlpHead::new(&mut store, "head", config.hidden, config.mlp_hidden, 1, &mut rng);
        Self {
            config,
            store,
            gru,
            head,
        }
    }

    pub fn optimizer(&self, cfg: AdamConfig) -> Adam {
        let ids = self
            .store
            .ids()
            .filter(|id| self.store.entry(*id).kind == ParamKind::Trainable)
            .collect();
        Adam::new(cfg, ids)
    }

    fn forward(&self, g: &mut Graph, x: &Tensor, n: usize, phase: Phase) -> Result<Var> {
        let want = [self.config.window * n, self.config.factors];
        if x.shape() != want {
            return Err(Error::shape("baseline input", x.shape(), &want));
        }
        let xv = g.constant(x.clone());
        let out = self.gru.forward(g, &self.store, xv, n, None)?;
        self.head.forward(g, &self.store, out.last, phase)
    }

    pub fn train_step(&mut self, batch: &Batch, opt: &mut Adam) -> Result<f64> {
        let n = batch.size();
        let mut g = Graph::new();
        let pred = self.forward(&mut g, &batch.x, n, Phase::TRAIN)?;
        let y = g.constant(Tensor::matrix(n, 1, batch.y_e.clone())?);
        let loss = g.mse(pred, y)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence {
                context: format!("baseline step: loss = {value}"),
            });
        }
        let updates = g.take_buffer_updates();
        let grads = g.backward(loss)?;
        opt.step(&mut self.store, &grads)?;
        for (id, v) in updates {
            self.store.set(id, v)?;
        }
        Ok(value)
    }

    pub fn predict(&self, samples: &[&StockSample], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let x = stack_features(part.iter().map(|s| s.features.as_slice()), part.len(), self.config.window)?;
            let mut g = Graph::new();
            let p = self.forward(&mut g, &x, part.len(), Phase::Eval)?;
            rows_of(&mut out, &g, p);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "kind": "gru_baseline", "model": self.config, "extra": extra });
        checkpoint::save(path, &self.store, &meta.to_string())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (stored, meta) = checkpoint::load(path)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)?;
        if meta["kind"] != "gru_baseline" {
            return Err(Error::Checkpoint(format!("{} is not a baseline checkpoint", path.display())));
        }
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let mut model = Self::new(config, 0);
        model.store.load_from(&stored)?;
        Ok((model, meta["extra"].clone()))
    }
}
