//! Round-0 training, distillation rounds, the GRU baseline and run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentMode, AugmentedSample};
use crate::backtest::{compare_curves, run_backtest, BacktestConfig, CostMode};
use crate::data::{build_samples, normalize_features, Dataset, DatasetSplit, PriceBar, SplitKind, StockSample};
use crate::distill::{excess_weights, market_weights, DistillParams, DistillWeights, TeacherTrace, TraceInputs};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{argmax_rows, daily_eval};
use crate::model::{Batch, DisentangleModel, DistillBatch, GruBaseline, LossReport, LossWeights, ModelConfig};
use crate::optim::AdamConfig;
use crate::params::ParamStore;
use crate::report::{self, PredictionRow};
use crate::rng::{derive_seed, sub_rng};
use crate::synth::{generate_synthetic_market, SynthParams};
use crate::tensor::Tensor;

pub const CODE_VERSION: &str = concat!("stockdd ", env!("CARGO_PKG_VERSION"));
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Dynamic,
    Static,
    Off,
}

impl std::str::FromStr for DistillMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Self::Dynamic),
            "static" => Ok(Self::Static),
            "off" => Ok(Self::Off),
            _ => Err(Error::invalid(format!("unknown distill mode {s:?} (dynamic|static|off)"))),
        }
    }
}

/// Every knob of a training run. Serialized as a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Bars CSV to train on; synthetic data is generated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bars: Option<PathBuf>,
    pub n_stocks: usize,
    pub n_days: usize,
    /// Seed of the synthetic market; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(flatten)]
    pub synth: SynthParams,

    pub lambda: f64,
    pub mu: f64,
    pub xi: f64,
    pub beta_day: f64,
    pub beta_sample: f64,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of the initial round; `epochs` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_epochs: Option<usize>,
    /// Stop a round after this many epochs without a validation gain; 0 disables.
    pub epoch_patience: usize,
    /// Maximum number of distillation rounds after the initial one.
    pub rounds: usize,
    /// Rounds without validation Rank IC gain before stopping.
    pub patience: usize,

    pub hidden: usize,
    pub feature: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,

    pub distill: DistillMode,
    pub augment: AugmentMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aug_count: Option<usize>,
    pub aug_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aug_epsilon: Option<f64>,
    pub aug_epsilon_quantile: f64,
    pub q_hard: f64,
    pub noise_sigma: f64,
    pub warm_start: bool,

    pub baseline: bool,
    pub save_augmented: bool,
    pub backtest_k: Vec<usize>,
    pub cost_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        let d = DistillParams::default();
        Self {
            seed: 7,
            bars: None,
            n_stocks: 100,
            n_days: 750,
            data_seed: None,
            synth: SynthParams::default(),
            lambda: w.lambda,
            mu: w.mu,
            xi: w.xi,
            beta_day: d.beta_day,
            beta_sample: d.beta_sample,
            alpha: d.alpha,
            lr: 1e-3,
            batch_size: 256,
            epochs: 30,
            initial_epochs: None,
            epoch_patience: 0,
            rounds: 3,
            patience: 1,
            hidden: m.hidden,
            feature: m.feature,
            mlp_hidden: m.mlp_hidden,
            dropout: m.dropout,
            distill: DistillMode::Dynamic,
            augment: AugmentMode::Add,
            aug_count: None,
            aug_fraction: augment::DEFAULT_AUG_FRACTION,
            aug_epsilon: None,
            aug_epsilon_quantile: augment::DEFAULT_EPSILON_QUANTILE,
            q_hard: augment::DEFAULT_Q_HARD,
            noise_sigma: 0.5,
            warm_start: false,
            baseline: true,
            save_augmented: false,
            backtest_k: vec![30, 50, 100, 200],
            cost_rate: 0.004,
        }
    }
}

impl TrainConfig {
    /// Parses a TOML document, rejecting keys that are not config fields.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        let known = Self::known_keys();
        if let Some(bad) = table.keys().find(|k| !known.contains(*k)) {
            return Err(Error::invalid(format!("unknown config key {bad:?}")));
        }
        let cfg: Self = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }

    fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = Self::default().to_table().keys().cloned().collect();
        keys.extend(["bars", "data_seed", "initial_epochs", "aug_count", "aug_epsilon"].map(String::from));
        keys
    }

    /// Replaces one field from its textual value, as used by sweeps and CLI overrides.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut table = self.to_table();
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        Self::from_toml(&toml::to_string(&table).expect("table serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [("beta_day", self.beta_day), ("beta_sample", self.beta_sample), ("alpha", self.alpha), ("dropout", self.dropout), ("q_hard", self.q_hard)];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("xi", self.xi), ("noise_sigma", self.noise_sigma), ("aug_fraction", self.aug_fraction)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("lr, batch_size and epochs must be positive"));
        }
        if self.initial_epochs == Some(0) {
            return Err(Error::invalid("initial_epochs must be positive"));
        }
        self.synth.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            feature: self.feature,
            mlp_hidden: self.mlp_hidden,
            dropout: self.dropout,
            ..ModelConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            mu: self.mu,
            xi: self.xi,
        }
    }

    pub fn distill_params(&self) -> DistillParams {
        DistillParams {
            beta_day: self.beta_day,
            beta_sample: self.beta_sample,
            alpha: self.alpha,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Loads or synthesizes bars.
pub fn load_bars(cfg: &TrainConfig) -> Result<Vec<PriceBar>> {
    match &cfg.bars {
        Some(p) => io::read_bars(p),
        None => generate_synthetic_market(cfg.n_stocks, cfg.n_days, cfg.data_seed.unwrap_or(cfg.seed), &cfg.synth),
    }
}

/// Labelled, normalized samples with the default chronological split.
pub fn dataset_from_bars(bars: &[PriceBar], window: usize) -> Result<Dataset> {
    let n_days = bars.iter().map(|b| b.day).max().ok_or_else(|| Error::invalid("no bars"))? + 1;
    normalize_features(build_samples(bars, window, DatasetSplit::for_series(n_days, window)?)?)
}

pub fn prepare_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    dataset_from_bars(&load_bars(cfg)?, cfg.model_config().window)
}

/// Validation measures used for model selection and round bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub rank_ic: f64,
    pub ic: f64,
    pub accuracy: f64,
}

pub fn validation_metrics(model: &DisentangleModel, samples: &[&StockSample]) -> Result<ValMetrics> {
    let p = model.predict(samples, EVAL_CHUNK)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.y_e).collect();
    let days: Vec<u32> = samples.iter().map(|s| s.day).collect();
    let daily = daily_eval(&p.pred_e, &labels, &days)?;
    let pred_m = argmax_rows(&p.probs, 3);
    let hits = pred_m.iter().zip(samples).filter(|(p, s)| **p == s.y_m.index()).count();
    Ok(ValMetrics {
        rank_ic: daily.mean_rank_ic(),
        ic: daily.mean_ic(),
        accuracy: hits as f64 / samples.len().max(1) as f64,
    })
}

/// Per-batch loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub round: usize,
    pub epoch: usize,
    pub batch: usize,
    pub l_pre: f64,
    pub l_adv: f64,
    pub l_rec: f64,
    pub l_dis: Option<f64>,
    pub l1: f64,
    pub l2: f64,
}

impl BatchLog {
    pub fn report(&self) -> LossReport {
        LossReport {
            l_pre: self.l_pre,
            l_adv: self.l_adv,
            l_rec: self.l_rec,
            l_dis: self.l_dis,
            l1: self.l1,
            l2: self.l2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub round: usize,
    pub epoch: usize,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub val_rank_ic: f64,
    pub val_ic: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub batches: Vec<BatchLog>,
    pub epochs: Vec<EpochLog>,
}

impl RunLog {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
        for b in &self.batches {
            w.serialize(b)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("epochs.csv"))?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Teacher targets for every row of a student's training list.
#[derive(Debug, Clone)]
pub struct DistillTargets {
    pub ht_e: Tensor,
    pub ht_m: Tensor,
    /// `None` gives static (unweighted) distillation.
    pub weights: Option<(DistillWeights, DistillWeights)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best: ValMetrics,
}

/// Trains `model` for up to `epochs`, keeping the parameters of the epoch
/// with the best validation Rank IC.
#[allow(clippy::too_many_arguments)]
pub fn fit_disentangle(
    cfg: &TrainConfig,
    model: &mut DisentangleModel,
    train: &[&StockSample],
    targets: Option<&DistillTargets>,
    valid: &[&StockSample],
    label_scale: f64,
    round: usize,
    epochs: usize,
    log: &mut RunLog,
) -> Result<FitSummary> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if let Some(t) = targets {
        if t.ht_e.rows() != train.len() || t.ht_m.rows() != train.len() {
            return Err(Error::shape("distill targets", &[t.ht_e.rows()], &[train.len()]));
        }
    }
    let weights = LossWeights {
        xi: if targets.is_some() { cfg.xi } else { 0.0 },
        ..cfg.loss_weights()
    };
    let mut main_opt = model.main_optimizer(cfg.adam());
    let mut adv_opt = model.adv_optimizer(cfg.adam());
    let mut shuffle_rng = sub_rng(cfg.seed, &format!("round{round}.shuffle"));
    let mut dropout_rng = sub_rng(cfg.seed, &format!("round{round}.dropout"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, ValMetrics, ParamStore)> = None;
    let mut epochs_run = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut s1, mut s2, mut nb) = (0.0, 0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&StockSample> = idx.iter().map(|&i| train[i]).collect();
            let batch = Batch::from_samples(&refs, model.config.window, label_scale)?;
            let db = match targets {
                Some(t) => {
                    let w = t.weights.as_ref().map(|(e, m)| (e, m));
                    Some(DistillBatch::gather(&t.ht_e, &t.ht_m, w, idx)?)
                }
                None => None,
            };
            let (rep, adv) = model.train_step_pair(&batch, &mut main_opt, &mut adv_opt, &weights, db.as_ref(), &mut dropout_rng)?;
            s1 += rep.l1;
            s2 += adv.l2;
            nb += 1;
            log.batches.push(BatchLog {
                round,
                epoch,
                batch: bi,
                l_pre: rep.l_pre,
                l_adv: rep.l_adv,
                l_rec: rep.l_rec,
                l_dis: rep.l_dis,
                l1: rep.l1,
                l2: rep.l2,
            });
        }
        let val = validation_metrics(model, valid)?;
        epochs_run += 1;
        log.epochs.push(EpochLog {
            round,
            epoch,
            mean_l1: s1 / nb as f64,
            mean_l2: s2 / nb as f64,
            val_rank_ic: val.rank_ic,
            val_ic: val.ic,
            val_accuracy: val.accuracy,
        });
        info!(
            "round {round} epoch {epoch}: l1 {:.5} l2 {:.5} val rank ic {:.4} acc {:.4}",
            s1 / nb as f64,
            s2 / nb as f64,
            val.rank_ic,
            val.accuracy
        );
        let improved = best.as_ref().is_none_or(|b| val.rank_ic > b.1.rank_ic);
        if improved {
            best = Some((epoch, val, model.store.clone()));
        } else if cfg.epoch_patience > 0 && epoch - best.as_ref().unwrap().0 >= cfg.epoch_patience {
            break;
        }
    }
    let (best_epoch, best_val, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(FitSummary {
        epochs_run,
        best_epoch,
        best: best_val,
    })
}

/// Per-round bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Round whose student served as teacher.
    pub teacher: Option<usize>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_rank_ic: f64,
    pub val_ic: f64,
    pub val_accuracy: f64,
    pub n_train: usize,
    pub n_aug: usize,
    pub epsilon: Option<f64>,
    pub hard_share: Option<f64>,
    pub mean_w_e: Option<f64>,
    pub mean_w_m: Option<f64>,
}

fn train_refs(ds: &Dataset, kind: SplitKind) -> Vec<&StockSample> {
    ds.indices(kind).into_iter().map(|i| &ds.samples[i]).collect()
}

/// Algorithm line 1: the disentanglement model trained on the original data.
pub fn train_initial(cfg: &TrainConfig, ds: &Dataset, log: &mut RunLog) -> Result<(DisentangleModel, RoundRecord)> {
    let mut model = DisentangleModel::new(cfg.model_config(), cfg.seed)?;
    let train = train_refs(ds, SplitKind::Train);
    let valid = train_refs(ds, SplitKind::Valid);
    let epochs = cfg.initial_epochs.unwrap_or(cfg.epochs);
    let fit = fit_disentangle(cfg, &mut model, &train, None, &valid, ds.label_std(), 0, epochs, log)?;
    Ok((
        model,
        RoundRecord {
            round: 0,
            teacher: None,
            epochs_run: fit.epochs_run,
            best_epoch: fit.best_epoch,
            val_rank_ic: fit.best.rank_ic,
            val_ic: fit.best.ic,
            val_accuracy: fit.best.accuracy,
            n_train: train.len(),
            n_aug: 0,
            epsilon: None,
            hard_share: None,
            mean_w_e: None,
            mean_w_m: None,
        },
    ))
}

/// Teacher measurements over originals followed by augmented samples.
pub fn teacher_trace(teacher: &DisentangleModel, originals: &[&StockSample], augmented: &[AugmentedSample], label_scale: f64) -> Result<TeacherTrace> {
    let mut refs: Vec<&StockSample> = originals.to_vec();
    refs.extend(augmented.iter().map(|a| &a.sample));
    let p = teacher.predict(&refs, EVAL_CHUNK)?;
    let mut excess_day: Vec<u32> = originals.iter().map(|s| s.day).collect();
    let mut market_day = excess_day.clone();
    excess_day.extend(augmented.iter().map(|a| a.provenance.p_day));
    market_day.extend(augmented.iter().map(|a| a.provenance.q_day));
    let mut original = vec![true; originals.len()];
    original.resize(refs.len(), false);
    TeacherTrace::new(TraceInputs {
        excess_day,
        market_day,
        original,
        pred_e: p.pred_e,
        y_e: refs.iter().map(|s| s.y_e / label_scale).collect(),
        probs: p.probs,
        y_m: refs.iter().map(|s| s.y_m.index()).collect(),
        ht_e: p.last_e,
        ht_m: p.last_m,
    })
}

/// Augmented samples for one round, plus the epsilon and hard-day share used.
pub fn augment_round(
    cfg: &TrainConfig,
    ds: &Dataset,
    teacher: &DisentangleModel,
    day_ic: &BTreeMap<u32, f64>,
    round: usize,
) -> Result<(Vec<AugmentedSample>, Option<f64>, Option<f64>)> {
    let n_train = ds.indices(SplitKind::Train).len();
    let n_aug = cfg.aug_count.unwrap_or((cfg.aug_fraction * n_train as f64).round() as usize);
    let seed = derive_seed(cfg.seed, &format!("round{round}.augment"));
    match cfg.augment {
        AugmentMode::Off => Ok((Vec::new(), None, None)),
        AugmentMode::Noise => Ok((augment::noise_augment(ds, cfg.noise_sigma, n_aug, seed)?, None, None)),
        AugmentMode::Add => {
            let eps = match cfg.aug_epsilon {
                Some(e) => e,
                None => augment::default_epsilon(ds, cfg.aug_epsilon_quantile)?,
            };
            let plan = augment::plan_pairs(ds, day_ic, eps, cfg.q_hard, n_aug, seed)?;
            let out = augment::generate(teacher, &plan, ds)?;
            Ok((out, Some(eps), Some(plan.hard_share())))
        }
    }
}

/// Outcome of the distillation rounds.
#[derive(Debug, Clone)]
pub struct RoundsOutput {
    pub records: Vec<RoundRecord>,
    /// Students in round order; index 0 is round 1.
    pub students: Vec<DisentangleModel>,
    /// Round of the selected final model (0 when no round ran).
    pub final_round: usize,
}

impl RoundsOutput {
    pub fn final_model<'a>(&'a self, initial: &'a DisentangleModel) -> &'a DisentangleModel {
        if self.final_round == 0 {
            initial
        } else {
            &self.students[self.final_round - 1]
        }
    }
}

/// Algorithm loop: each round's teacher is the previous round's student.
/// Stops after `cfg.rounds` rounds or `cfg.patience` rounds without a new
/// best validation Rank IC. The final model is the best student round.
pub fn run_rounds(
    cfg: &TrainConfig,
    ds: &Dataset,
    initial: &DisentangleModel,
    initial_record: &RoundRecord,
    log: &mut RunLog,
    out_dir: Option<&Path>,
) -> Result<RoundsOutput> {
    let originals = train_refs(ds, SplitKind::Train);
    let valid = train_refs(ds, SplitKind::Valid);
    let scale = ds.label_std();
    let mut out = RoundsOutput {
        records: Vec::new(),
        students: Vec::new(),
        final_round: 0,
    };
    let mut best_val = initial_record.val_rank_ic;
    let mut best_student: Option<(usize, f64)> = None;
    let mut stale = 0;
    for round in 1..=cfg.rounds {
        let teacher = if round == 1 { initial } else { &out.students[round - 2] };
        let day_trace = teacher_trace(teacher, &originals, &[], scale)?;
        let (augmented, epsilon, hard_share) = augment_round(cfg, ds, teacher, &day_trace.day_ic, round)?;
        if let (Some(dir), true) = (out_dir, cfg.save_augmented && !augmented.is_empty()) {
            let samples: Vec<StockSample> = augmented.iter().map(|a| a.sample.clone()).collect();
            let prov: Vec<String> = augmented.iter().map(|a| a.provenance.to_string()).collect();
            io::write_samples(&dir.join(format!("augmented_round_{round}.csv")), &samples, ds.window, Some(&prov))?;
        }
        let mut train = originals.clone();
        train.extend(augmented.iter().map(|a| &a.sample));

        let targets = match cfg.distill {
            DistillMode::Off => None,
            mode => {
                let trace = teacher_trace(teacher, &originals, &augmented, scale)?;
                let weights = match mode {
                    DistillMode::Dynamic => {
                        let p = cfg.distill_params();
                        Some((excess_weights(&trace, &p)?, market_weights(&trace, &p)?))
                    }
                    _ => None,
                };
                Some(DistillTargets {
                    ht_e: trace.ht_e,
                    ht_m: trace.ht_m,
                    weights,
                })
            }
        };

        let mut student = if cfg.warm_start {
            teacher.clone()
        } else {
            DisentangleModel::new(cfg.model_config(), derive_seed(cfg.seed, &format!("round{round}.init")))?
        };
        let fit = fit_disentangle(cfg, &mut student, &train, targets.as_ref(), &valid, scale, round, cfg.epochs, log)?;
        let mean_w = |pick: fn(&(DistillWeights, DistillWeights)) -> &DistillWeights| {
            targets.as_ref().and_then(|t| t.weights.as_ref()).map(|w| pick(w).mean())
        };
        let record = RoundRecord {
            round,
            teacher: Some(round - 1),
            epochs_run: fit.epochs_run,
            best_epoch: fit.best_epoch,
            val_rank_ic: fit.best.rank_ic,
            val_ic: fit.best.ic,
            val_accuracy: fit.best.accuracy,
            n_train: train.len(),
            n_aug: augmented.len(),
            epsilon,
            hard_share,
            mean_w_e: mean_w(|w| &w.0),
            mean_w_m: mean_w(|w| &w.1),
        };
        info!("round {round}: val rank ic {:.4} ({} augmented)", record.val_rank_ic, record.n_aug);
        if let Some(dir) = out_dir {
            student.save(&dir.join(format!("round_{round}.ckpt")), serde_json::json!({ "round": round, "teacher": round - 1 }))?;
        }
        if best_student.is_none_or(|(_, v)| record.val_rank_ic > v) {
            best_student = Some((round, record.val_rank_ic));
        }
        let improved = record.val_rank_ic > best_val;
        out.records.push(record);
        out.students.push(student);
        if improved {
            best_val = out.records.last().unwrap().val_rank_ic;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }
    out.final_round = best_student.map_or(0, |b| b.0);
    Ok(out)
}

/// Trains the GRU baseline with the same epoch budget and selection rule.
pub fn train_baseline(cfg: &TrainConfig, ds: &Dataset) -> Result<(GruBaseline, FitSummary)> {
    let mut model = GruBaseline::new(cfg.model_config(), cfg.seed);
    let train = train_refs(ds, SplitKind::Train);
    let valid = train_refs(ds, SplitKind::Valid);
    let labels: Vec<f64> = valid.iter().map(|s| s.y_e).collect();
    let days: Vec<u32> = valid.iter().map(|s| s.day).collect();
    let mut opt = model.optimizer(cfg.adam());
    let mut rng = sub_rng(cfg.seed, "baseline.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, ValMetrics, ParamStore)> = None;
    let mut epochs_run = 0;
    let epochs = cfg.initial_epochs.unwrap_or(cfg.epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&StockSample> = idx.iter().map(|&i| train[i]).collect();
            model.train_step(&Batch::from_samples(&refs, model.config.window, ds.label_std())?, &mut opt)?;
        }
        epochs_run += 1;
        let daily = daily_eval(&model.predict(&valid, EVAL_CHUNK)?, &labels, &days)?;
        let val = ValMetrics {
            rank_ic: daily.mean_rank_ic(),
            ic: daily.mean_ic(),
            accuracy: f64::NAN,
        };
        info!("baseline epoch {epoch}: val rank ic {:.4}", val.rank_ic);
        if best.as_ref().is_none_or(|b| val.rank_ic > b.1.rank_ic) {
            best = Some((epoch, val, model.store.clone()));
        } else if cfg.epoch_patience > 0 && epoch - best.as_ref().unwrap().0 >= cfg.epoch_patience {
            break;
        }
    }
    let (best_epoch, best_val, store) = best.expect("at least one epoch");
    model.store = store;
    Ok((
        model,
        FitSummary {
            epochs_run,
            best_epoch,
            best: best_val,
        },
    ))
}

/// Prediction rows of the disentanglement model on one split; `pred_e` and
/// `adv_e` are in return units.
pub fn predict_rows(model: &DisentangleModel, ds: &Dataset, kind: SplitKind) -> Result<Vec<PredictionRow>> {
    let refs = train_refs(ds, kind);
    let p = model.predict(&refs, EVAL_CHUNK)?;
    let scale = ds.label_std();
    let pred_m = argmax_rows(&p.probs, 3);
    let adv_m = argmax_rows(&p.adv_probs, 3);
    Ok(refs
        .iter()
        .enumerate()
        .map(|(i, s)| PredictionRow {
            stock_id: s.stock_id,
            day: s.day,
            split: kind,
            pred_e: p.pred_e[i] * scale,
            prob_down: Some(p.probs[3 * i]),
            prob_steady: Some(p.probs[3 * i + 1]),
            prob_up: Some(p.probs[3 * i + 2]),
            pred_m: Some(pred_m[i]),
            adv_e: Some(p.adv_e[i] * scale),
            adv_m: Some(adv_m[i]),
            y_e: s.y_e,
            y_m: s.y_m.index(),
            r: s.r,
            m: s.m,
        })
        .collect())
}

pub fn predict_rows_baseline(model: &GruBaseline, ds: &Dataset, kind: SplitKind) -> Result<Vec<PredictionRow>> {
    let refs = train_refs(ds, kind);
    let p = model.predict(&refs, EVAL_CHUNK)?;
    let scale = ds.label_std();
    Ok(refs
        .iter()
        .zip(p)
        .map(|(s, v)| PredictionRow {
            stock_id: s.stock_id,
            day: s.day,
            split: kind,
            pred_e: v * scale,
            prob_down: None,
            prob_steady: None,
            prob_up: None,
            pred_m: None,
            adv_e: None,
            adv_m: None,
            y_e: s.y_e,
            y_m: s.y_m.index(),
            r: s.r,
            m: s.m,
        })
        .collect())
}

/// Runs every `k` over the given named prediction sets and writes ledgers,
/// curves and a chart into `dir`.
pub fn backtest_dir(dir: &Path, sets: &[(String, Vec<PredictionRow>)], ks: &[usize], cost_rate: f64, mode: CostMode) -> Result<Vec<(String, usize, f64)>> {
    std::fs::create_dir_all(dir)?;
    let mut finals = Vec::new();
    let mut ledgers = Vec::new();
    for (name, rows) in sets {
        let (preds, realized) = report::backtest_inputs(rows);
        for &k in ks {
            let cfg = BacktestConfig {
                cost_mode: mode,
                ..BacktestConfig::new(k, cost_rate)
            };
            let ledger = run_backtest(&cfg, &preds, &realized)?;
            ledger.write_csv(&dir.join(format!("ledger_{name}_k{k}.csv")))?;
            finals.push((name.clone(), k, ledger.final_accumulated()));
            ledgers.push((format!("{name}@k{k}"), ledger));
        }
    }
    let named: Vec<(String, &_)> = ledgers.iter().map(|(n, l)| (n.clone(), l)).collect();
    let curves = compare_curves(&named)?;
    curves.write_csv(&dir.join("curves.csv"))?;
    std::fs::write(dir.join("curves.svg"), curves.to_svg("Accumulated return"))?;
    Ok(finals)
}

/// Summary written to `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub code_version: String,
    pub seed: u64,
    pub dataset: crate::data::DatasetMeta,
    pub n_samples: usize,
    pub rounds: Vec<RoundRecord>,
    pub final_round: usize,
    pub baseline: Option<FitSummary>,
    pub test: Option<report::EvalReport>,
    pub baseline_test: Option<report::EvalReport>,
    pub backtest: Vec<(String, usize, f64)>,
}

/// Full training run into `dir`: round 0, distillation rounds, baseline,
/// test predictions, evaluation and backtests.
pub fn run_training(cfg: &TrainConfig, dir: &Path) -> Result<RunSummary> {
    crate::runtime::tune_allocator();
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let ds = prepare_dataset(cfg)?;
    info!("dataset: {} samples, split {:?}", ds.samples.len(), ds.split);
    io::write_json(&dir.join("dataset.json"), &ds.meta())?;

    let mut log = RunLog::default();
    let (initial, rec0) = train_initial(cfg, &ds, &mut log)?;
    initial.save(&dir.join("round_0.ckpt"), serde_json::json!({ "round": 0 }))?;
    let rounds = run_rounds(cfg, &ds, &initial, &rec0, &mut log, Some(dir))?;
    let final_model = rounds.final_model(&initial);
    final_model.save(&dir.join("final.ckpt"), serde_json::json!({ "round": rounds.final_round }))?;
    log.write(dir)?;
    let mut records = vec![rec0];
    records.extend(rounds.records.iter().cloned());
    let mut w = csv::Writer::from_path(dir.join("rounds.csv"))?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;

    let rows = predict_rows(final_model, &ds, SplitKind::Test)?;
    report::write_predictions(&dir.join("predictions_test.csv"), &rows)?;
    report::write_predictions(&dir.join("predictions_valid.csv"), &predict_rows(final_model, &ds, SplitKind::Valid)?)?;
    let test = report::evaluate(&rows)?;
    let mut sets = vec![("add".to_string(), rows)];

    let (baseline, baseline_test) = if cfg.baseline {
        let (b, fit) = train_baseline(cfg, &ds)?;
        b.save(&dir.join("baseline.ckpt"), serde_json::json!({}))?;
        let brows = predict_rows_baseline(&b, &ds, SplitKind::Test)?;
        report::write_predictions(&dir.join("baseline_predictions_test.csv"), &brows)?;
        let ev = report::evaluate(&brows)?;
        sets.push(("gru".to_string(), brows));
        (Some(fit), Some(ev))
    } else {
        (None, None)
    };
    let backtest = backtest_dir(&dir.join("backtest"), &sets, &cfg.backtest_k, cfg.cost_rate, CostMode::Turnover)?;

    let summary = RunSummary {
        code_version: CODE_VERSION.to_string(),
        seed: cfg.seed,
        dataset: ds.meta(),
        n_samples: ds.samples.len(),
        rounds: records,
        final_round: rounds.final_round,
        baseline,
        test: Some(test),
        baseline_test,
        backtest,
    };
    io::write_json(&dir.join("run.json"), &summary)?;
    Ok(summary)
}

/// One training run per value of `param`, each in `dir/param=value`, with
/// results collected in `dir/sweep.csv`.
pub fn run_sweep(base: &TrainConfig, param: &str, values: &[String], dir: &Path) -> Result<Vec<Vec<String>>> {
    std::fs::create_dir_all(dir)?;
    let mut table = vec![vec![
        param.to_string(),
        "final_round".into(),
        "val_rank_ic".into(),
        "test_ic".into(),
        "test_rank_ic".into(),
        "test_accuracy".into(),
        "test_macro_f1".into(),
    ]];
    for v in values {
        let cfg = base.with_override(param, v)?;
        let s = run_training(&cfg, &dir.join(format!("{param}={v}")))?;
        let val = s.rounds.iter().find(|r| r.round == s.final_round).map_or(f64::NAN, |r| r.val_rank_ic);
        let t = s.test.as_ref().expect("test report");
        let pm = t.pre_m.as_ref();
        table.push(vec![
            v.clone(),
            s.final_round.to_string(),
            val.to_string(),
            t.pre_e.mean_ic.to_string(),
            t.pre_e.mean_rank_ic.to_string(),
            pm.map_or(String::new(), |c| c.accuracy.to_string()),
            pm.map_or(String::new(), |c| c.macro_f1.to_string()),
        ]);
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join("sweep.csv"))?;
    for row in &table {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(table)
}
