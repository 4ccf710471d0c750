//! Latent-swap augmentation: decode the excess feature of one sample with the
//! market feature of another sample from a day with a close market return.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{quantile_sorted, Dataset, SplitKind, StockSample, N_FACTORS};
use crate::error::{Error, Result};
use crate::model::{unstack_features, DisentangleModel};
use crate::rng::sub_rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON_QUANTILE: f64 = 0.2;
pub const DEFAULT_Q_HARD: f64 = 0.33;
pub const HARD_DAY_FACTOR: f64 = 2.0;
/// Default augmentation budget as a fraction of the training-set size.
pub const DEFAULT_AUG_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Add,
    Noise,
    Off,
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "noise" => Ok(Self::Noise),
            "off" => Ok(Self::Off),
            _ => Err(Error::invalid(format!("unknown augment mode {s:?} (add|noise|off)"))),
        }
    }
}

/// One chosen day pair and the sample pairings drawn for it. Indices point
/// into `Dataset::samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayPair {
    pub day_p: u32,
    pub day_q: u32,
    pub pairings: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub pairs: Vec<DayPair>,
    pub n_aug: usize,
    pub epsilon: f64,
    pub q_hard: f64,
    pub hard_days: BTreeSet<u32>,
    /// Number of eligible day pairs before sampling.
    pub candidates: usize,
}

impl AugmentPlan {
    /// Fraction of drawn day pairs that touch a hard day.
    pub fn hard_share(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let hard = self
            .pairs
            .iter()
            .filter(|p| self.hard_days.contains(&p.day_p) || self.hard_days.contains(&p.day_q))
            .count();
        hard as f64 / self.pairs.len() as f64
    }

    pub fn pairing_count(&self) -> usize {
        self.pairs.iter().map(|p| p.pairings.len()).sum()
    }
}

/// Donor identities of a generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub p_stock: u32,
    pub p_day: u32,
    pub q_stock: u32,
    pub q_day: u32,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}|{}:{}", self.p_stock, self.p_day, self.q_stock, self.q_day)
    }
}

/// A generated sample. `sample` carries the excess label of `p` and the
/// market label and market return of `q`; its stock and day are `p`'s.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub sample: StockSample,
    pub provenance: Provenance,
}

fn train_market(dataset: &Dataset) -> Result<Vec<(u32, f64)>> {
    dataset
        .days(SplitKind::Train)
        .into_iter()
        .map(|d| {
            dataset
                .market_by_day
                .get(&d)
                .map(|&m| (d, m))
                .ok_or_else(|| Error::invalid(format!("no market return for training day {d}")))
        })
        .collect()
}

/// Quantile of all pairwise absolute market-return gaps among training days.
pub fn default_epsilon(dataset: &Dataset, quantile: f64) -> Result<f64> {
    let days = train_market(dataset)?;
    if days.len() < 2 {
        return Err(Error::invalid("need at least two training days for augmentation"));
    }
    let mut gaps = Vec::with_capacity(days.len() * (days.len() - 1) / 2);
    for (i, a) in days.iter().enumerate() {
        for b in &days[i + 1..] {
            gaps.push((a.1 - b.1).abs());
        }
    }
    gaps.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&gaps, quantile))
}

/// Unordered day pairs `(a, b)`, `a < b`, with `|m_a - m_b| <= epsilon`.
pub fn eligible_pairs(days: &[(u32, f64)], epsilon: f64) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for (i, a) in days.iter().enumerate() {
        for b in &days[i + 1..] {
            if (a.1 - b.1).abs() <= epsilon {
                out.push((a.0.min(b.0), a.0.max(b.0)));
            }
        }
    }
    out
}

/// Training days whose teacher IC is at or below the `q_hard` quantile.
pub fn hard_days(teacher_day_ic: &BTreeMap<u32, f64>, train_days: &[u32], q_hard: f64) -> BTreeSet<u32> {
    let ics: Vec<(u32, f64)> = train_days
        .iter()
        .filter_map(|d| teacher_day_ic.get(d).map(|&ic| (*d, ic)))
        .collect();
    if ics.is_empty() || q_hard <= 0.0 {
        return BTreeSet::new();
    }
    let mut sorted: Vec<f64> = ics.iter().map(|x| x.1).collect();
    sorted.sort_by(f64::total_cmp);
    let cut = quantile_sorted(&sorted, q_hard.min(1.0));
    ics.into_iter().filter(|x| x.1 <= cut).map(|x| x.0).collect()
}

/// Draws day pairs (hard days weighted up) and shuffled stock pairings until
/// the mirrored pairings cover `n_aug` samples. Only training days are used.
pub fn plan_pairs(
    dataset: &Dataset,
    teacher_day_ic: &BTreeMap<u32, f64>,
    epsilon: f64,
    q_hard: f64,
    n_aug: usize,
    seed: u64,
) -> Result<AugmentPlan> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::invalid(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if !(0.0..=1.0).contains(&q_hard) {
        return Err(Error::invalid(format!("q_hard must lie in [0, 1], got {q_hard}")));
    }
    let days = train_market(dataset)?;
    let candidates = eligible_pairs(&days, epsilon);
    if candidates.is_empty() {
        return Err(Error::NoEligiblePairs { epsilon });
    }
    let day_list: Vec<u32> = days.iter().map(|d| d.0).collect();
    let hard = hard_days(teacher_day_ic, &day_list, q_hard);

    let mut by_day: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in dataset.indices(SplitKind::Train) {
        by_day.entry(dataset.samples[i].day).or_default().push(i);
    }
    let weights: Vec<f64> = candidates
        .iter()
        .map(|(a, b)| if hard.contains(a) || hard.contains(b) { HARD_DAY_FACTOR } else { 1.0 })
        .collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = sub_rng(seed, "augment.plan");

    let mut pairs = Vec::new();
    let mut emitted = 0usize;
    while emitted < n_aug {
        let (a, b) = candidates[pick.sample(&mut rng)];
        let (mut ps, mut qs) = (by_day[&a].clone(), by_day[&b].clone());
        ps.shuffle(&mut rng);
        qs.shuffle(&mut rng);
        let mut pairings: Vec<(usize, usize)> = ps.into_iter().zip(qs).collect();
        let room = (n_aug - emitted).div_ceil(2);
        pairings.truncate(room);
        emitted += (2 * pairings.len()).min(n_aug - emitted);
        pairs.push(DayPair {
            day_p: a,
            day_q: b,
            pairings,
        });
    }
    Ok(AugmentPlan {
        pairs,
        n_aug,
        epsilon,
        q_hard,
        hard_days: hard,
        candidates: candidates.len(),
    })
}

/// Swapped sample for each `(p, q)` pairing and its mirror, in order, capped
/// at `cap`. Runs the model in eval mode.
pub fn generate_pairings(
    model: &DisentangleModel,
    dataset: &Dataset,
    pairings: &[(usize, usize)],
    cap: usize,
) -> Result<Vec<AugmentedSample>> {
    let window = model.config.window;
    if dataset.window != window {
        return Err(Error::shape("augment window", &[dataset.window], &[window]));
    }
    // encode every donor once
    let mut donors: Vec<usize> = pairings.iter().flat_map(|&(p, q)| [p, q]).collect();
    donors.sort_unstable();
    donors.dedup();
    let slot: BTreeMap<usize, usize> = donors.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let refs: Vec<&StockSample> = donors.iter().map(|&i| &dataset.samples[i]).collect();
    let enc = model.predict(&refs, 512)?;
    let width = model.config.feature;

    let mut order: Vec<(usize, usize)> = Vec::with_capacity(2 * pairings.len());
    for &(p, q) in pairings {
        order.push((p, q));
        order.push((q, p));
    }
    order.truncate(cap);

    let mut out = Vec::with_capacity(order.len());
    for chunk in order.chunks(512) {
        let n = chunk.len();
        let mut fe = Vec::with_capacity(n * width);
        let mut fm = Vec::with_capacity(n * width);
        for &(p, q) in chunk {
            fe.extend_from_slice(enc.f_e.row(slot[&p]));
            fm.extend_from_slice(enc.f_m.row(slot[&q]));
        }
        let x_hat = model.decode_eval(&Tensor::matrix(n, width, fe)?, &Tensor::matrix(n, width, fm)?)?;
        for (features, &(p, q)) in unstack_features(&x_hat, n, window).into_iter().zip(chunk) {
            let (sp, sq) = (&dataset.samples[p], &dataset.samples[q]);
            out.push(AugmentedSample {
                sample: StockSample {
                    stock_id: sp.stock_id,
                    day: sp.day,
                    features,
                    y_e: sp.y_e,
                    y_m: sq.y_m,
                    r: sp.y_e + sq.m,
                    m: sq.m,
                },
                provenance: Provenance {
                    p_stock: sp.stock_id,
                    p_day: sp.day,
                    q_stock: sq.stock_id,
                    q_day: sq.day,
                },
            });
        }
    }
    Ok(out)
}

pub fn generate(model: &DisentangleModel, plan: &AugmentPlan, dataset: &Dataset) -> Result<Vec<AugmentedSample>> {
    let pairings: Vec<(usize, usize)> = plan.pairs.iter().flat_map(|p| p.pairings.iter().copied()).collect();
    let out = generate_pairings(model, dataset, &pairings, plan.n_aug)?;
    debug_assert!(out.iter().all(|a| a.sample.features.len() == N_FACTORS * model.config.window));
    Ok(out)
}

/// Gaussian-noise copies of training samples with unchanged labels.
pub fn noise_augment(dataset: &Dataset, sigma: f64, n_aug: usize, seed: u64) -> Result<Vec<AugmentedSample>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("noise sigma {sigma}: {e}")))?;
    let train = dataset.indices(SplitKind::Train);
    if train.is_empty() {
        return Err(Error::invalid("no training samples to perturb"));
    }
    let mut rng = sub_rng(seed, "augment.noise");
    let mut order = train.clone();
    let mut out = Vec::with_capacity(n_aug);
    while out.len() < n_aug {
        order.shuffle(&mut rng);
        for &i in order.iter().take(n_aug - out.len()) {
            let s = &dataset.samples[i];
            let mut sample = s.clone();
            for v in &mut sample.features {
                *v += normal.sample(&mut rng);
            }
            out.push(AugmentedSample {
                sample,
                provenance: Provenance {
                    p_stock: s.stock_id,
                    p_day: s.day,
                    q_stock: s.stock_id,
                    q_day: s.day,
                },
            });
        }
    }
    Ok(out)
}
