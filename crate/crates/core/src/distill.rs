//! Knowledge weights from teacher performance and the weighted state-matching loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::daily_eval;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillParams {
    pub beta_day: f64,
    pub beta_sample: f64,
    pub alpha: f64,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self {
            beta_day: 0.5,
            beta_sample: 0.2,
            alpha: 0.4,
        }
    }
}

impl DistillParams {
    /// Smallest weight any sample can receive.
    pub fn lower_bound(&self) -> f64 {
        self.alpha * self.beta_day + (1.0 - self.alpha) * self.beta_sample
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
    }
}

/// `bias + (1 - bias) * (max - value) / (max - min)`; equal extrema give `bias`.
fn biased_fraction(value: f64, max: f64, min: f64, bias: f64, what: &str) -> Result<f64> {
    unit("bias", bias)?;
    if !(min <= value && value <= max) {
        return Err(Error::invalid(format!("{what} {value} outside extrema [{min}, {max}]")));
    }
    let frac = if max == min { 0.0 } else { (max - value) / (max - min) };
    Ok(bias + (1.0 - bias) * frac)
}

pub fn day_weight(ic: f64, ic_max: f64, ic_min: f64, beta_day: f64) -> Result<f64> {
    biased_fraction(ic, ic_max, ic_min, beta_day, "day ic")
}

pub fn sample_weight(mse: f64, mse_max: f64, mse_min: f64, beta_sample: f64) -> Result<f64> {
    biased_fraction(mse, mse_max, mse_min, beta_sample, "sample mse")
}

pub fn knowledge_weight(wd: f64, ws: f64, alpha: f64) -> Result<f64> {
    unit("wd", wd)?;
    unit("ws", ws)?;
    unit("alpha", alpha)?;
    Ok(alpha * wd + (1.0 - alpha) * ws)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrema {
    pub max: f64,
    pub min: f64,
}

impl Extrema {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        values.fold(
            Extrema {
                max: f64::NEG_INFINITY,
                min: f64::INFINITY,
            },
            |e, v| Extrema {
                max: e.max.max(v),
                min: e.min.min(v),
            },
        )
    }

    fn bounds(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }
}

/// Per-sample teacher outputs needed to build a trace.
#[derive(Debug, Clone)]
pub struct TraceInputs {
    /// Day used for the excess day-level measure (the excess donor for swapped samples).
    pub excess_day: Vec<u32>,
    /// Day used for the market day-level measure (the market donor for swapped samples).
    pub market_day: Vec<u32>,
    /// Whether the sample is an original training sample; only those define day measures.
    pub original: Vec<bool>,
    pub pred_e: Vec<f64>,
    pub y_e: Vec<f64>,
    /// Row-major `n x 3` class probabilities.
    pub probs: Vec<f64>,
    pub y_m: Vec<usize>,
    pub ht_e: Tensor,
    pub ht_m: Tensor,
}

/// Frozen teacher measurements over the student's training set.
#[derive(Debug, Clone)]
pub struct TeacherTrace {
    pub excess_day: Vec<u32>,
    pub market_day: Vec<u32>,
    pub day_ic: BTreeMap<u32, f64>,
    pub sample_mse: Vec<f64>,
    pub day_acc: BTreeMap<u32, f64>,
    pub sample_ce: Vec<f64>,
    pub ht_e: Tensor,
    pub ht_m: Tensor,
    pub ic: Extrema,
    pub mse: Extrema,
    pub acc: Extrema,
    pub ce: Extrema,
}

impl TeacherTrace {
    pub fn new(inp: TraceInputs) -> Result<Self> {
        let n = inp.pred_e.len();
        let lens = [
            inp.excess_day.len(),
            inp.market_day.len(),
            inp.original.len(),
            inp.y_e.len(),
            inp.y_m.len(),
            inp.probs.len() / 3,
            inp.ht_e.rows(),
            inp.ht_m.rows(),
        ];
        if lens.iter().any(|&l| l != n) || inp.probs.len() != 3 * n {
            return Err(Error::shape("teacher trace", &[n], &lens));
        }
        if n == 0 {
            return Err(Error::invalid("teacher trace over an empty set"));
        }
        let orig: Vec<usize> = (0..n).filter(|&i| inp.original[i]).collect();
        let pick = |v: &[f64]| orig.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let days: Vec<u32> = orig.iter().map(|&i| inp.excess_day[i]).collect();
        let daily = daily_eval(&pick(&inp.pred_e), &pick(&inp.y_e), &days)?;
        let day_ic: BTreeMap<u32, f64> = daily.days.iter().map(|d| (d.day, d.ic)).collect();

        let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for &i in &orig {
            let row = &inp.probs[3 * i..3 * i + 3];
            let pred = crate::metrics::argmax_rows(row, 3)[0];
            let e = hits.entry(inp.market_day[i]).or_default();
            e.0 += usize::from(pred == inp.y_m[i]);
            e.1 += 1;
        }
        let day_acc: BTreeMap<u32, f64> = hits.into_iter().map(|(d, (h, c))| (d, h as f64 / c as f64)).collect();

        let sample_mse: Vec<f64> = (0..n).map(|i| (inp.pred_e[i] - inp.y_e[i]).powi(2)).collect();
        let mut sample_ce = Vec::with_capacity(n);
        for i in 0..n {
            let label = inp.y_m[i];
            if label >= 3 {
                return Err(Error::LabelOutOfRange { label, classes: 3 });
            }
            sample_ce.push(-inp.probs[3 * i + label].max(f64::MIN_POSITIVE).ln());
        }
        Ok(Self {
            ic: Extrema::of(day_ic.values().copied()),
            acc: Extrema::of(day_acc.values().copied()),
            mse: Extrema::of(sample_mse.iter().copied()),
            ce: Extrema::of(sample_ce.iter().copied()),
            excess_day: inp.excess_day,
            market_day: inp.market_day,
            day_ic,
            sample_mse,
            day_acc,
            sample_ce,
            ht_e: inp.ht_e,
            ht_m: inp.ht_m,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_mse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_mse.is_empty()
    }

    /// True when every stored measure lies within its extrema.
    pub fn extrema_hold(&self) -> bool {
        self.day_ic.values().all(|v| self.ic.bounds(*v))
            && self.day_acc.values().all(|v| self.acc.bounds(*v))
            && self.sample_mse.iter().all(|v| self.mse.bounds(*v))
            && self.sample_ce.iter().all(|v| self.ce.bounds(*v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub wd: Vec<f64>,
    pub ws: Vec<f64>,
    pub w: Vec<f64>,
    pub params: DistillParams,
}

impl DistillWeights {
    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len().max(1) as f64
    }
}

/// Day measure lookup. A day whose measure is undefined (too few samples or
/// zero variance) takes the worst value, i.e. the full weight.
fn day_or_worst(map: &BTreeMap<u32, f64>, day: u32, worst: f64) -> f64 {
    map.get(&day).copied().unwrap_or(worst)
}

fn combine(
    day_values: impl Iterator<Item = f64>,
    day_ext: Extrema,
    sample_values: &[f64],
    sample_ext: Extrema,
    p: &DistillParams,
) -> Result<DistillWeights> {
    let mut out = DistillWeights {
        wd: Vec::with_capacity(sample_values.len()),
        ws: Vec::with_capacity(sample_values.len()),
        w: Vec::with_capacity(sample_values.len()),
        params: *p,
    };
    for (dv, sv) in day_values.zip(sample_values) {
        let wd = if day_ext.max.is_finite() {
            biased_fraction(dv, day_ext.max, day_ext.min, p.beta_day, "day measure")?
        } else {
            1.0
        };
        let ws = biased_fraction(*sv, sample_ext.max, sample_ext.min, p.beta_sample, "sample measure")?;
        out.w.push(knowledge_weight(wd, ws, p.alpha)?);
        out.wd.push(wd);
        out.ws.push(ws);
    }
    Ok(out)
}

/// Weights for the excess encoder: day IC and per-sample squared error.
pub fn excess_weights(trace: &TeacherTrace, p: &DistillParams) -> Result<DistillWeights> {
    let days = trace.excess_day.iter().map(|d| day_or_worst(&trace.day_ic, *d, trace.ic.min));
    combine(days, trace.ic, &trace.sample_mse, trace.mse, p)
}

/// Weights for the market encoder: day accuracy and per-sample cross-entropy.
pub fn market_weights(trace: &TeacherTrace, p: &DistillParams) -> Result<DistillWeights> {
    let days = trace.market_day.iter().map(|d| day_or_worst(&trace.day_acc, *d, trace.acc.min));
    combine(days, trace.acc, &trace.sample_ce, trace.ce, p)
}

/// Weighted state matching, `(1/n) * sum_i w_i * mean_k (ht_ik - hs_ik)^2`.
///
/// Uses the batch-mean reduction so the distillation weight does not depend
/// on batch size. `ht` must be a constant node.
pub fn distill_loss(g: &mut Graph, weights: &[f64], ht: Var, hs: Var) -> Result<Var> {
    g.weighted_row_mse(hs, ht, weights)
}

pub fn static_distill_loss(g: &mut Graph, ht: Var, hs: Var) -> Result<Var> {
    let n = g.value(hs).rows();
    g.weighted_row_mse(hs, ht, &vec![1.0; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn day_weight_examples() {
        assert_eq!(day_weight(0.3, 0.3, 0.1, 0.5).unwrap(), 0.5);
        assert_eq!(day_weight(0.1, 0.3, 0.1, 0.5).unwrap(), 1.0);
        assert_abs_diff_eq!(day_weight(0.2, 0.3, 0.1, 0.5).unwrap(), 0.75, epsilon = 1e-15);
        assert_eq!(day_weight(0.2, 0.2, 0.2, 0.5).unwrap(), 0.5);
        assert!(day_weight(0.4, 0.3, 0.1, 0.5).is_err());
    }

    #[test]
    fn sample_and_combined_examples() {
        assert_eq!(sample_weight(0.9, 0.9, 0.1, 0.2).unwrap(), 0.2);
        assert_eq!(sample_weight(0.1, 0.9, 0.1, 0.2).unwrap(), 1.0);
        assert_abs_diff_eq!(sample_weight(0.5, 0.9, 0.1, 0.2).unwrap(), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(knowledge_weight(0.75, 0.6, 0.4).unwrap(), 0.66, epsilon = 1e-15);
        assert_eq!(knowledge_weight(0.75, 0.6, 1.0).unwrap(), 0.75);
        assert_eq!(knowledge_weight(0.75, 0.6, 0.0).unwrap(), 0.6);
        assert!(knowledge_weight(1.5, 0.6, 0.4).is_err());
        assert_abs_diff_eq!(DistillParams::default().lower_bound(), 0.32, epsilon = 1e-15);
    }

    fn trace() -> TeacherTrace {
        TeacherTrace::new(TraceInputs {
            excess_day: vec![0, 0, 0, 1, 1, 1],
            market_day: vec![0, 0, 0, 1, 1, 1],
            original: vec![true; 6],
            pred_e: vec![0.1, 0.2, 0.3, 0.3, 0.1, 0.2],
            y_e: vec![0.1, 0.3, 0.2, 0.1, 0.2, 0.3],
            probs: vec![
                0.7, 0.2, 0.1, 0.6, 0.3, 0.1, 0.2, 0.5, 0.3, //
                0.1, 0.1, 0.8, 0.2, 0.2, 0.6, 0.5, 0.4, 0.1,
            ],
            y_m: vec![0, 0, 0, 2, 2, 2],
            ht_e: Tensor::zeros(&[6, 2]),
            ht_m: Tensor::zeros(&[6, 2]),
        })
        .unwrap()
    }

    #[test]
    fn trace_measures() {
        let t = trace();
        assert_abs_diff_eq!(t.day_ic[&0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t.day_acc[&0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.day_acc[&1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.sample_ce[0], -(0.7f64).ln(), epsilon = 1e-15);
        assert!(t.extrema_hold());
    }

    #[test]
    fn emitted_weights_are_bounded() {
        let t = trace();
        let p = DistillParams::default();
        for w in [excess_weights(&t, &p).unwrap(), market_weights(&t, &p).unwrap()] {
            assert_eq!(w.w.len(), 6);
            for i in 0..6 {
                assert!(w.w[i] >= p.lower_bound() - 1e-15 && w.w[i] <= 1.0);
                assert_abs_diff_eq!(w.w[i], p.alpha * w.wd[i] + (1.0 - p.alpha) * w.ws[i], epsilon = 0.0);
            }
        }
        // worst cross-entropy sample gets the sample bias
        let m = market_weights(&t, &p).unwrap();
        let worst = (0..6).max_by(|&a, &b| t.sample_ce[a].total_cmp(&t.sample_ce[b])).unwrap();
        assert_eq!(m.ws[worst], p.beta_sample);
    }

    #[test]
    fn loss_reductions() {
        let mut g = Graph::new();
        // per-sample squared errors 0.2 and 0.4 across one column
        let ht = g.constant(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let hs = g.variable(Tensor::matrix(2, 1, vec![0.2f64.sqrt(), 0.4f64.sqrt()]).unwrap());
        let l = distill_loss(&mut g, &[1.0, 0.5], ht, hs).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.2, epsilon = 1e-15);
        let zero = distill_loss(&mut g, &[0.0, 0.0], ht, hs).unwrap();
        assert_eq!(g.scalar(zero), 0.0);
        let s = static_distill_loss(&mut g, ht, hs).unwrap();
        assert_abs_diff_eq!(g.scalar(s), 0.3, epsilon = 1e-15);
        let same = static_distill_loss(&mut g, hs, hs).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }
}
