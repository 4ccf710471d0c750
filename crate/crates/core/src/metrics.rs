//! Daily correlation measures and market classification scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample Pearson correlation. Errors when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Undefined("fewer than two observations"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman", &[x.len()], &[y.len()]));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyEval {
    pub day: u32,
    pub ic: f64,
    pub rank_ic: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyReport {
    pub days: Vec<DailyEval>,
    /// Days dropped for having fewer than two samples or zero variance.
    pub excluded: usize,
}

impl DailyReport {
    pub fn mean_ic(&self) -> f64 {
        mean(self.days.iter().map(|d| d.ic))
    }

    pub fn mean_rank_ic(&self) -> f64 {
        mean(self.days.iter().map(|d| d.rank_ic))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Groups samples by day and correlates predictions with labels per day.
pub fn daily_eval(preds: &[f64], labels: &[f64], days: &[u32]) -> Result<DailyReport> {
    if preds.len() != labels.len() || preds.len() != days.len() {
        return Err(Error::shape("daily_eval", &[preds.len(), labels.len()], &[days.len()]));
    }
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for i in 0..preds.len() {
        let g = groups.entry(days[i]).or_default();
        g.0.push(preds[i]);
        g.1.push(labels[i]);
    }
    let mut out = Vec::with_capacity(groups.len());
    let mut excluded = 0;
    for (day, (p, l)) in groups {
        // sort within the day so the result does not depend on input order
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(l[a].total_cmp(&l[b])));
        let p: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let l: Vec<f64> = idx.iter().map(|&i| l[i]).collect();
        match (pearson(&p, &l), spearman(&p, &l)) {
            (Ok(ic), Ok(rank_ic)) => out.push(DailyEval {
                day,
                ic,
                rank_ic,
                n_samples: p.len(),
            }),
            _ => excluded += 1,
        }
    }
    Ok(DailyReport { days: out, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
}

pub fn classification_eval(pred: &[usize], truth: &[usize]) -> Result<ClassEval> {
    const C: usize = 3;
    if pred.len() != truth.len() {
        return Err(Error::shape("classification_eval", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::invalid("classification_eval on empty input"));
    }
    let mut confusion = [[0usize; C]; C];
    for (&p, &t) in pred.iter().zip(truth) {
        for label in [p, t] {
            if label >= C {
                return Err(Error::LabelOutOfRange { label, classes: C });
            }
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..C).map(|c| confusion[c][c]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassStats> = (0..C)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..C).map(|t| confusion[t][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    Ok(ClassEval {
        accuracy: correct as f64 / pred.len() as f64,
        macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / C as f64,
        per_class,
    })
}

/// Index of the largest entry in each row; first index wins on ties.
pub fn argmax_rows(probs: &[f64], cols: usize) -> Vec<usize> {
    probs
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_ic: f64,
    pub mean_rank_ic: f64,
    pub n_days: usize,
    pub excluded_days: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
}

impl EvalSummary {
    pub fn new(daily: &DailyReport, class: &ClassEval) -> Self {
        Self {
            mean_ic: daily.mean_ic(),
            mean_rank_ic: daily.mean_rank_ic(),
            n_days: daily.days.len(),
            excluded_days: daily.excluded,
            accuracy: class.accuracy,
            macro_f1: class.macro_f1,
            per_class: class.per_class.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pearson_examples() {
        assert_abs_diff_eq!(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&[1., 2., 3.], &[1., 3., 2.]).unwrap(), 0.5, epsilon = 1e-15);
        assert!(pearson(&[1., 1., 1.], &[1., 2., 3.]).is_err());
        assert!(pearson(&[1.], &[1.]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_abs_diff_eq!(spearman(&[1., 2., 3.], &[3., 1., 2.]).unwrap(), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&[0.1, 5., 9.], &[-3., 0., 100.]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(average_ranks(&[3., 1., 3., 2.]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn daily_examples() {
        let preds = [0.1, 0.2, 0.3, 0.5, 0.4, 0.6];
        let labels = [1.0, 3.0, 2.0, 1.0, 2.0, 3.0];
        let days = [7, 7, 7, 8, 8, 8];
        let rep = daily_eval(&preds, &labels, &days).unwrap();
        assert_eq!(rep.days.len(), 2);
        assert_abs_diff_eq!(rep.days[0].ic, 0.5, epsilon = 1e-12);
        // day 8: preds ranks (2,1,3) vs labels (1,2,3): d^2 = 1+1+0 -> 1 - 12/24
        assert_abs_diff_eq!(rep.days[1].rank_ic, 0.5, epsilon = 1e-12);
        let shuffled = daily_eval(&[0.6, 0.3, 0.5, 0.1, 0.4, 0.2], &[3.0, 2.0, 1.0, 1.0, 2.0, 3.0], &[8, 7, 8, 7, 8, 7]).unwrap();
        assert_eq!(shuffled, rep);
    }

    #[test]
    fn degenerate_days_are_counted() {
        let rep = daily_eval(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0], &[0, 0, 1]).unwrap();
        assert!(rep.days.is_empty());
        assert_eq!(rep.excluded, 2);
    }

    #[test]
    fn confusion_example() {
        let e = classification_eval(&[0, 1, 1, 1, 2, 0], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert_abs_diff_eq!(e.accuracy, 4.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.per_class[0].f1, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(e.per_class[1].f1, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(e.per_class[2].f1, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.macro_f1, 0.6556, epsilon = 1e-4);
        let perfect = classification_eval(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!((perfect.accuracy, perfect.macro_f1), (1.0, 1.0));
        let constant = classification_eval(&[1; 6], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert_abs_diff_eq!(constant.accuracy, 1.0 / 3.0, epsilon = 1e-15);
        assert!(classification_eval(&[], &[]).is_err());
        assert!(classification_eval(&[3], &[0]).is_err());
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax_rows(&[0.2, 0.5, 0.3, 0.4, 0.4, 0.2], 3), vec![1, 0]);
    }
}
