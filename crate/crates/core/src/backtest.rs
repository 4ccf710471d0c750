//! Top-k equal-weight daily portfolios with per-side transaction costs.
//!
//! Ledger model. The record for day `j` is the portfolio formed from day
//! `j` predictions and held from close `j` to close `j + 1`, so its gross
//! return is the mean of the selected stocks' realized returns for that
//! interval. Before holding, the book is rebalanced from the drifted weights
//! of the previous day to equal weights over the new selection:
//!
//! ```text
//! net_j = (1 - c * sell_j) * (1 - c * buy_j) * (1 + gross_j) * (1 - c * exit_j) - 1
//! ```
//!
//! `exit_j` is 1 on the final day (the book is liquidated) and 0 otherwise.
//! In `Full` mode every day sells and buys the whole notional.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DayRange;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// Pay only on traded weight.
    Turnover,
    /// Pay on the whole notional for both legs every day.
    Full,
}

impl std::str::FromStr for CostMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "turnover" => Ok(Self::Turnover),
            "full" => Ok(Self::Full),
            _ => Err(Error::invalid(format!("unknown cost mode {s:?} (turnover|full)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub k: usize,
    pub cost_rate: f64,
    pub cost_mode: CostMode,
    pub days: Option<DayRange>,
}

impl BacktestConfig {
    pub fn new(k: usize, cost_rate: f64) -> Self {
        Self {
            k,
            cost_rate,
            cost_mode: CostMode::Turnover,
            days: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.cost_rate) {
            return Err(Error::invalid(format!("cost rate must lie in [0, 1), got {}", self.cost_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub stock_id: u32,
    pub day: u32,
    pub pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerDay {
    pub day: u32,
    pub selected: Vec<u32>,
    pub gross: f64,
    pub sell_turnover: f64,
    pub buy_turnover: f64,
    pub exit_turnover: f64,
    /// `cost_rate * (sell + buy + exit)`.
    pub cost: f64,
    pub net: f64,
    pub accumulated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestLedger {
    pub config: BacktestConfig,
    pub days: Vec<LedgerDay>,
}

impl BacktestLedger {
    pub fn final_accumulated(&self) -> f64 {
        self.days.last().map_or(0.0, |d| d.accumulated)
    }

    /// Compounds stored net returns again; should equal the stored series.
    pub fn recompute_accumulated(&self) -> Vec<f64> {
        let mut wealth = 1.0;
        self.days
            .iter()
            .map(|d| {
                wealth *= 1.0 + d.net;
                wealth - 1.0
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "day",
            "n_selected",
            "selected",
            "gross",
            "sell_turnover",
            "buy_turnover",
            "exit_turnover",
            "cost",
            "net",
            "accumulated",
        ])?;
        for d in &self.days {
            let ids: Vec<String> = d.selected.iter().map(u32::to_string).collect();
            w.write_record([
                d.day.to_string(),
                d.selected.len().to_string(),
                ids.join(" "),
                d.gross.to_string(),
                d.sell_turnover.to_string(),
                d.buy_turnover.to_string(),
                d.exit_turnover.to_string(),
                d.cost.to_string(),
                d.net.to_string(),
                d.accumulated.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The `k` highest predictions; ties go to the smaller stock id.
pub fn select_topk(day_preds: &[(u32, f64)], k: usize) -> Vec<u32> {
    let mut v = day_preds.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v.into_iter().map(|x| x.0).collect()
}

/// Simulates the ledger. `realized` maps `(stock_id, day)` to the return
/// from close `day` to close `day + 1`.
pub fn run_backtest(
    config: &BacktestConfig,
    predictions: &[Prediction],
    realized: &HashMap<(u32, u32), f64>,
) -> Result<BacktestLedger> {
    config.validate()?;
    let mut by_day: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
    for p in predictions {
        if config.days.is_none_or(|r| r.contains(p.day)) {
            by_day.entry(p.day).or_default().push((p.stock_id, p.pred));
        }
    }
    if by_day.is_empty() {
        return Err(Error::invalid("no predictions in the backtest range"));
    }
    let c = config.cost_rate;
    let last_day = *by_day.keys().next_back().unwrap();
    let mut held: BTreeMap<u32, f64> = BTreeMap::new();
    let mut wealth = 1.0;
    let mut out = Vec::with_capacity(by_day.len());
    for (&day, preds) in &by_day {
        let selected = select_topk(preds, config.k);
        let target = 1.0 / selected.len() as f64;
        let (sell, buy) = match config.cost_mode {
            CostMode::Turnover => {
                let mut sell = 0.0;
                let mut buy = 0.0;
                for (id, w) in &held {
                    if !selected.contains(id) {
                        sell += w;
                    }
                }
                for id in &selected {
                    let w = held.get(id).copied().unwrap_or(0.0);
                    if target > w {
                        buy += target - w;
                    } else {
                        sell += w - target;
                    }
                }
                (sell.min(1.0), buy.min(1.0))
            }
            CostMode::Full => (if held.is_empty() { 0.0 } else { 1.0 }, 1.0),
        };
        let mut rets = Vec::with_capacity(selected.len());
        for &id in &selected {
            let r = realized.get(&(id, day)).copied().ok_or(Error::MissingReturn { stock: id, day })?;
            rets.push(r);
        }
        let gross = rets.iter().sum::<f64>() / rets.len() as f64;
        let exit = if day == last_day { 1.0 } else { 0.0 };
        let net = (1.0 - c * sell) * (1.0 - c * buy) * (1.0 + gross) * (1.0 - c * exit) - 1.0;
        wealth *= 1.0 + net;
        // weights drift with realized returns until the next rebalance
        held = selected
            .iter()
            .zip(&rets)
            .map(|(&id, r)| (id, target * (1.0 + r) / (1.0 + gross)))
            .collect();
        out.push(LedgerDay {
            day,
            selected,
            gross,
            sell_turnover: sell,
            buy_turnover: buy,
            exit_turnover: exit,
            cost: c * (sell + buy + exit),
            net,
            accumulated: wealth - 1.0,
        });
    }
    Ok(BacktestLedger {
        config: *config,
        days: out,
    })
}

/// Aligned accumulated-return curves of several ledgers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub days: Vec<u32>,
    pub names: Vec<String>,
    pub curves: Vec<Vec<f64>>,
}

impl CurveReport {
    pub fn finals(&self) -> Vec<(String, f64)> {
        self.names
            .iter()
            .zip(&self.curves)
            .map(|(n, c)| (n.clone(), c.last().copied().unwrap_or(0.0)))
            .collect()
    }

    /// Pointwise `a - b` of two named curves.
    pub fn gap(&self, a: &str, b: &str) -> Result<Vec<f64>> {
        let find = |name: &str| {
            self.names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::invalid(format!("no curve named {name:?}")))
        };
        let (ia, ib) = (find(a)?, find(b)?);
        Ok(self.curves[ia].iter().zip(&self.curves[ib]).map(|(x, y)| x - y).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["day".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (i, day) in self.days.iter().enumerate() {
            let mut rec = vec![day.to_string()];
            rec.extend(self.curves.iter().map(|c| c[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Line chart of all curves as a standalone SVG document.
    pub fn to_svg(&self, title: &str) -> String {
        const W: f64 = 800.0;
        const H: f64 = 420.0;
        const PAD: f64 = 50.0;
        const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for v in self.curves.iter().flatten() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let n = self.days.len().max(2) - 1;
        let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n as f64;
        let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{PAD}" y="24" font-size="15">{title}</text>"#);
        let _ = writeln!(s, r##"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="#999" stroke-dasharray="4 3"/>"##, y(0.0), W - PAD);
        let _ = writeln!(s, r#"<text x="4" y="{}">{:.1}%</text>"#, y(hi) + 4.0, hi * 100.0);
        let _ = writeln!(s, r#"<text x="4" y="{}">{:.1}%</text>"#, y(lo) + 4.0, lo * 100.0);
        for (ci, (name, curve)) in self.names.iter().zip(&self.curves).enumerate() {
            let color = COLORS[ci % COLORS.len()];
            let pts: Vec<String> = curve.iter().enumerate().map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
            let ly = PAD + 16.0 * ci as f64;
            let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#, W - PAD - 140.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

pub fn compare_curves(ledgers: &[(String, &BacktestLedger)]) -> Result<CurveReport> {
    let Some((_, first)) = ledgers.first() else {
        return Err(Error::invalid("no ledgers to compare"));
    };
    let days: Vec<u32> = first.days.iter().map(|d| d.day).collect();
    let mut curves = Vec::with_capacity(ledgers.len());
    for (name, l) in ledgers {
        let these: Vec<u32> = l.days.iter().map(|d| d.day).collect();
        if these != days {
            return Err(Error::invalid(format!("ledger {name:?} covers different days")));
        }
        curves.push(l.days.iter().map(|d| d.accumulated).collect());
    }
    Ok(CurveReport {
        days,
        names: ledgers.iter().map(|(n, _)| n.clone()).collect(),
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn preds(rows: &[(u32, u32, f64)]) -> Vec<Prediction> {
        rows.iter().map(|&(s, d, p)| Prediction { stock_id: s, day: d, pred: p }).collect()
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[(0, 0.03), (1, 0.01), (2, 0.02)], 2), vec![0, 2]);
        assert_eq!(select_topk(&[(1, 0.02), (0, 0.02)], 1), vec![0]);
        assert_eq!(select_topk(&[(5, 0.1), (3, 0.2)], 10), vec![3, 5]);
    }

    #[test]
    fn single_day_hand_ledger() {
        let p = preds(&[(0, 0, 1.0), (1, 0, 0.0)]);
        let r = HashMap::from([((0, 0), 0.02), ((1, 0), -0.5)]);
        let l = run_backtest(&BacktestConfig::new(1, 0.004), &p, &r).unwrap();
        assert_abs_diff_eq!(l.final_accumulated(), 0.996 * 1.02 * 0.996 - 1.0, epsilon = 1e-12);
        assert_eq!(l.days[0].selected, vec![0]);
    }

    #[test]
    fn unchanged_holdings_cost_nothing() {
        let p = preds(&[(0, 0, 1.0), (1, 0, 0.0), (0, 1, 1.0), (1, 1, 0.0), (0, 2, 1.0), (1, 2, 0.0)]);
        let r: HashMap<(u32, u32), f64> = (0..3).flat_map(|d| [((0, d), 0.01), ((1, d), 0.0)]).collect();
        let l = run_backtest(&BacktestConfig::new(1, 0.004), &p, &r).unwrap();
        assert_eq!((l.days[1].sell_turnover, l.days[1].buy_turnover, l.days[1].cost), (0.0, 0.0, 0.0));
        assert_abs_diff_eq!(l.days[1].net, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn full_rotation_turnover() {
        let p = preds(&[(0, 0, 1.0), (1, 0, 0.0), (0, 1, 0.0), (1, 1, 1.0)]);
        let r = HashMap::from([((0, 0), 0.0), ((1, 0), 0.0), ((0, 1), 0.0), ((1, 1), 0.0)]);
        let l = run_backtest(&BacktestConfig::new(1, 0.01), &p, &r).unwrap();
        assert_eq!((l.days[1].sell_turnover, l.days[1].buy_turnover), (1.0, 1.0));
        let mut full = BacktestConfig::new(1, 0.01);
        full.cost_mode = CostMode::Full;
        let lf = run_backtest(&full, &p, &r).unwrap();
        assert_eq!(lf.days, l.days);
    }

    #[test]
    fn missing_return_is_named() {
        let p = preds(&[(4, 9, 1.0)]);
        let err = run_backtest(&BacktestConfig::new(1, 0.0), &p, &HashMap::new()).unwrap_err();
        assert!(matches!(err, Error::MissingReturn { stock: 4, day: 9 }));
    }

    #[test]
    fn curves_and_gap() {
        let mk = |nets: &[f64]| {
            let mut w = 1.0;
            BacktestLedger {
                config: BacktestConfig::new(1, 0.0),
                days: nets
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| {
                        w *= 1.0 + n;
                        LedgerDay {
                            day: i as u32,
                            selected: vec![],
                            gross: n,
                            sell_turnover: 0.0,
                            buy_turnover: 0.0,
                            exit_turnover: 0.0,
                            cost: 0.0,
                            net: n,
                            accumulated: w - 1.0,
                        }
                    })
                    .collect(),
            }
        };
        let a = mk(&[0.1, -0.1, 0.2]);
        let b = mk(&[0.0, 0.1, 0.0]);
        let rep = compare_curves(&[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let gap = rep.gap("a", "b").unwrap();
        let expect = [0.1, 1.1 * 0.9 - 1.1, 1.1 * 0.9 * 1.2 - 1.1];
        for (g, e) in gap.iter().zip(expect) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-12);
        }
        assert!(rep.gap("a", "a").unwrap().iter().all(|g| *g == 0.0));
        assert!(rep.to_svg("t").starts_with("<svg"));
        let short = mk(&[0.1]);
        assert!(compare_curves(&[("a".into(), &a), ("s".into(), &short)]).is_err());
    }
}
