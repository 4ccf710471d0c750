//! Prediction files, evaluation summaries, the rare-sample comparison and
//! run reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backtest::Prediction;
use crate::data::SplitKind;
use crate::error::{Error, Result};
use crate::metrics::{classification_eval, daily_eval, ClassEval, DailyReport};

/// One row of a predictions CSV. Optional columns are empty for models
/// without market or adversarial heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub stock_id: u32,
    pub day: u32,
    pub split: SplitKind,
    pub pred_e: f64,
    pub prob_down: Option<f64>,
    pub prob_steady: Option<f64>,
    pub prob_up: Option<f64>,
    pub pred_m: Option<usize>,
    pub adv_e: Option<f64>,
    pub adv_m: Option<usize>,
    pub y_e: f64,
    pub y_m: usize,
    pub r: f64,
    pub m: f64,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrSummary {
    pub mean_ic: f64,
    pub mean_rank_ic: f64,
    pub n_days: usize,
    pub excluded_days: usize,
}

impl From<&DailyReport> for CorrSummary {
    fn from(d: &DailyReport) -> Self {
        Self {
            mean_ic: d.mean_ic(),
            mean_rank_ic: d.mean_rank_ic(),
            n_days: d.days.len(),
            excluded_days: d.excluded,
        }
    }
}

/// Predictor (higher is better) and adversary (lower is better) scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub pre_e: CorrSummary,
    pub adv_e: Option<CorrSummary>,
    pub pre_m: Option<ClassEval>,
    pub adv_m: Option<ClassEval>,
}

/// Daily correlations of the excess predictions and, when present, of the adversary.
pub fn daily_reports(rows: &[PredictionRow]) -> Result<(DailyReport, Option<DailyReport>)> {
    let labels: Vec<f64> = rows.iter().map(|r| r.y_e).collect();
    let days: Vec<u32> = rows.iter().map(|r| r.day).collect();
    let pre = daily_eval(&rows.iter().map(|r| r.pred_e).collect::<Vec<_>>(), &labels, &days)?;
    let adv: Option<Vec<f64>> = rows.iter().map(|r| r.adv_e).collect();
    let adv = adv.map(|a| daily_eval(&a, &labels, &days)).transpose()?;
    Ok((pre, adv))
}

pub fn evaluate(rows: &[PredictionRow]) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let (pre, adv) = daily_reports(rows)?;
    let truth: Vec<usize> = rows.iter().map(|r| r.y_m).collect();
    let class = |pick: fn(&PredictionRow) -> Option<usize>| -> Result<Option<ClassEval>> {
        let pred: Option<Vec<usize>> = rows.iter().map(pick).collect();
        pred.map(|p| classification_eval(&p, &truth)).transpose()
    };
    Ok(EvalReport {
        n_samples: rows.len(),
        pre_e: CorrSummary::from(&pre),
        adv_e: adv.as_ref().map(CorrSummary::from),
        pre_m: class(|r| r.pred_m)?,
        adv_m: class(|r| r.adv_m)?,
    })
}

/// Writes `daily.csv` and `summary.json` for a predictions file.
pub fn evaluate_to_dir(rows: &[PredictionRow], dir: &Path) -> Result<EvalReport> {
    std::fs::create_dir_all(dir)?;
    let (pre, adv) = daily_reports(rows)?;
    let mut w = csv::Writer::from_path(dir.join("daily.csv"))?;
    w.write_record(["day", "ic", "rank_ic", "n_samples", "adv_ic", "adv_rank_ic"])?;
    let adv_by_day: HashMap<u32, (f64, f64)> = adv
        .iter()
        .flat_map(|a| a.days.iter().map(|d| (d.day, (d.ic, d.rank_ic))))
        .collect();
    for d in &pre.days {
        let (ai, ar) = adv_by_day
            .get(&d.day)
            .map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        w.write_record([d.day.to_string(), d.ic.to_string(), d.rank_ic.to_string(), d.n_samples.to_string(), ai, ar])?;
    }
    w.flush()?;
    let rep = evaluate(rows)?;
    crate::io::write_json(&dir.join("summary.json"), &rep)?;
    Ok(rep)
}

/// Backtest inputs from prediction rows: `r` is the realized next-day return.
pub fn backtest_inputs(rows: &[PredictionRow]) -> (Vec<Prediction>, HashMap<(u32, u32), f64>) {
    let preds = rows
        .iter()
        .map(|r| Prediction {
            stock_id: r.stock_id,
            day: r.day,
            pred: r.pred_e,
        })
        .collect();
    let realized = rows.iter().map(|r| ((r.stock_id, r.day), r.r)).collect();
    (preds, realized)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetWin {
    pub subset: String,
    pub size: usize,
    /// Fraction of samples where the model's absolute error is below the
    /// baseline's; ties count one half.
    pub win_ratio: f64,
}

/// Splits samples into three equal subsets by the baseline's absolute error
/// (low = worst baseline performance) and reports the model's win ratio.
pub fn rare_sample_comparison(model: &[PredictionRow], baseline: &[PredictionRow]) -> Result<Vec<SubsetWin>> {
    let base: HashMap<(u32, u32), f64> = baseline.iter().map(|r| ((r.stock_id, r.day), (r.pred_e - r.y_e).abs())).collect();
    let mut joined = Vec::with_capacity(model.len());
    for r in model {
        let b = base
            .get(&(r.stock_id, r.day))
            .ok_or_else(|| Error::invalid(format!("baseline has no prediction for stock {} day {}", r.stock_id, r.day)))?;
        joined.push(((r.stock_id, r.day), *b, (r.pred_e - r.y_e).abs()));
    }
    if joined.len() < 3 {
        return Err(Error::invalid("need at least three samples for the subset comparison"));
    }
    joined.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = joined.len();
    let mut out = Vec::with_capacity(3);
    let mut start = 0;
    for (i, name) in ["low", "middle", "high"].into_iter().enumerate() {
        let size = n / 3 + usize::from(i < n % 3);
        let part = &joined[start..start + size];
        start += size;
        let wins: f64 = part
            .iter()
            .map(|(_, b, m)| if m < b { 1.0 } else if m == b { 0.5 } else { 0.0 })
            .sum();
        out.push(SubsetWin {
            subset: name.to_string(),
            size,
            win_ratio: wins / size as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub model: EvalReport,
    pub baseline: Option<EvalReport>,
    pub subsets: Option<Vec<SubsetWin>>,
    pub backtest_finals: Vec<(String, f64)>,
    pub sweep: Option<Vec<Vec<String>>>,
}

fn read_csv_table(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    r.records().map(|rec| Ok(rec?.iter().map(str::to_string).collect())).collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// Builds `report.md` and `report.json` from a run directory.
pub fn build_report(dir: &Path) -> Result<RunReport> {
    let rows = read_predictions(&dir.join("predictions_test.csv"))?;
    let model = evaluate(&rows)?;
    let base_path = dir.join("baseline_predictions_test.csv");
    let (baseline, subsets) = if base_path.exists() {
        let b = read_predictions(&base_path)?;
        (Some(evaluate(&b)?), Some(rare_sample_comparison(&rows, &b)?))
    } else {
        (None, None)
    };
    let curves = dir.join("backtest").join("curves.csv");
    let backtest_finals = if curves.exists() {
        let t = read_csv_table(&curves)?;
        match (t.first(), t.last()) {
            (Some(h), Some(last)) if t.len() > 1 => h[1..]
                .iter()
                .zip(&last[1..])
                .map(|(n, v)| Ok((n.clone(), v.parse::<f64>().map_err(|_| Error::Parse(format!("bad curve value {v:?}")))?)))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        }
    } else {
        Vec::new()
    };
    let sweep_path = dir.join("sweep.csv");
    let sweep = if sweep_path.exists() { Some(read_csv_table(&sweep_path)?) } else { None };
    let rep = RunReport {
        model,
        baseline,
        subsets,
        backtest_finals,
        sweep,
    };
    std::fs::write(dir.join("report.md"), render_markdown(&rep))?;
    crate::io::write_json(&dir.join("report.json"), &rep)?;
    Ok(rep)
}

pub fn render_markdown(rep: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run report\n");
    let _ = writeln!(s, "Test samples: {}\n", rep.model.n_samples);
    let _ = writeln!(s, "## Excess return (IC, Rank IC)\n");
    let _ = writeln!(s, "| model | Pre IC | Pre Rank IC | Adv IC | Adv Rank IC |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    let adv = |c: &Option<CorrSummary>| c.map_or(("-".into(), "-".into()), |c| (format!("{:.4}", c.mean_ic), format!("{:.4}", c.mean_rank_ic)));
    let (ai, ar) = adv(&rep.model.adv_e);
    let _ = writeln!(s, "| ADD | {:.4} | {:.4} | {ai} | {ar} |", rep.model.pre_e.mean_ic, rep.model.pre_e.mean_rank_ic);
    if let Some(b) = &rep.baseline {
        let _ = writeln!(s, "| GRU | {:.4} | {:.4} | - | - |", b.pre_e.mean_ic, b.pre_e.mean_rank_ic);
    }
    if let (Some(pm), Some(am)) = (&rep.model.pre_m, &rep.model.adv_m) {
        let _ = writeln!(s, "\n## Market class (accuracy, macro F1)\n");
        let _ = writeln!(s, "| head | accuracy | macro F1 |");
        let _ = writeln!(s, "|---|---|---|");
        let _ = writeln!(s, "| Pre | {} | {:.4} |", pct(pm.accuracy), pm.macro_f1);
        let _ = writeln!(s, "| Adv | {} | {:.4} |", pct(am.accuracy), am.macro_f1);
    }
    if let Some(sub) = &rep.subsets {
        let _ = writeln!(s, "\n## Win ratio against the baseline by subset\n");
        let _ = writeln!(s, "| subset | size | win ratio |");
        let _ = writeln!(s, "|---|---|---|");
        for w in sub {
            let _ = writeln!(s, "| {} | {} | {} |", w.subset, w.size, pct(w.win_ratio));
        }
    }
    if !rep.backtest_finals.is_empty() {
        let _ = writeln!(s, "\n## Backtest final accumulated return\n");
        let _ = writeln!(s, "| portfolio | accumulated |");
        let _ = writeln!(s, "|---|---|");
        for (n, v) in &rep.backtest_finals {
            let _ = writeln!(s, "| {n} | {} |", pct(*v));
        }
        let _ = writeln!(s, "\nCurves: `backtest/curves.svg`");
    }
    if let Some(t) = &rep.sweep {
        let _ = writeln!(s, "\n## Sweep\n");
        for (i, row) in t.iter().enumerate() {
            let _ = writeln!(s, "| {} |", row.join(" | "));
            if i == 0 {
                let _ = writeln!(s, "|{}", "---|".repeat(row.len()));
            }
        }
    }
    s
}
