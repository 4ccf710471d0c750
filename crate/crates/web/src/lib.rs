//! WebAssembly bindings for the demo page in `www/`. Every export returns a
//! JSON string; the plain `*_json` functions are usable from Rust as well.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use stockdd::backtest::{compare_curves, run_backtest, BacktestConfig, Prediction};
use stockdd::distill::{day_weight, knowledge_weight, sample_weight, DistillParams};
use stockdd::pipeline::dataset_from_bars;
use stockdd::report::backtest_inputs;
use stockdd::rng::sub_rng;
use stockdd::synth::{generate_synthetic_market, SynthParams};

const MIN_DAYS: usize = 100;
const SHOWN_STOCKS: usize = 6;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Serialize)]
struct MarketView {
    days: Vec<u32>,
    market: Vec<f64>,
    classes: Vec<usize>,
    t_low: f64,
    t_high: f64,
    train_end: u32,
    valid_end: u32,
    closes: Vec<Vec<f64>>,
}

pub fn market_json(stocks: usize, days: usize, seed: u64) -> Result<String, String> {
    let bars = generate_synthetic_market(stocks, days.max(MIN_DAYS), seed, &SynthParams::default()).map_err(err)?;
    let ds = dataset_from_bars(&bars, stockdd::data::WINDOW).map_err(err)?;
    let mut closes = vec![Vec::new(); stocks.min(SHOWN_STOCKS)];
    for b in &bars {
        if let Some(c) = closes.get_mut(b.stock_id as usize) {
            c.push(b.close);
        }
    }
    let view = MarketView {
        days: ds.market_by_day.keys().copied().collect(),
        market: ds.market_by_day.values().copied().collect(),
        classes: ds.market_by_day.values().map(|m| ds.thresholds.classify(*m).index()).collect(),
        t_low: ds.thresholds.t_low,
        t_high: ds.thresholds.t_high,
        train_end: ds.split.train.end,
        valid_end: ds.split.valid.end,
        closes,
    };
    serde_json::to_string(&view).map_err(err)
}

#[derive(Serialize)]
struct WeightView {
    wd: f64,
    ws: f64,
    w: f64,
    lower_bound: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn weights_json(
    ic: f64,
    ic_max: f64,
    ic_min: f64,
    mse: f64,
    mse_max: f64,
    mse_min: f64,
    beta_day: f64,
    beta_sample: f64,
    alpha: f64,
) -> Result<String, String> {
    let wd = day_weight(ic, ic_max, ic_min, beta_day).map_err(err)?;
    let ws = sample_weight(mse, mse_max, mse_min, beta_sample).map_err(err)?;
    let w = knowledge_weight(wd, ws, alpha).map_err(err)?;
    let lower_bound = DistillParams {
        beta_day,
        beta_sample,
        alpha,
    }
    .lower_bound();
    serde_json::to_string(&WeightView { wd, ws, w, lower_bound }).map_err(err)
}

/// Top-k curves for a forecaster whose predictions correlate with the
/// realized excess return at roughly `skill`.
pub fn backtest_json(stocks: usize, days: usize, seed: u64, skill: f64, cost: f64, ks: &[usize]) -> Result<String, String> {
    if !(0.0..=1.0).contains(&skill) {
        return Err("skill must lie in [0, 1]".into());
    }
    let bars = generate_synthetic_market(stocks, days.max(MIN_DAYS), seed, &SynthParams::default()).map_err(err)?;
    let ds = dataset_from_bars(&bars, stockdd::data::WINDOW).map_err(err)?;
    let scale = ds.label_std();
    let mut rng = sub_rng(seed, "web.forecast");
    let noise = (1.0 - skill * skill).sqrt();
    let rows: Vec<stockdd::report::PredictionRow> = ds
        .samples
        .iter()
        .map(|s| {
            let z: f64 = StandardNormal.sample(&mut rng);
            stockdd::report::PredictionRow {
                stock_id: s.stock_id,
                day: s.day,
                split: stockdd::data::SplitKind::Test,
                pred_e: skill * s.y_e / scale + noise * z,
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
            }
        })
        .collect();
    let (preds, realized) = backtest_inputs(&rows);
    let mut ledgers = Vec::new();
    for &k in ks {
        ledgers.push((format!("top-{k}"), run_backtest(&BacktestConfig::new(k, cost), &preds, &realized).map_err(err)?));
    }
    let everyone: Vec<Prediction> = preds.iter().map(|p| Prediction { pred: 0.0, ..*p }).collect();
    ledgers.push((
        "market".into(),
        run_backtest(&BacktestConfig::new(stocks, 0.0), &everyone, &realized).map_err(err)?,
    ));
    let named: Vec<(String, &_)> = ledgers.iter().map(|(n, l)| (n.clone(), l)).collect();
    let report = compare_curves(&named).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[wasm_bindgen]
pub fn market(stocks: usize, days: usize, seed: u32) -> Result<String, JsError> {
    market_json(stocks, days, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn weights(
    ic: f64,
    ic_max: f64,
    ic_min: f64,
    mse: f64,
    mse_max: f64,
    mse_min: f64,
    beta_day: f64,
    beta_sample: f64,
    alpha: f64,
) -> Result<String, JsError> {
    weights_json(ic, ic_max, ic_min, mse, mse_max, mse_min, beta_day, beta_sample, alpha).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn backtest(stocks: usize, days: usize, seed: u32, skill: f64, cost: f64, ks: Vec<u32>) -> Result<String, JsError> {
    let ks: Vec<usize> = ks.into_iter().map(|k| k as usize).collect();
    backtest_json(stocks, days, seed as u64, skill, cost, &ks).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn market_view_has_tertiles() {
        let v: serde_json::Value = serde_json::from_str(&market_json(8, 120, 1).unwrap()).unwrap();
        let n = v["market"].as_array().unwrap().len();
        assert_eq!(v["classes"].as_array().unwrap().len(), n);
        assert_eq!(v["closes"].as_array().unwrap().len(), 6);
        assert!(v["t_low"].as_f64().unwrap() <= v["t_high"].as_f64().unwrap());
    }

    #[test]
    fn weight_view_matches_hand_values() {
        let v: serde_json::Value = serde_json::from_str(&weights_json(0.5, 0.75, 0.25, 0.5, 0.75, 0.25, 0.5, 0.2, 0.4).unwrap()).unwrap();
        assert!((v["wd"].as_f64().unwrap() - 0.75).abs() < 1e-12);
        assert!((v["ws"].as_f64().unwrap() - 0.6).abs() < 1e-12);
        assert!((v["w"].as_f64().unwrap() - 0.66).abs() < 1e-12);
        assert!(weights_json(0.9, 0.75, 0.25, 0.5, 0.75, 0.25, 0.5, 0.2, 0.4).is_err());
    }

    #[test]
    fn skilled_forecasts_beat_the_market() {
        let v: serde_json::Value = serde_json::from_str(&backtest_json(20, 130, 2, 0.9, 0.0, &[3]).unwrap()).unwrap();
        let curves = v["curves"].as_array().unwrap();
        assert_eq!(curves.len(), 2);
        let last = |c: &serde_json::Value| c.as_array().unwrap().last().unwrap().as_f64().unwrap();
        assert!(last(&curves[0]) > last(&curves[1]));
    }
}
