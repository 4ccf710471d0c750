//! Price bars, label construction, sample assembly and feature normalization.
//!
//! A sample for stock `i` on day `j` carries the trailing `WINDOW` days of six
//! factors (oldest first) and the labels of the close-to-close return from
//! `j` to `j + 1`.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FACTORS: usize = 6;
pub const WINDOW: usize = 60;
pub const FACTOR_NAMES: [&str; N_FACTORS] = ["open", "close", "high", "low", "volume", "vwap"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub stock_id: u32,
    pub day: u32,
    pub open: f64,
    pub close: f64,
    pub high: f64,
    pub low: f64,
    pub volume: f64,
    pub vwap: f64,
}

impl PriceBar {
    pub fn validate(&self) -> Result<()> {
        let prices = [self.open, self.close, self.high, self.low, self.vwap];
        if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid(format!(
                "nonpositive price for stock {} day {}",
                self.stock_id, self.day
            )));
        }
        let lo = self.open.min(self.close);
        let hi = self.open.max(self.close);
        if self.low > lo || hi > self.high || !(self.volume >= 0.0) {
            return Err(Error::invalid(format!(
                "inconsistent bar for stock {} day {}",
                self.stock_id, self.day
            )));
        }
        Ok(())
    }

    fn factor(&self, f: usize) -> f64 {
        match f {
            0 => self.open,
            1 => self.close,
            2 => self.high,
            3 => self.low,
            4 => self.volume,
            _ => self.vwap,
        }
    }
}

/// Close-to-close change rate `(p1 - p0) / p0`.
pub fn stock_return(price: f64, next_price: f64) -> Result<f64> {
    if !(price > 0.0) {
        return Err(Error::invalid(format!("nonpositive price {price}")));
    }
    Ok((next_price - price) / price)
}

/// Cross-sectional arithmetic mean of one day's stock returns.
pub fn market_return(returns: &[f64]) -> Result<f64> {
    if returns.is_empty() {
        return Err(Error::invalid("market return of an empty day"));
    }
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}

pub fn excess_return(stock: f64, market: f64) -> f64 {
    stock - market
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MarketClass {
    Down = 0,
    Steady = 1,
    Up = 2,
}

impl MarketClass {
    pub const ALL: [MarketClass; 3] = [MarketClass::Down, MarketClass::Steady, MarketClass::Up];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(Error::LabelOutOfRange { label: i, classes: 3 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketThresholds {
    pub t_low: f64,
    pub t_high: f64,
    /// First and last training day the thresholds were fit on.
    pub fit_days: (u32, u32),
}

impl MarketThresholds {
    /// `m < t_low` is down, `t_low <= m < t_high` is steady, otherwise up.
    pub fn classify(&self, m: f64) -> MarketClass {
        if m < self.t_low {
            MarketClass::Down
        } else if m < self.t_high {
            MarketClass::Steady
        } else {
            MarketClass::Up
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Tertile thresholds of the per-day training market returns.
pub fn fit_thresholds(train_market_returns: &[f64]) -> Result<MarketThresholds> {
    if train_market_returns.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 training days to fit thresholds, got {}",
            train_market_returns.len()
        )));
    }
    let mut sorted = train_market_returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t_low = quantile_sorted(&sorted, 1.0 / 3.0);
    let t_high = quantile_sorted(&sorted, 2.0 / 3.0);
    if t_low == t_high {
        warn!("degenerate market thresholds ({t_low}); every day classifies as up");
    }
    Ok(MarketThresholds {
        t_low,
        t_high,
        fit_days: (0, 0),
    })
}

/// Half-open day range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRange {
    pub start: u32,
    pub end: u32,
}

impl DayRange {
    pub fn new(start: u32, end: u32) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, day: u32) -> bool {
        day >= self.start && day < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (train|valid|test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: DayRange,
    pub valid: DayRange,
    pub test: DayRange,
}

impl DatasetSplit {
    pub fn new(train: DayRange, valid: DayRange, test: DayRange) -> Result<Self> {
        let ordered = train.start < train.end
            && valid.start < valid.end
            && test.start < test.end
            && train.end <= valid.start
            && valid.end <= test.start;
        if !ordered {
            return Err(Error::invalid("splits must be non-empty, chronological and disjoint"));
        }
        Ok(Self { train, valid, test })
    }

    /// Chronological split of the sample days `[first, last]` by fractions
    /// for train and validation; the remainder is test.
    pub fn chronological(first: u32, last: u32, train_frac: f64, valid_frac: f64) -> Result<Self> {
        let n = (last + 1 - first) as f64;
        let t_end = first + (n * train_frac).round() as u32;
        let v_end = t_end + (n * valid_frac).round() as u32;
        Self::new(
            DayRange::new(first, t_end),
            DayRange::new(t_end, v_end),
            DayRange::new(v_end, last + 1),
        )
    }

    /// Default split over the sample days of a series `n_days` long.
    pub fn for_series(n_days: u32, window: usize) -> Result<Self> {
        let first = window as u32 - 1;
        let last = n_days
            .checked_sub(2)
            .filter(|l| *l >= first + 2)
            .ok_or_else(|| Error::invalid(format!("{n_days} days is too short for window {window}")))?;
        Self::chronological(first, last, 0.6, 0.2)
    }

    pub fn kind_of(&self, day: u32) -> Option<SplitKind> {
        if self.train.contains(day) {
            Some(SplitKind::Train)
        } else if self.valid.contains(day) {
            Some(SplitKind::Valid)
        } else if self.test.contains(day) {
            Some(SplitKind::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockSample {
    pub stock_id: u32,
    pub day: u32,
    /// `N_FACTORS x WINDOW`, factor-major, oldest day first.
    pub features: Vec<f64>,
    pub y_e: f64,
    pub y_m: MarketClass,
    pub r: f64,
    pub m: f64,
}

impl StockSample {
    pub fn feature(&self, factor: usize, t: usize) -> f64 {
        self.features[factor * WINDOW + t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// False where the training std was zero and the factor was left as is.
    pub scaled: Vec<bool>,
    /// Standard deviation of training excess returns; used to scale the
    /// regression target during training.
    pub label_std: f64,
}

impl NormStats {
    pub fn apply(&self, features: &mut [f64]) {
        let window = features.len() / N_FACTORS;
        for f in 0..N_FACTORS {
            if !self.scaled[f] {
                continue;
            }
            for v in &mut features[f * window..(f + 1) * window] {
                *v = (*v - self.mean[f]) / self.std[f];
            }
        }
    }
}

/// Everything derived from one price history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<StockSample>,
    pub split: DatasetSplit,
    pub thresholds: MarketThresholds,
    pub norm: Option<NormStats>,
    pub window: usize,
    /// (stock, day) pairs with a label but no complete feature history.
    pub skipped: usize,
    /// Market return of every labelled day, including days outside the splits.
    pub market_by_day: BTreeMap<u32, f64>,
}

/// Sidecar metadata stored next to a samples CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub split: DatasetSplit,
    pub thresholds: MarketThresholds,
    pub norm: Option<NormStats>,
    pub window: usize,
    pub skipped: usize,
}

impl Dataset {
    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            split: self.split,
            thresholds: self.thresholds,
            norm: self.norm.clone(),
            window: self.window,
            skipped: self.skipped,
        }
    }

    pub fn indices(&self, kind: SplitKind) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| self.split.kind_of(s.day) == Some(kind))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn days(&self, kind: SplitKind) -> Vec<u32> {
        let mut days: Vec<u32> = self
            .samples
            .iter()
            .filter(|s| self.split.kind_of(s.day) == Some(kind))
            .map(|s| s.day)
            .collect();
        days.dedup();
        days.sort_unstable();
        days.dedup();
        days
    }

    pub fn label_std(&self) -> f64 {
        self.norm.as_ref().map_or(1.0, |n| n.label_std)
    }
}

/// Assembles labelled samples from bars.
///
/// Prices in the window are expressed relative to the sample day's close and
/// volume relative to the window's mean volume, so the raw factors are
/// scale-free across stocks. Market returns use every stock with closes on
/// `j` and `j + 1`, before any filtering for history length. Thresholds are
/// fit on training days only.
pub fn build_samples(bars: &[PriceBar], window: usize, split: DatasetSplit) -> Result<Dataset> {
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    let mut by_stock: BTreeMap<u32, BTreeMap<u32, &PriceBar>> = BTreeMap::new();
    for bar in bars {
        bar.validate()?;
        by_stock.entry(bar.stock_id).or_default().insert(bar.day, bar);
    }

    let mut returns_by_day: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut stock_returns: HashMap<(u32, u32), f64> = HashMap::new();
    for (&stock, series) in &by_stock {
        for (&day, bar) in series {
            if let Some(next) = series.get(&(day + 1)) {
                let r = stock_return(bar.close, next.close)?;
                returns_by_day.entry(day).or_default().push(r);
                stock_returns.insert((stock, day), r);
            }
        }
    }
    let mut market_by_day = BTreeMap::new();
    for (day, rs) in &returns_by_day {
        market_by_day.insert(*day, market_return(rs)?);
    }

    let train_market: Vec<f64> = market_by_day
        .iter()
        .filter(|(d, _)| split.train.contains(**d))
        .map(|(_, m)| *m)
        .collect();
    let mut thresholds = fit_thresholds(&train_market)?;
    let train_days: Vec<u32> = market_by_day
        .keys()
        .filter(|d| split.train.contains(**d))
        .copied()
        .collect();
    thresholds.fit_days = (train_days[0], *train_days.last().expect("nonempty"));

    let mut samples = Vec::new();
    let mut skipped = 0;
    for (&stock, series) in &by_stock {
        for (&day, _) in series {
            let Some(&r) = stock_returns.get(&(stock, day)) else { continue };
            if split.kind_of(day).is_none() {
                continue;
            }
            let start = match (day + 1).checked_sub(window as u32) {
                Some(s) => s,
                None => {
                    skipped += 1;
                    continue;
                }
            };
            let hist: Option<Vec<&PriceBar>> = (start..=day).map(|d| series.get(&d).copied()).collect();
            let Some(hist) = hist else {
                skipped += 1;
                continue;
            };
            let m = market_by_day[&day];
            samples.push(StockSample {
                stock_id: stock,
                day,
                features: window_features(&hist),
                y_e: excess_return(r, m),
                y_m: thresholds.classify(m),
                r,
                m,
            });
        }
    }
    samples.sort_by_key(|s| (s.day, s.stock_id));
    if skipped > 0 {
        log::info!("skipped {skipped} labelled samples without a full {window}-day history");
    }
    Ok(Dataset {
        samples,
        split,
        thresholds,
        norm: None,
        window,
        skipped,
        market_by_day,
    })
}

fn window_features(hist: &[&PriceBar]) -> Vec<f64> {
    let window = hist.len();
    let last_close = hist[window - 1].close;
    let mean_volume = hist.iter().map(|b| b.volume).sum::<f64>() / window as f64;
    let mut out = vec![0.0; N_FACTORS * window];
    for f in 0..N_FACTORS {
        for (t, bar) in hist.iter().enumerate() {
            out[f * window + t] = if f == 4 {
                if mean_volume > 0.0 {
                    bar.volume / mean_volume
                } else {
                    0.0
                }
            } else {
                bar.factor(f) / last_close
            };
        }
    }
    out
}

/// Per-factor mean and population std over the training samples.
pub fn fit_normalization(ds: &Dataset) -> Result<NormStats> {
    let train = ds.indices(SplitKind::Train);
    if train.is_empty() {
        return Err(Error::invalid("no training samples to fit normalization"));
    }
    let window = ds.window;
    let mut mean = vec![0.0; N_FACTORS];
    let mut std = vec![0.0; N_FACTORS];
    let mut scaled = vec![true; N_FACTORS];
    let count = (train.len() * window) as f64;
    for f in 0..N_FACTORS {
        let sum: f64 = train
            .iter()
            .map(|&i| ds.samples[i].features[f * window..(f + 1) * window].iter().sum::<f64>())
            .sum();
        mean[f] = sum / count;
        let ss: f64 = train
            .iter()
            .map(|&i| {
                ds.samples[i].features[f * window..(f + 1) * window]
                    .iter()
                    .map(|v| (v - mean[f]).powi(2))
                    .sum::<f64>()
            })
            .sum();
        std[f] = (ss / count).sqrt();
        if std[f] == 0.0 || !std[f].is_finite() {
            warn!("factor {} is constant on the training split; left unscaled", FACTOR_NAMES[f]);
            scaled[f] = false;
        }
    }
    let ys: Vec<f64> = train.iter().map(|&i| ds.samples[i].y_e).collect();
    let y_mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let y_std = (ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
    let label_std = if y_std > 0.0 { y_std } else { 1.0 };
    Ok(NormStats {
        mean,
        std,
        scaled,
        label_std,
    })
}

/// Z-scores every factor with training-split statistics.
pub fn normalize_features(mut ds: Dataset) -> Result<Dataset> {
    let stats = fit_normalization(&ds)?;
    for s in &mut ds.samples {
        stats.apply(&mut s.features);
    }
    ds.norm = Some(stats);
    Ok(ds)
}
