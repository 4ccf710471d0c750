//! Synthetic price histories with a planted market/excess factor structure.
//!
//! Log return of stock `i` on day `j`:
//!
//! ```text
//! g_ij = beta_i * m_j + a_ij + e_ij
//! m_j  = phi_m * m_{j-1} + sigma_m * sqrt(1 - phi_m^2) * u_j
//! a_ij = phi_idio * a_i,j-1 + sigma_idio * sqrt(1 - phi_idio^2) * v_ij
//! e_ij = noise_ratio * sigma_idio * w_ij
//! ```
//!
//! with `u, v, w` standard normal. Open, high, low, vwap and volume are
//! derived from the close path and scale with each stock's daily volatility,
//! so zero volatility yields flat bars.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::PriceBar;
use crate::error::{Error, Result};
use crate::rng::sub_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub phi_m: f64,
    pub sigma_m: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub phi_idio: f64,
    pub sigma_idio: f64,
    pub noise_ratio: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            phi_m: 0.2,
            sigma_m: 0.01,
            beta_min: 0.5,
            beta_max: 1.5,
            phi_idio: 0.5,
            sigma_idio: 0.006,
            noise_ratio: 0.67,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.phi_m.abs() < 1.0
            && self.phi_idio.abs() < 1.0
            && self.sigma_m >= 0.0
            && self.sigma_idio >= 0.0
            && self.noise_ratio >= 0.0
            && self.beta_min <= self.beta_max
            && [self.sigma_m, self.sigma_idio, self.noise_ratio, self.beta_min, self.beta_max]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid synthetic market parameters: {self:?}")))
        }
    }
}

fn normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Bars ordered by stock then day.
pub fn generate_synthetic_market(n_stocks: usize, n_days: usize, seed: u64, params: &SynthParams) -> Result<Vec<PriceBar>> {
    if n_stocks < 2 {
        return Err(Error::invalid("need at least 2 stocks"));
    }
    if n_days <= 61 {
        return Err(Error::invalid("need more than 61 days"));
    }
    params.validate()?;

    let mut market_rng = sub_rng(seed, "synth.market");
    let mut m = Vec::with_capacity(n_days);
    let innov_m = params.sigma_m * (1.0 - params.phi_m * params.phi_m).sqrt();
    let mut prev = params.sigma_m * normal(&mut market_rng);
    for _ in 0..n_days {
        prev = params.phi_m * prev + innov_m * normal(&mut market_rng);
        m.push(prev);
    }

    let innov_a = params.sigma_idio * (1.0 - params.phi_idio * params.phi_idio).sqrt();
    let noise_sd = params.sigma_idio * params.noise_ratio;
    let mut bars = Vec::with_capacity(n_stocks * n_days);
    for i in 0..n_stocks {
        let mut rng = sub_rng(seed, &format!("synth.stock.{i}"));
        let beta = if params.beta_min == params.beta_max {
            params.beta_min
        } else {
            rng.random_range(params.beta_min..=params.beta_max)
        };
        let vol = beta.abs() * params.sigma_m + params.sigma_idio;
        let base_volume = 1e5 * (1.0 + 9.0 * rng.random::<f64>());
        let mut close = 10.0 + 90.0 * rng.random::<f64>();
        let mut a = params.sigma_idio * normal(&mut rng);
        let mut prev_close = close;
        for (j, &mj) in m.iter().enumerate() {
            // draw every variate unconditionally so streams do not depend on branches
            let (v, w, gap, up, down, mix, vn) = (
                normal(&mut rng),
                normal(&mut rng),
                normal(&mut rng),
                normal(&mut rng).abs(),
                normal(&mut rng).abs(),
                rng.random::<f64>(),
                normal(&mut rng),
            );
            let g = if j == 0 {
                0.0
            } else {
                a = params.phi_idio * a + innov_a * v;
                beta * mj + a + noise_sd * w
            };
            close = prev_close * g.exp();
            let open = prev_close * (0.25 * vol * gap).exp();
            let high = open.max(close) * (0.5 * vol * up).exp();
            let low = open.min(close) * (-0.5 * vol * down).exp();
            let vwap = low + (high - low) * (0.25 + 0.5 * mix);
            let vwap = vwap.clamp(low, high);
            let z = if vol > 0.0 { g.abs() / vol } else { 0.0 };
            let volume = base_volume * (0.3 * z + 0.2 * vn).exp();
            bars.push(PriceBar {
                stock_id: i as u32,
                day: j as u32,
                open,
                close,
                high,
                low,
                volume,
                vwap,
            });
            prev_close = close;
        }
    }
    Ok(bars)
}
