//! Correlated stock/bond jump-diffusion market.
//!
//! Both assets follow a compensated double-exponential jump diffusion in real
//! terms. The diffusions are correlated; the two jump processes are independent
//! of each other and of the Brownian drivers. Log-returns over an interval are
//! therefore Lévy increments, which gives the joint characteristic function in
//! closed form and lets one period be sampled exactly.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Double-exponential law of the log jump multiplier `log ξ`, together with
/// the Poisson arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpLaw {
    /// Jumps per year.
    pub intensity: f64,
    /// Probability that a jump is upward.
    pub p_up: f64,
    /// Rate of the upward exponential tail; must exceed 1 for `E[ξ]` to exist.
    pub eta_up: f64,
    /// Rate of the downward exponential tail.
    pub eta_down: f64,
}

impl JumpLaw {
    pub fn none() -> Self {
        Self {
            intensity: 0.0,
            p_up: 0.5,
            eta_up: 2.0,
            eta_down: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity >= 0.0) || !self.intensity.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "jump intensity {} must be finite and non-negative",
                self.intensity
            )));
        }
        if !(0.0..=1.0).contains(&self.p_up) {
            return Err(Error::InvalidParameter(format!(
                "up-jump probability {} outside [0, 1]",
                self.p_up
            )));
        }
        if !(self.eta_up > 1.0) {
            return Err(Error::DivergentJumpMean(self.eta_up));
        }
        if !(self.eta_down > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "down-jump rate {} must be positive",
                self.eta_down
            )));
        }
        Ok(())
    }

    /// `κ = E[ξ - 1]`, the jump compensator.
    pub fn compensator(&self) -> Result<f64> {
        if !(self.eta_up > 1.0) {
            return Err(Error::DivergentJumpMean(self.eta_up));
        }
        Ok(self.mean_jump_excess())
    }

    fn mean_jump_excess(&self) -> f64 {
        self.p_up * self.eta_up / (self.eta_up - 1.0)
            + (1.0 - self.p_up) * self.eta_down / (self.eta_down + 1.0)
            - 1.0
    }

    /// Density of `y = log ξ`.
    pub fn log_density(&self, y: f64) -> f64 {
        if y >= 0.0 {
            self.p_up * self.eta_up * (-self.eta_up * y).exp()
        } else {
            (1.0 - self.p_up) * self.eta_down * (self.eta_down * y).exp()
        }
    }

    /// `E[exp(i u log ξ)]`.
    pub fn log_char_fn(&self, u: f64) -> Complex64 {
        let up = Complex64::new(self.p_up * self.eta_up, 0.0) / Complex64::new(self.eta_up, -u);
        let down = Complex64::new((1.0 - self.p_up) * self.eta_down, 0.0)
            / Complex64::new(self.eta_down, u);
        up + down
    }

    /// One draw of `log ξ`.
    pub fn sample_log_jump<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let branch: f64 = rng.random();
        // 1 - U lies in (0, 1], so the logarithm is finite.
        let tail = -(1.0 - rng.random::<f64>()).ln();
        if branch < self.p_up {
            tail / self.eta_up
        } else {
            -tail / self.eta_down
        }
    }
}

/// Drift, volatility and jump law of one asset (per year, real).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssetParams {
    pub drift: f64,
    pub volatility: f64,
    pub jump: JumpLaw,
}

impl AssetParams {
    pub fn validate(&self) -> Result<()> {
        if !self.drift.is_finite() {
            return Err(Error::InvalidParameter("drift must be finite".into()));
        }
        if !(self.volatility >= 0.0) || !self.volatility.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "volatility {} must be finite and non-negative",
                self.volatility
            )));
        }
        self.jump.validate()
    }

    /// Mean of the log-return per unit time, `μ - λκ - σ²/2 (+ spread)`.
    pub fn log_drift(&self, spread: f64) -> f64 {
        self.drift + spread
            - self.jump.intensity * self.jump.mean_jump_excess()
            - 0.5 * self.volatility * self.volatility
    }

    /// Log of the compound-Poisson characteristic function over `dt`.
    fn jump_exponent(&self, u: f64, dt: f64) -> Complex64 {
        if self.jump.intensity == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        (self.jump.log_char_fn(u) - 1.0) * (self.jump.intensity * dt)
    }
}

/// The two-asset market plus the borrowing spread charged on negative wealth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketModel {
    pub stock: AssetParams,
    pub bond: AssetParams,
    /// Correlation of the two Brownian drivers.
    pub correlation: f64,
    /// Extra drift applied to the bond process while wealth is negative.
    pub borrow_spread: f64,
}

/// Gross multiplicative returns of both assets over one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodReturn {
    pub stock_gross: f64,
    pub bond_gross: f64,
}

impl Default for MarketModel {
    fn default() -> Self {
        Self::crsp_1926_2019()
    }
}

impl MarketModel {
    /// Fitted real CRSP value-weighted index / 10-year Treasury parameters
    /// (sample 1926:1 to 2019:12) with zero borrowing spread.
    pub fn crsp_1926_2019() -> Self {
        Self {
            stock: AssetParams {
                drift: 0.0877,
                volatility: 0.1459,
                jump: JumpLaw {
                    intensity: 0.3191,
                    p_up: 0.2333,
                    eta_up: 4.3608,
                    eta_down: 5.504,
                },
            },
            bond: AssetParams {
                drift: 0.0239,
                volatility: 0.0538,
                jump: JumpLaw {
                    intensity: 0.3830,
                    p_up: 0.6111,
                    eta_up: 16.19,
                    eta_down: 17.27,
                },
            },
            correlation: 0.04554,
            borrow_spread: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stock.validate()?;
        self.bond.validate()?;
        if !(self.correlation.abs() <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "correlation {} outside [-1, 1]",
                self.correlation
            )));
        }
        if !(self.borrow_spread >= 0.0) || !self.borrow_spread.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "borrowing spread {} must be finite and non-negative",
                self.borrow_spread
            )));
        }
        Ok(())
    }

    /// `E[exp(i u_s X_s + i u_b X_b)]` for the joint log-returns over `dt`.
    /// With `with_spread` the bond drift carries the borrowing spread.
    pub fn joint_char_fn(&self, u_s: f64, u_b: f64, dt: f64, with_spread: bool) -> Complex64 {
        let spread = if with_spread { self.borrow_spread } else { 0.0 };
        let (ss, sb) = (self.stock.volatility, self.bond.volatility);
        let mean = u_s * self.stock.log_drift(0.0) + u_b * self.bond.log_drift(spread);
        let var = ss * ss * u_s * u_s
            + 2.0 * self.correlation * ss * sb * u_s * u_b
            + sb * sb * u_b * u_b;
        let exponent = Complex64::new(-0.5 * var * dt, mean * dt)
            + self.stock.jump_exponent(u_s, dt)
            + self.bond.jump_exponent(u_b, dt);
        exponent.exp()
    }

    /// One exact draw of the period gross returns.
    pub fn sample_period_return<R: Rng + ?Sized>(
        &self,
        dt: f64,
        insolvent: bool,
        rng: &mut R,
    ) -> PeriodReturn {
        PeriodSampler::new(self, dt).sample(rng, insolvent)
    }
}

/// Precomputed one-period sampler for a fixed model and interval.
#[derive(Debug, Clone)]
pub struct PeriodSampler {
    stock: AssetStep,
    bond: AssetStep,
    bond_spread_drift: f64,
    correlation: f64,
    orthogonal: f64,
}

#[derive(Debug, Clone)]
struct AssetStep {
    drift: f64,
    scale: f64,
    jumps: Option<Poisson<f64>>,
    law: JumpLaw,
}

impl AssetStep {
    fn new(asset: &AssetParams, dt: f64, spread: f64) -> Self {
        let mean = asset.jump.intensity * dt;
        Self {
            drift: asset.log_drift(spread) * dt,
            scale: asset.volatility * dt.sqrt(),
            jumps: (mean > 0.0).then(|| Poisson::new(mean).expect("positive Poisson mean")),
            law: asset.jump,
        }
    }

    fn log_return<R: Rng + ?Sized>(&self, rng: &mut R, z: f64, drift: f64) -> f64 {
        let mut x = drift + self.scale * z;
        if let Some(poisson) = &self.jumps {
            let count = poisson.sample(rng) as u64;
            for _ in 0..count {
                x += self.law.sample_log_jump(rng);
            }
        }
        x
    }
}

impl PeriodSampler {
    pub fn new(model: &MarketModel, dt: f64) -> Self {
        let bond = AssetStep::new(&model.bond, dt, 0.0);
        let rho = model.correlation.clamp(-1.0, 1.0);
        Self {
            stock: AssetStep::new(&model.stock, dt, 0.0),
            bond_spread_drift: bond.drift + model.borrow_spread * dt,
            bond,
            correlation: rho,
            orthogonal: (1.0 - rho * rho).max(0.0).sqrt(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, insolvent: bool) -> PeriodReturn {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let zb = self.correlation * z1 + self.orthogonal * z2;
        let xs = self.stock.log_return(rng, z1, self.stock.drift);
        let bond_drift = if insolvent {
            self.bond_spread_drift
        } else {
            self.bond.drift
        };
        let xb = self.bond.log_return(rng, zb, bond_drift);
        PeriodReturn {
            stock_gross: xs.exp(),
            bond_gross: xb.exp(),
        }
    }
}
