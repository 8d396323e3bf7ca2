//! Forward Monte Carlo evaluation of withdrawal/allocation controls.
//!
//! Paths are advanced date by date so that only one wealth vector is alive at
//! a time; percentile fans are reduced per date. All randomness comes from
//! `(seed, path, period)` substreams, so results do not depend on the number
//! of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{Policy, Scenario};
use crate::error::{Error, Result};
use crate::market::{MarketModel, PeriodReturn, PeriodSampler};
use crate::rng::Substreams;

/// Withdrawal and allocation rule applied along simulated paths.
pub trait ControlLaw: Sync {
    /// Withdrawal at date `date` given pre-withdrawal wealth.
    fn withdrawal(&self, date: usize, wealth: f64) -> f64;
    /// Equity fraction at date `date` given post-withdrawal wealth.
    fn allocation(&self, date: usize, wealth: f64) -> f64;
    /// Admissible withdrawal range.
    fn bounds(&self) -> (f64, f64);
    fn check(&self, _scenario: &Scenario) -> Result<()> {
        Ok(())
    }
}

impl ControlLaw for Policy {
    fn withdrawal(&self, date: usize, wealth: f64) -> f64 {
        Policy::withdrawal(self, date, wealth)
    }

    fn allocation(&self, date: usize, wealth: f64) -> f64 {
        Policy::allocation(self, date, wealth)
    }

    fn bounds(&self) -> (f64, f64) {
        (self.q_min, self.q_max)
    }

    fn check(&self, scenario: &Scenario) -> Result<()> {
        self.check_scenario(scenario)
    }
}

/// Constant withdrawal with annual rebalancing to a constant equity weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPolicy {
    pub equity: f64,
    pub withdrawal: f64,
}

impl FixedPolicy {
    pub fn new(equity: f64, withdrawal: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&equity) || !withdrawal.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "fixed policy needs equity in [0, 1] and finite withdrawal, got ({equity}, {withdrawal})"
            )));
        }
        Ok(Self { equity, withdrawal })
    }
}

impl ControlLaw for FixedPolicy {
    fn withdrawal(&self, _date: usize, _wealth: f64) -> f64 {
        self.withdrawal
    }

    fn allocation(&self, _date: usize, wealth: f64) -> f64 {
        if wealth > 0.0 {
            self.equity
        } else {
            0.0
        }
    }

    fn bounds(&self) -> (f64, f64) {
        (self.withdrawal, self.withdrawal)
    }
}

/// Source of one-period gross returns along each path.
pub trait ReturnSource: Sync {
    /// Per-path state carried from one period to the next.
    type State: Send + Sync + Clone;

    fn initial_state(&self, path: u64) -> Self::State;

    /// Gross returns over period `period` (from `t_period` to `t_period+1`).
    fn period_return(
        &self,
        path: u64,
        period: usize,
        state: &mut Self::State,
        insolvent: bool,
    ) -> PeriodReturn;
}

/// Returns drawn from the parametric jump-diffusion model.
#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    sampler: PeriodSampler,
    streams: Substreams,
}

impl SyntheticMarket {
    pub fn new(model: &MarketModel, dt: f64, seed: u64) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            sampler: PeriodSampler::new(model, dt),
            streams: Substreams::new(seed),
        })
    }
}

impl ReturnSource for SyntheticMarket {
    type State = ();

    fn initial_state(&self, _path: u64) {}

    fn period_return(
        &self,
        path: u64,
        period: usize,
        _state: &mut (),
        insolvent: bool,
    ) -> PeriodReturn {
        let mut rng = self.streams.at(path, period as u64);
        self.sampler.sample(&mut rng, insolvent)
    }
}

/// The state of every path at one withdrawal date.
#[derive(Debug, Clone, Copy)]
pub struct DateSlice<'a> {
    pub date: usize,
    /// Wealth before the withdrawal.
    pub wealth: &'a [f64],
    pub withdrawal: &'a [f64],
    /// Equity fraction chosen after the withdrawal (zero when insolvent).
    pub equity: &'a [f64],
    /// Whether post-withdrawal wealth is positive.
    pub solvent: &'a [bool],
}

/// Runs `n_paths` paths of `control` against `source`, handing each date's
/// cross-section to `visit`. Returns the terminal wealth after the final
/// withdrawal.
pub fn drive<C, R>(
    scenario: &Scenario,
    control: &C,
    source: &R,
    n_paths: usize,
    mut visit: impl FnMut(DateSlice<'_>),
) -> Result<Vec<f64>>
where
    C: ControlLaw + ?Sized,
    R: ReturnSource,
{
    scenario.validate()?;
    control.check(scenario)?;
    if n_paths == 0 {
        return Err(Error::InvalidParameter(
            "at least one path is required".into(),
        ));
    }
    let (q_lo, q_hi) = control.bounds();
    let m = scenario.rebalances;
    let mut wealth = vec![scenario.initial_wealth; n_paths];
    let mut states: Vec<R::State> = (0..n_paths as u64)
        .map(|k| source.initial_state(k))
        .collect();
    let mut withdrawal = vec![0.0; n_paths];
    let mut equity = vec![0.0; n_paths];
    let mut solvent = vec![false; n_paths];
    for n in 0..=m {
        withdrawal
            .par_iter_mut()
            .zip(equity.par_iter_mut())
            .zip(solvent.par_iter_mut())
            .zip(wealth.par_iter())
            .for_each(|(((q, p), ok), &w)| {
                *q = control.withdrawal(n, w).clamp(q_lo, q_hi);
                let after = w - *q;
                *ok = after > 0.0;
                *p = if *ok && n < m {
                    control.allocation(n, after).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            });
        visit(DateSlice {
            date: n,
            wealth: &wealth,
            withdrawal: &withdrawal,
            equity: &equity,
            solvent: &solvent,
        });
        wealth
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .enumerate()
            .zip(withdrawal.par_iter().zip(equity.par_iter()))
            .for_each(|((k, (w, state)), (&q, &p))| {
                let after = *w - q;
                *w = if n < m {
                    let r = source.period_return(k as u64, n, state, after <= 0.0);
                    after * p * r.stock_gross + after * (1.0 - p) * r.bond_gross
                } else {
                    after
                };
            });
    }
    if wealth.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("simulated wealth"));
    }
    Ok(wealth)
}

/// One simulated path, date by date.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub wealth: Vec<f64>,
    pub withdrawal: Vec<f64>,
    pub equity: Vec<f64>,
    pub terminal_wealth: f64,
}

/// Full per-path records; meant for small path counts.
pub fn simulate_paths<C, R>(
    scenario: &Scenario,
    control: &C,
    source: &R,
    n_paths: usize,
) -> Result<Vec<PathRecord>>
where
    C: ControlLaw + ?Sized,
    R: ReturnSource,
{
    let mut records = vec![
        PathRecord {
            wealth: Vec::new(),
            withdrawal: Vec::new(),
            equity: Vec::new(),
            terminal_wealth: 0.0,
        };
        n_paths
    ];
    let terminal = drive(scenario, control, source, n_paths, |slice| {
        for (k, rec) in records.iter_mut().enumerate() {
            rec.wealth.push(slice.wealth[k]);
            rec.withdrawal.push(slice.withdrawal[k]);
            rec.equity.push(slice.equity[k]);
        }
    })?;
    for (rec, w) in records.iter_mut().zip(terminal) {
        rec.terminal_wealth = w;
    }
    Ok(records)
}

/// 5th, 20th, 50th, 80th and 95th percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Bands {
    pub p5: f64,
    pub p20: f64,
    pub p50: f64,
    pub p80: f64,
    pub p95: f64,
}

impl Bands {
    pub const LEVELS: [f64; 5] = [0.05, 0.20, 0.50, 0.80, 0.95];

    /// Percentiles of `values` (reordered in place); zeros when empty.
    pub fn of(values: &mut [f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let [p5, p20, p50, p80, p95] = Self::LEVELS.map(|level| quantile(values, level));
        Self {
            p5,
            p20,
            p50,
            p80,
            p95,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.p5, self.p20, self.p50, self.p80, self.p95]
    }
}

/// Linearly interpolated sample quantile; reorders `values`.
pub fn quantile(values: &mut [f64], level: f64) -> f64 {
    let n = values.len();
    let pos = level.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let (_, &mut below, above) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let next = above.iter().copied().fold(f64::INFINITY, f64::min);
    if lo + 1 < n {
        below + (pos - lo as f64) * (next - below)
    } else {
        below
    }
}

/// Mean of the worst `α` fraction of `values`, weighting the boundary
/// observation fractionally so the tail mass is exactly `α N`.
pub fn expected_shortfall(values: &[f64], alpha: f64) -> Result<f64> {
    tail_statistics(values, alpha).map(|t| t.0)
}

/// `(ES, VaR)` where VaR is the boundary observation of the tail.
fn tail_statistics(values: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha {alpha} outside (0, 1)"
        )));
    }
    let mass = alpha * values.len() as f64;
    let whole = mass.floor() as usize;
    let count = (mass.ceil() as usize).max(1);
    let mut sorted = values.to_vec();
    if count < sorted.len() {
        sorted.select_nth_unstable_by(count - 1, f64::total_cmp);
        sorted.truncate(count);
    }
    sorted.sort_unstable_by(f64::total_cmp);
    let full: f64 = sorted[..whole.min(count)].iter().sum();
    let partial = if whole < count {
        (mass - whole as f64) * sorted[whole]
    } else {
        0.0
    };
    Ok(((full + partial) / mass, sorted[count - 1]))
}

/// Cross-sectional statistics of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub paths: usize,
    pub alpha: f64,
    /// `E[Σ q_i] / (M + 1)`.
    pub mean_withdrawal: f64,
    pub mean_withdrawal_se: f64,
    pub expected_shortfall: f64,
    pub expected_shortfall_se: f64,
    /// Empirical `α`-quantile of terminal wealth.
    pub value_at_risk: f64,
    pub median_terminal_wealth: f64,
    pub terminal_wealth: Bands,
    /// `Σ_{i<M} Median(p_i) / M`, medians over solvent paths.
    pub mean_median_equity: f64,
    /// Share of withdrawal decisions at either bound.
    pub bang_bang_fraction: f64,
    /// Per-date bands of wealth before withdrawal.
    pub wealth: Vec<Bands>,
    pub withdrawal: Vec<Bands>,
    /// Per-date bands of the equity fraction over solvent paths (no trading at `t_M`).
    pub equity: Vec<Bands>,
}

/// What a simulation keeps once each date has been reduced.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub rebalances: usize,
    pub terminal_wealth: Vec<f64>,
    pub total_withdrawal: Vec<f64>,
    pub wealth: Vec<Bands>,
    pub withdrawal: Vec<Bands>,
    pub equity: Vec<Bands>,
    pub median_equity: Vec<f64>,
    pub bound_decisions: usize,
    pub decisions: usize,
}

/// Runs a simulation and reduces every date on the fly.
pub fn collect<C, R>(
    scenario: &Scenario,
    control: &C,
    source: &R,
    n_paths: usize,
) -> Result<Ensemble>
where
    C: ControlLaw + ?Sized,
    R: ReturnSource,
{
    let (q_lo, q_hi) = control.bounds();
    let tol = 1e-9 * q_hi.abs().max(1.0);
    let m = scenario.rebalances;
    let mut total = vec![0.0; n_paths];
    let (mut wealth_bands, mut withdrawal_bands, mut equity_bands, mut median_equity) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut bound_decisions = 0;
    let mut scratch = Vec::with_capacity(n_paths);
    let terminal = drive(scenario, control, source, n_paths, |slice| {
        for (t, q) in total.iter_mut().zip(slice.withdrawal) {
            *t += q;
        }
        bound_decisions += slice
            .withdrawal
            .iter()
            .filter(|&&q| (q - q_lo).abs() <= tol || (q - q_hi).abs() <= tol)
            .count();
        scratch.clear();
        scratch.extend_from_slice(slice.wealth);
        wealth_bands.push(Bands::of(&mut scratch));
        scratch.clear();
        scratch.extend_from_slice(slice.withdrawal);
        withdrawal_bands.push(Bands::of(&mut scratch));
        scratch.clear();
        if slice.date < m {
            scratch.extend(
                slice
                    .equity
                    .iter()
                    .zip(slice.solvent)
                    .filter(|(_, &ok)| ok)
                    .map(|(p, _)| *p),
            );
        }
        let bands = Bands::of(&mut scratch);
        if slice.date < m {
            median_equity.push(bands.p50);
        }
        equity_bands.push(bands);
    })?;
    Ok(Ensemble {
        rebalances: m,
        terminal_wealth: terminal,
        total_withdrawal: total,
        wealth: wealth_bands,
        withdrawal: withdrawal_bands,
        equity: equity_bands,
        median_equity,
        bound_decisions,
        decisions: n_paths * (m + 1),
    })
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Reduces an ensemble to summary statistics at level `alpha`.
pub fn summarize(ensemble: &Ensemble, alpha: f64) -> Result<SummaryStats> {
    let n = ensemble.terminal_wealth.len();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let dates = (ensemble.rebalances + 1) as f64;
    let (es, var) = tail_statistics(&ensemble.terminal_wealth, alpha)?;
    let tail: Vec<f64> = ensemble
        .terminal_wealth
        .iter()
        .map(|w| (w - var).min(0.0))
        .collect();
    let (_, tail_se) = mean_and_se(&tail);
    let per_date: Vec<f64> = ensemble
        .total_withdrawal
        .iter()
        .map(|t| t / dates)
        .collect();
    let (ew, ew_se) = mean_and_se(&per_date);
    let mut terminal = ensemble.terminal_wealth.clone();
    let bands = Bands::of(&mut terminal);
    let mean_median_equity = if ensemble.median_equity.is_empty() {
        0.0
    } else {
        ensemble.median_equity.iter().sum::<f64>() / ensemble.median_equity.len() as f64
    };
    Ok(SummaryStats {
        paths: n,
        alpha,
        mean_withdrawal: ew,
        mean_withdrawal_se: ew_se,
        expected_shortfall: es,
        expected_shortfall_se: tail_se / alpha,
        value_at_risk: var,
        median_terminal_wealth: bands.p50,
        terminal_wealth: bands,
        mean_median_equity,
        bang_bang_fraction: ensemble.bound_decisions as f64 / ensemble.decisions as f64,
        wealth: ensemble.wealth.clone(),
        withdrawal: ensemble.withdrawal.clone(),
        equity: ensemble.equity.clone(),
    })
}

/// Simulates `control` in the parametric market and summarizes at the
/// scenario's `α`.
pub fn simulate<C>(
    model: &MarketModel,
    scenario: &Scenario,
    control: &C,
    n_paths: usize,
    seed: u64,
) -> Result<SummaryStats>
where
    C: ControlLaw + ?Sized,
{
    let market = SyntheticMarket::new(model, scenario.dt(), seed)?;
    summarize(
        &collect(scenario, control, &market, n_paths)?,
        scenario.alpha,
    )
}

/// Control tables on the policy's own wealth nodes, one column per date.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub times: Vec<f64>,
    pub wealth: Vec<f64>,
    /// `values[k][n]` at `wealth[k]` and date `n`.
    pub values: Vec<Vec<f64>>,
}

/// Equity fraction over post-withdrawal wealth and normalized withdrawal
/// `(q - q_min) / (q_max - q_min)` over pre-withdrawal wealth.
pub fn heatmap_export(policy: &Policy) -> (HeatMap, HeatMap) {
    let dt = policy.horizon / policy.rebalances as f64;
    let times: Vec<f64> = (0..policy.dates()).map(|n| n as f64 * dt).collect();
    let span = policy.q_max - policy.q_min;
    let norm = |q: f64| {
        if span > 0.0 {
            ((q - policy.q_min) / span).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };
    let equity_nodes = policy.allocation_nodes().to_vec();
    let equity = HeatMap {
        times: times.clone(),
        values: (0..equity_nodes.len())
            .map(|k| policy.allocations.iter().map(|t| t[k]).collect())
            .collect(),
        wealth: equity_nodes,
    };
    let q_nodes = policy.withdrawal_nodes();
    let withdrawal = HeatMap {
        times,
        values: (0..q_nodes.len())
            .map(|k| policy.withdrawals.iter().map(|t| norm(t[k])).collect())
            .collect(),
        wealth: q_nodes,
    };
    (equity, withdrawal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{AssetParams, JumpLaw};
    use crate::pide::GridConfig;
    use proptest::prelude::*;

    fn still_market() -> MarketModel {
        let flat = AssetParams {
            drift: 0.0,
            volatility: 0.0,
            jump: JumpLaw::none(),
        };
        MarketModel {
            stock: flat,
            bond: flat,
            correlation: 0.0,
            borrow_spread: 0.0,
        }
    }

    #[test]
    fn deterministic_accounting() {
        let sc = Scenario::default();
        let fixed = FixedPolicy::new(0.0, 40.0).unwrap();
        let market = SyntheticMarket::new(&still_market(), 1.0, 1).unwrap();
        let paths = simulate_paths(&sc, &fixed, &market, 3).unwrap();
        for p in &paths {
            assert!((p.terminal_wealth + 240.0).abs() < 1e-9);
            assert_eq!(p.withdrawal.len(), 31);
            assert!((p.wealth[1] - 960.0).abs() < 1e-12);
        }
        let stats = simulate(&still_market(), &sc, &fixed, 1, 1).unwrap();
        assert!((stats.mean_withdrawal - 40.0).abs() < 1e-12);
        assert!((stats.median_terminal_wealth + 240.0).abs() < 1e-9);
        assert_eq!(stats.bang_bang_fraction, 1.0);
    }

    #[test]
    fn debt_accrues_at_spread() {
        let mut model = still_market();
        model.borrow_spread = 0.02;
        let sc = Scenario::default();
        let fixed = FixedPolicy::new(0.5, 40.0).unwrap();
        let market = SyntheticMarket::new(&model, 1.0, 1).unwrap();
        let path = &simulate_paths(&sc, &fixed, &market, 1).unwrap()[0];
        // Solvent until wealth falls below 40: 1000 - 25 * 40 = 0 after date 24's withdrawal.
        assert!(path.equity[23] > 0.0 && path.equity[24] == 0.0);
        let mut w: f64 = 0.0;
        for _ in 25..=30 {
            w = w * 0.02f64.exp() - 40.0;
        }
        assert!(
            (path.terminal_wealth - w).abs() < 1e-9,
            "{} vs {w}",
            path.terminal_wealth
        );
    }

    #[test]
    fn shortfall_examples() {
        let twenty: Vec<f64> = (0..20).map(|k| k as f64 * 3.0 - 7.0).collect();
        assert_eq!(expected_shortfall(&twenty, 0.05).unwrap(), -7.0);
        assert_eq!(expected_shortfall(&[4.5; 37], 0.13).unwrap(), 4.5);
        assert!(matches!(
            expected_shortfall(&[], 0.05),
            Err(Error::EmptySample)
        ));
        // Fractional tail: 10 points, alpha 0.15 -> 1.5 observations.
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((expected_shortfall(&ten, 0.15).unwrap() - (1.0 + 0.5 * 2.0) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn shortfall_matches_selection_oracle() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = Substreams::new(5).path(0);
        let draws: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
        // Repeatedly pull out the minimum, without sorting.
        let mut pool = draws.clone();
        let mut worst = 0.0;
        for _ in 0..5 {
            let (k, v) =
                pool.iter().enumerate().fold(
                    (0, f64::INFINITY),
                    |a, (k, &v)| if v < a.1 { (k, v) } else { a },
                );
            worst += v;
            pool.swap_remove(k);
        }
        assert!((expected_shortfall(&draws, 0.05).unwrap() - worst / 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shortfall_below_quantile(values in proptest::collection::vec(-1e3f64..1e3, 1..300), alpha in 0.01f64..0.5) {
            let (es, var) = tail_statistics(&values, alpha).unwrap();
            let mut copy = values.clone();
            let q = quantile(&mut copy, alpha);
            prop_assert!(es <= var + 1e-9);
            prop_assert!(es <= q + 1e-9);
        }

        #[test]
        fn bands_are_nested(mut values in proptest::collection::vec(-1e3f64..1e3, 1..300)) {
            let b = Bands::of(&mut values).as_array();
            prop_assert!(b.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn quantile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&mut v, 0.5), 2.5);
        assert_eq!(quantile(&mut v, 0.0), 1.0);
        assert_eq!(quantile(&mut v, 1.0), 4.0);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let sc = Scenario::default();
        let fixed = FixedPolicy::new(0.4, 40.0).unwrap();
        let model = MarketModel::crsp_1926_2019();
        let a = simulate(&model, &sc, &fixed, 2000, 11).unwrap();
        let b = simulate(&model, &sc, &fixed, 2000, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate(&model, &sc, &fixed, 2000, 12).unwrap();
        assert_ne!(a.expected_shortfall, c.expected_shortfall);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let d = pool.install(|| simulate(&model, &sc, &fixed, 2000, 11).unwrap());
        assert_eq!(a, d);
    }

    #[test]
    fn path_prefix_is_stable() {
        let sc = Scenario::default();
        let fixed = FixedPolicy::new(0.6, 40.0).unwrap();
        let market = SyntheticMarket::new(&MarketModel::crsp_1926_2019(), 1.0, 3).unwrap();
        let few = simulate_paths(&sc, &fixed, &market, 5).unwrap();
        let more = simulate_paths(&sc, &fixed, &market, 50).unwrap();
        assert_eq!(few[..], more[..5]);
    }

    #[test]
    fn policy_mismatch_rejected() {
        let sc = Scenario {
            rebalances: 3,
            horizon: 3.0,
            ..Scenario::default()
        };
        let sol = crate::dp::solve_auxiliary(
            &MarketModel::crsp_1926_2019(),
            &sc,
            &GridConfig::square(64),
            200.0,
        )
        .unwrap();
        let err = simulate(
            &MarketModel::crsp_1926_2019(),
            &Scenario::default(),
            &sol.policy,
            10,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PolicyMismatch(_)));
    }

    #[test]
    fn heatmap_normalization() {
        let sc = Scenario {
            rebalances: 3,
            horizon: 3.0,
            ..Scenario::default()
        };
        let sol = crate::dp::solve_auxiliary(
            &MarketModel::crsp_1926_2019(),
            &sc,
            &GridConfig::square(64),
            200.0,
        )
        .unwrap();
        let (p, q) = heatmap_export(&sol.policy);
        assert_eq!(q.times, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(q.values.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.values.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        // Very rich investors withdraw the maximum.
        assert_eq!(*q.values.last().unwrap(), vec![1.0; 4]);

        let flat = Scenario {
            q_min: 40.0,
            q_max: 40.0,
            ..sc
        };
        let sol = crate::dp::solve_auxiliary(
            &MarketModel::crsp_1926_2019(),
            &flat,
            &GridConfig::square(64),
            200.0,
        )
        .unwrap();
        assert!(heatmap_export(&sol.policy)
            .1
            .values
            .iter()
            .flatten()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_policy_validation() {
        assert!(FixedPolicy::new(1.2, 40.0).is_err());
        assert!(FixedPolicy::new(0.5, f64::NAN).is_err());
    }
}
