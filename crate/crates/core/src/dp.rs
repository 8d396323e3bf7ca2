//! Dynamic programming for the expected-withdrawals / expected-shortfall
//! problem with `W*` frozen after time zero.
//!
//! For a fixed `W*` the auxiliary value `V(s, b, W*, t)` is advanced backwards:
//! the terminal payoff at `T^+`, the rebalancing operator at every date
//! (exhaustive search over a discrete `q` set and a discrete `p` grid), and
//! Fourier propagation across each no-trading interval. The outer problem
//! maximises `V(0, W0, W*, 0^-)` over `W*`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::pide::{
    build_grids, build_kernel, propagate, safe_ln, GridConfig, GridSpec, LogAxis, TransitionKernel,
    ValueSurface,
};

/// Relative margin a candidate must beat the incumbent by; smaller gains count
/// as ties, which resolve toward the smaller control.
const TIE_TOLERANCE: f64 = 1e-12;

/// Investment and preference inputs of one decumulation problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Horizon `T` in years.
    pub horizon: f64,
    /// Number of rebalancing intervals `M`; withdrawals happen at `M + 1` dates.
    pub rebalances: usize,
    /// Initial wealth `W0`, held as cash (bonds) at inception.
    pub initial_wealth: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Expected-shortfall level.
    pub alpha: f64,
    /// Scalarization weight on expected shortfall.
    pub kappa: f64,
    /// Weight of the `ε W_T` stabilization term.
    pub epsilon: f64,
    /// Real discount rate applied to withdrawals in the objective.
    pub discount: f64,
    /// Spacing of the discrete withdrawal controls.
    pub q_step: f64,
    /// Number of discrete allocation controls; zero means "use `n_y`".
    pub p_count: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            horizon: 30.0,
            rebalances: 30,
            initial_wealth: 1000.0,
            q_min: 35.0,
            q_max: 60.0,
            alpha: 0.05,
            kappa: 1.0,
            epsilon: 1e-6,
            discount: 0.0,
            q_step: 1.0,
            p_count: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.horizon > 0.0) {
            return bad(format!("horizon {} must be positive", self.horizon));
        }
        if self.rebalances < 1 {
            return bad("at least one rebalancing interval is required".into());
        }
        if !(self.q_min <= self.q_max) || !self.q_min.is_finite() || !self.q_max.is_finite() {
            return bad(format!(
                "withdrawal bounds [{}, {}] are not ordered",
                self.q_min, self.q_max
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return bad(format!(
                "kappa {} must be finite and non-negative",
                self.kappa
            ));
        }
        if !self.epsilon.is_finite() || !self.discount.is_finite() {
            return bad("epsilon and discount must be finite".into());
        }
        if !(self.q_step > 0.0) {
            return bad(format!("withdrawal step {} must be positive", self.q_step));
        }
        if !self.initial_wealth.is_finite() {
            return bad("initial wealth must be finite".into());
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.rebalances as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    /// `q_min, q_min + step, ...`, always ending exactly at `q_max`.
    pub fn withdrawal_candidates(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let q = self.q_min + k as f64 * self.q_step;
            if q >= self.q_max - 1e-9 * self.q_step {
                break;
            }
            out.push(q);
            k += 1;
        }
        out.push(self.q_max);
        out
    }

    fn discount_factor(&self, n: usize) -> f64 {
        (-self.discount * self.time(n)).exp()
    }
}

/// `κ (W* + min(w - W*, 0) / α) + ε w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalPayoff {
    pub kappa: f64,
    pub alpha: f64,
    pub w_star: f64,
    pub epsilon: f64,
}

impl TerminalPayoff {
    pub fn new(scenario: &Scenario, w_star: f64) -> Self {
        Self {
            kappa: scenario.kappa,
            alpha: scenario.alpha,
            w_star,
            epsilon: scenario.epsilon,
        }
    }

    #[inline]
    pub fn eval(&self, w: f64) -> f64 {
        self.kappa * (self.w_star + (w - self.w_star).min(0.0) / self.alpha) + self.epsilon * w
    }
}

/// The terminal value surface at `T^+` on both the solvent and debt grids.
pub fn terminal_values(grid: &GridSpec, w_star: f64, scenario: &Scenario) -> ValueSurface {
    let payoff = TerminalPayoff::new(scenario, w_star);
    grid.tabulate(
        w_star,
        scenario.horizon,
        |s, b| payoff.eval(s + b),
        |bp| payoff.eval(-bp),
    )
}

/// Wealth nodes for withdrawal controls: the negated debt nodes (descending
/// in size) followed by the bond-axis nodes, ascending overall.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthAxis {
    debt: LogAxis,
    credit: LogAxis,
}

impl WealthAxis {
    pub fn new(grid: &GridSpec) -> Self {
        Self {
            debt: grid.debt.clone(),
            credit: grid.y.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.debt.len() + self.credit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> Vec<f64> {
        self.debt
            .values()
            .iter()
            .rev()
            .map(|v| -v)
            .chain(self.credit.values().iter().copied())
            .collect()
    }

    /// Index of the lower node and linear weight of the upper one.
    #[inline]
    pub fn locate(&self, w: f64) -> (usize, f64) {
        let nd = self.debt.len();
        let lo_credit = self.credit.values()[0];
        let lo_debt = self.debt.values()[0];
        if w >= lo_credit {
            let (k, t) = self.credit.locate(w, w.ln());
            (nd + k, t)
        } else if w <= -lo_debt {
            let (k, t) = self.debt.locate(-w, (-w).ln());
            (nd - 2 - k, 1.0 - t)
        } else {
            (nd - 1, (w + lo_debt) / (lo_credit + lo_debt))
        }
    }
}

#[inline]
fn lerp(table: &[f64], (k, t): (usize, f64)) -> f64 {
    if t == 0.0 {
        table[k]
    } else {
        table[k] + t * (table[k + 1] - table[k])
    }
}

/// Optimal withdrawal and allocation tables for every date, for one `W*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub w_star: f64,
    pub horizon: f64,
    pub rebalances: usize,
    pub q_min: f64,
    pub q_max: f64,
    pub grid: GridConfig,
    /// `withdrawals[n][k]` is `q_n` at pre-withdrawal wealth `withdrawal_nodes[k]`.
    pub withdrawals: Vec<Vec<f64>>,
    /// `allocations[n][k]` is `p_n` at post-withdrawal wealth `allocation_nodes[k]`.
    pub allocations: Vec<Vec<f64>>,
    withdrawal_axis: WealthAxis,
    allocation_axis: LogAxis,
}

impl Policy {
    /// Assembles a policy, checking table shapes against the grid.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_star: f64,
        horizon: f64,
        rebalances: usize,
        q_min: f64,
        q_max: f64,
        grid: GridConfig,
        withdrawals: Vec<Vec<f64>>,
        allocations: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let spec = build_grids(&grid)?;
        let axis = WealthAxis::new(&spec);
        let dates = rebalances + 1;
        if withdrawals.len() != dates || allocations.len() != dates {
            return Err(Error::PolicyMismatch(format!(
                "expected {dates} dated tables, found {} withdrawal and {} allocation tables",
                withdrawals.len(),
                allocations.len()
            )));
        }
        if withdrawals.iter().any(|t| t.len() != axis.len())
            || allocations.iter().any(|t| t.len() != spec.y.len())
        {
            return Err(Error::PolicyMismatch(
                "control table length differs from grid".into(),
            ));
        }
        Ok(Self {
            w_star,
            horizon,
            rebalances,
            q_min,
            q_max,
            grid: spec.config,
            withdrawals,
            allocations,
            withdrawal_axis: axis,
            allocation_axis: spec.y,
        })
    }

    pub fn withdrawal_nodes(&self) -> Vec<f64> {
        self.withdrawal_axis.nodes()
    }

    pub fn allocation_nodes(&self) -> &[f64] {
        self.allocation_axis.values()
    }

    pub fn dates(&self) -> usize {
        self.rebalances + 1
    }

    /// Withdrawal at date `n` for pre-withdrawal wealth `w`, interpolated and
    /// clamped to the admissible bounds.
    pub fn withdrawal(&self, n: usize, w: f64) -> f64 {
        lerp(&self.withdrawals[n], self.withdrawal_axis.locate(w)).clamp(self.q_min, self.q_max)
    }

    /// Equity fraction at date `n` for post-withdrawal wealth `w`.
    pub fn allocation(&self, n: usize, w: f64) -> f64 {
        if w <= 0.0 || n >= self.rebalances {
            return 0.0;
        }
        lerp(&self.allocations[n], self.allocation_axis.locate(w, w.ln())).clamp(0.0, 1.0)
    }

    pub fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        if self.rebalances != scenario.rebalances || (self.horizon - scenario.horizon).abs() > 1e-9
        {
            return Err(Error::PolicyMismatch(format!(
                "policy covers {} intervals over {} years, scenario {} over {}",
                self.rebalances, self.horizon, scenario.rebalances, scenario.horizon
            )));
        }
        if self.q_min != scenario.q_min || self.q_max != scenario.q_max {
            return Err(Error::PolicyMismatch(format!(
                "policy withdraws within [{}, {}], scenario within [{}, {}]",
                self.q_min, self.q_max, scenario.q_min, scenario.q_max
            )));
        }
        Ok(())
    }
}

/// Expected withdrawals and expected shortfall implied by the solver's own
/// expectation operator under the computed controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeStatistics {
    /// `E[Σ q_i] / (M + 1)`.
    pub mean_withdrawal: f64,
    /// `W* + E[min(W_T - W*, 0)] / α`, which equals ES at the optimal `W*`.
    pub expected_shortfall: f64,
}

#[derive(Debug, Clone)]
pub struct AuxiliarySolution {
    pub w_star: f64,
    /// `V(0, W0, W*, 0^-)`.
    pub value: f64,
    pub policy: Policy,
    pub statistics: Option<PdeStatistics>,
    /// Value surface at `0^-`.
    pub surface: ValueSurface,
}

/// What lies on the far side of a rebalance: a propagated surface, or the
/// terminal payoff itself at the last date.
#[derive(Clone, Copy)]
enum Continuation<'a> {
    Surface(&'a ValueSurface),
    Payoff(TerminalPayoff),
    Zero,
}

/// Discrete allocation control `p` with its logarithms.
#[derive(Debug, Clone, Copy)]
struct AllocationChoice {
    p: f64,
    ln_p: f64,
    ln_q: f64,
}

/// Solver for the auxiliary problem on one grid; reusable across `W*`.
pub struct AuxiliarySolver {
    model: MarketModel,
    scenario: Scenario,
    grid: GridSpec,
    kernel: TransitionKernel,
    wealth: WealthAxis,
    allocations: Vec<AllocationChoice>,
    withdrawals: Vec<f64>,
}

/// Controls and value at one date.
pub struct Rebalanced {
    pub surface: ValueSurface,
    pub tracked: Vec<ValueSurface>,
    pub withdrawals: Vec<f64>,
    pub allocations: Vec<f64>,
}

impl AuxiliarySolver {
    pub fn new(model: &MarketModel, scenario: &Scenario, grid: &GridConfig) -> Result<Self> {
        model.validate()?;
        scenario.validate()?;
        let grid = build_grids(grid)?;
        let w0 = scenario.initial_wealth;
        if !(w0 > grid.y.values()[0] && w0 < grid.y.values()[grid.y.len() - 1]) {
            return Err(Error::WealthOutsideGrid {
                wealth: w0,
                min: grid.y.values()[0],
                max: grid.y.values()[grid.y.len() - 1],
            });
        }
        let kernel = build_kernel(model, &grid, scenario.dt())?;
        let count = if scenario.p_count == 0 {
            grid.y.len()
        } else {
            scenario.p_count
        };
        if count < 2 {
            return Err(Error::InvalidParameter(
                "need at least two allocation controls".into(),
            ));
        }
        let allocations = (0..count)
            .map(|k| {
                let p = k as f64 / (count - 1) as f64;
                AllocationChoice {
                    p,
                    ln_p: safe_ln(p),
                    ln_q: safe_ln(1.0 - p),
                }
            })
            .collect();
        Ok(Self {
            model: *model,
            scenario: *scenario,
            wealth: WealthAxis::new(&grid),
            withdrawals: scenario.withdrawal_candidates(),
            grid,
            kernel,
            allocations,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    /// Value of `next` at post-withdrawal wealth `w` split with equity fraction `p`.
    #[inline]
    fn continuation(
        &self,
        next: Continuation<'_>,
        w: f64,
        ln_w: f64,
        p: f64,
        ln_p: f64,
        ln_q: f64,
    ) -> f64 {
        match next {
            Continuation::Zero => 0.0,
            Continuation::Payoff(f) => f.eval(w),
            Continuation::Surface(v) => {
                if w <= 0.0 {
                    self.grid.debt_value(v, -w)
                } else {
                    self.grid
                        .solvent_value_ln(v, w * p, ln_w + ln_p, w * (1.0 - p), ln_w + ln_q)
                }
            }
        }
    }

    /// Best allocation for post-withdrawal wealth `w`; ties go to the smaller `p`.
    pub fn optimize_allocation(&self, surface: &ValueSurface, w: f64) -> (f64, f64) {
        let next = Continuation::Surface(surface);
        if w <= 0.0 {
            return (0.0, self.continuation(next, w, 0.0, 0.0, 0.0, 0.0));
        }
        let ln_w = w.ln();
        let mut best = (0.0, f64::NEG_INFINITY);
        for c in &self.allocations {
            let v = self.continuation(next, w, ln_w, c.p, c.ln_p, c.ln_q);
            if v > best.1 + TIE_TOLERANCE * best.1.abs().max(1.0) || best.1 == f64::NEG_INFINITY {
                best = (c.p, v);
            }
        }
        best
    }

    /// Value of `next` after withdrawing to `w`, with `p` read from the table.
    #[inline]
    fn value_after(&self, next: Continuation<'_>, p_table: &[f64], w: f64) -> f64 {
        match next {
            Continuation::Surface(_) if w > 0.0 => {
                let ln_w = w.ln();
                let p = lerp(p_table, self.grid.y.locate(w, ln_w));
                self.continuation(next, w, ln_w, p, safe_ln(p), safe_ln(1.0 - p))
            }
            _ => self.continuation(next, w, 0.0, 0.0, 0.0, 0.0),
        }
    }

    /// Best withdrawal at pre-withdrawal wealth `w` given the allocation table
    /// for date `n`; ties go to the smaller `q`.
    fn best_withdrawal(
        &self,
        n: usize,
        next: Continuation<'_>,
        p_table: &[f64],
        w: f64,
    ) -> (f64, f64) {
        let disc = self.scenario.discount_factor(n);
        let mut best = (self.withdrawals[0], f64::NEG_INFINITY);
        for &q in &self.withdrawals {
            let v = disc * q + self.value_after(next, p_table, w - q);
            if v > best.1 + TIE_TOLERANCE * best.1.abs().max(1.0) || best.1 == f64::NEG_INFINITY {
                best = (q, v);
            }
        }
        best
    }

    /// Best withdrawal against an arbitrary continuation surface (date `n < M`).
    pub fn optimize_withdrawal(
        &self,
        n: usize,
        surface: &ValueSurface,
        p_table: &[f64],
        w: f64,
    ) -> (f64, f64) {
        self.best_withdrawal(n, Continuation::Surface(surface), p_table, w)
    }

    /// Best withdrawal at the final date, where the continuation is the terminal payoff.
    pub fn optimize_final_withdrawal(&self, w_star: f64, w: f64) -> (f64, f64) {
        let payoff = TerminalPayoff::new(&self.scenario, w_star);
        self.best_withdrawal(
            self.scenario.rebalances,
            Continuation::Payoff(payoff),
            &[],
            w,
        )
    }

    fn allocation_table(&self, next: Continuation<'_>) -> Vec<f64> {
        match next {
            Continuation::Surface(v) => self
                .grid
                .y
                .values()
                .par_iter()
                .map(|&w| self.optimize_allocation(v, w).0)
                .collect(),
            _ => vec![0.0; self.grid.y.len()],
        }
    }

    /// Applies the rebalancing operator at date `n` to `next` (the value at
    /// `t_n^+`), transporting the `tracked` surfaces under the same controls.
    /// `tracked_weights[k]` multiplies the withdrawal credited to tracked
    /// surface `k`.
    fn rebalance(
        &self,
        n: usize,
        w_star: f64,
        next: Continuation<'_>,
        tracked: &[(Continuation<'_>, f64)],
    ) -> Rebalanced {
        let p_table = self.allocation_table(next);
        let q_table: Vec<f64> = self
            .wealth
            .nodes()
            .par_iter()
            .map(|&w| self.best_withdrawal(n, next, &p_table, w).0)
            .collect();
        let disc = self.scenario.discount_factor(n);
        let time = self.scenario.time(n);

        // Value at pre-withdrawal wealth w for the primary and tracked surfaces.
        let advance = |w: f64, out: &mut [f64]| {
            let q = lerp(&q_table, self.wealth.locate(w));
            let w_plus = w - q;
            out[0] = disc * q + self.value_after(next, &p_table, w_plus);
            for (k, &(cont, weight)) in tracked.iter().enumerate() {
                out[k + 1] = weight * q + self.value_after(cont, &p_table, w_plus);
            }
        };

        let width = 1 + tracked.len();
        let n_y = self.grid.y.len();
        let mut surfaces: Vec<ValueSurface> = (0..width)
            .map(|_| self.grid.zero_surface(w_star, time))
            .collect();
        let rows: Vec<Vec<f64>> = self
            .grid
            .x
            .values()
            .par_iter()
            .map(|&s| {
                let mut row = vec![0.0; n_y * width];
                for (j, &b) in self.grid.y.values().iter().enumerate() {
                    advance(s + b, &mut row[j * width..(j + 1) * width]);
                }
                row
            })
            .collect();
        for (i, row) in rows.iter().enumerate() {
            for j in 0..n_y {
                for (k, surface) in surfaces.iter_mut().enumerate() {
                    surface.solvent[i * n_y + j] = row[j * width + k];
                }
            }
        }
        let mut cell = vec![0.0; width];
        for (j, &bp) in self.grid.debt.values().iter().enumerate() {
            advance(-bp, &mut cell);
            for (k, surface) in surfaces.iter_mut().enumerate() {
                surface.debt[j] = cell[k];
            }
        }
        let surface = surfaces.remove(0);
        Rebalanced {
            surface,
            tracked: surfaces,
            withdrawals: q_table,
            allocations: p_table,
        }
    }

    /// Rebalancing operator at date `n` for a surface given at `t_n^+`
    /// (`n < M`), returning the value at `t_n^-` and the date's controls.
    pub fn apply_rebalance(&self, n: usize, surface: &ValueSurface) -> Rebalanced {
        self.rebalance(n, surface.w_star, Continuation::Surface(surface), &[])
    }

    /// Value at pre-withdrawal wealth `w` implied by one date's controls, with
    /// the withdrawal credited at `weight`.
    fn value_at_wealth(
        &self,
        weight: f64,
        next: Continuation<'_>,
        step: &Rebalanced,
        w: f64,
    ) -> f64 {
        let q = lerp(&step.withdrawals, self.wealth.locate(w));
        weight * q + self.value_after(next, &step.allocations, w - q)
    }

    /// Full backward sweep for one `W*`. With `track_statistics` the expected
    /// withdrawals and the shortfall term are propagated alongside `V`.
    pub fn solve(&self, w_star: f64, track_statistics: bool) -> Result<AuxiliarySolution> {
        let sc = &self.scenario;
        let m = sc.rebalances;
        let payoff = TerminalPayoff::new(sc, w_star);
        let risk = TerminalPayoff {
            kappa: 1.0,
            epsilon: 0.0,
            ..payoff
        };
        let mut q_tables = vec![Vec::new(); m + 1];
        let mut p_tables = vec![Vec::new(); m + 1];

        let terminal_tracked = [(Continuation::Zero, 1.0), (Continuation::Payoff(risk), 0.0)];
        let tracked_now: &[(Continuation<'_>, f64)] = if track_statistics {
            &terminal_tracked
        } else {
            &[]
        };
        let mut step = self.rebalance(m, w_star, Continuation::Payoff(payoff), tracked_now);
        let mut value = 0.0;
        let mut stats = None;
        for n in (0..=m).rev() {
            q_tables[n] = std::mem::take(&mut step.withdrawals);
            p_tables[n] = std::mem::take(&mut step.allocations);
            if n == 0 {
                break;
            }
            let v_plus = propagate(&step.surface, &self.kernel)?;
            let tracked_plus = step
                .tracked
                .iter()
                .map(|t| propagate(t, &self.kernel))
                .collect::<Result<Vec<_>>>()?;
            let conts: Vec<(Continuation<'_>, f64)> = tracked_plus
                .iter()
                .zip([1.0, 0.0])
                .map(|(t, w)| (Continuation::Surface(t), w))
                .collect();
            if n == 1 {
                // The value at W0 comes straight from the date-0 controls rather
                // than from a grid node.
                let next = self.rebalance(0, w_star, Continuation::Surface(&v_plus), &conts);
                let w0 = sc.initial_wealth;
                value = self.value_at_wealth(
                    sc.discount_factor(0),
                    Continuation::Surface(&v_plus),
                    &next,
                    w0,
                );
                if track_statistics {
                    let total = self.value_at_wealth(1.0, conts[0].0, &next, w0);
                    stats = Some(PdeStatistics {
                        mean_withdrawal: total / (m + 1) as f64,
                        expected_shortfall: self.value_at_wealth(0.0, conts[1].0, &next, w0),
                    });
                }
                step = next;
            } else {
                step = self.rebalance(n - 1, w_star, Continuation::Surface(&v_plus), &conts);
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("auxiliary value"));
        }
        let policy = Policy::new(
            w_star,
            sc.horizon,
            m,
            sc.q_min,
            sc.q_max,
            self.grid.config,
            q_tables,
            p_tables,
        )?;
        Ok(AuxiliarySolution {
            w_star,
            value,
            policy,
            statistics: stats,
            surface: step.surface,
        })
    }
}

/// Solves the auxiliary problem for one `W*` on one grid.
pub fn solve_auxiliary(
    model: &MarketModel,
    scenario: &Scenario,
    grid: &GridConfig,
    w_star: f64,
) -> Result<AuxiliarySolution> {
    AuxiliarySolver::new(model, scenario, grid)?.solve(w_star, true)
}

/// Settings of the outer `W*` search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WStarSearch {
    pub scan_min: f64,
    pub scan_max: f64,
    pub scan_step: f64,
    /// Absolute tolerance of the golden-section refinement.
    pub tolerance: f64,
}

impl Default for WStarSearch {
    fn default() -> Self {
        Self {
            scan_min: -500.0,
            scan_max: 1500.0,
            scan_step: 25.0,
            tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimum {
    pub w_star: f64,
    /// `J(0, W0, 0^-)` on the finest grid.
    pub value: f64,
    pub policy: Policy,
    pub statistics: PdeStatistics,
    /// Coarse-grid `(W', V)` pairs from the exhaustive scan.
    pub scan: Vec<(f64, f64)>,
}

/// Maximises `f` on `[lo, hi]` by golden-section search to width `tol`.
pub fn golden_section_max(
    mut f: impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

/// Outer maximisation over `W*`: exhaustive scan on the first grid of
/// `ladder`, then golden-section refinement on each finer grid.
pub fn optimize_wstar(
    model: &MarketModel,
    scenario: &Scenario,
    ladder: &[GridConfig],
    search: &WStarSearch,
) -> Result<Optimum> {
    let first = ladder
        .first()
        .ok_or_else(|| Error::InvalidGrid("grid ladder is empty".into()))?;
    if !(search.scan_step > 0.0)
        || !(search.scan_max > search.scan_min)
        || !(search.tolerance > 0.0)
    {
        return Err(Error::InvalidParameter(
            "W* scan range, step and tolerance must be positive".into(),
        ));
    }
    let coarse = AuxiliarySolver::new(model, scenario, first)?;
    let count = ((search.scan_max - search.scan_min) / search.scan_step).round() as usize + 1;
    let candidates: Vec<f64> = (0..count)
        .map(|k| search.scan_min + k as f64 * search.scan_step)
        .collect();
    let scan = candidates
        .par_iter()
        .map(|&w| coarse.solve(w, false).map(|s| (w, s.value)))
        .collect::<Result<Vec<_>>>()?;
    let best = scan
        .iter()
        .enumerate()
        .fold(0, |best, (k, v)| if v.1 > scan[best].1 { k } else { best });
    if best == 0 || best == count - 1 {
        return Err(Error::ScanBoundary(scan[best].0));
    }
    log::info!(
        "coarse W* scan on {}x{}: W* = {}",
        first.n_x,
        first.n_y,
        scan[best].0
    );

    let refine: &[GridConfig] = if ladder.len() > 1 {
        &ladder[1..]
    } else {
        &ladder[..1]
    };
    let mut seed = scan[best].0;
    let mut half = search.scan_step;
    let mut refined = None;
    for cfg in refine {
        let solver = AuxiliarySolver::new(model, scenario, cfg)?;
        seed = refine_on(&solver, seed, half, search.tolerance)?;
        log::info!("refined W* on {}x{}: {seed:.3}", cfg.n_x, cfg.n_y);
        half = (0.4 * half).max(4.0 * search.tolerance);
        refined = Some(solver);
    }
    let solver = refined.expect("refinement ladder is never empty");
    finish(&solver, seed, scan)
}

/// Refines a previously located `W*` on a single finer grid, searching
/// `seed ± half` and re-bracketing if the maximum sits on an edge.
pub fn refine_wstar(
    model: &MarketModel,
    scenario: &Scenario,
    grid: &GridConfig,
    seed: f64,
    half: f64,
    tolerance: f64,
) -> Result<Optimum> {
    if !(half > 0.0) || !(tolerance > 0.0) {
        return Err(Error::InvalidParameter(
            "refinement bracket and tolerance must be positive".into(),
        ));
    }
    let solver = AuxiliarySolver::new(model, scenario, grid)?;
    let w = refine_on(&solver, seed, half, tolerance)?;
    log::info!("refined W* on {}x{}: {w:.3}", grid.n_x, grid.n_y);
    finish(&solver, w, Vec::new())
}

fn refine_on(solver: &AuxiliarySolver, mut seed: f64, half: f64, tolerance: f64) -> Result<f64> {
    let mut lo = seed - half;
    let mut hi = seed + half;
    for _ in 0..8 {
        let (w, _) = golden_section_max(
            |w| solver.solve(w, false).map(|s| s.value),
            lo,
            hi,
            tolerance,
        )?;
        seed = w;
        let edge = 2.0 * tolerance;
        if w - lo < edge {
            (lo, hi) = (w - 2.0 * half, w + 0.5 * half);
        } else if hi - w < edge {
            (lo, hi) = (w - 0.5 * half, w + 2.0 * half);
        } else {
            break;
        }
    }
    Ok(seed)
}

fn finish(solver: &AuxiliarySolver, w_star: f64, scan: Vec<(f64, f64)>) -> Result<Optimum> {
    let solution = solver.solve(w_star, true)?;
    Ok(Optimum {
        w_star,
        value: solution.value,
        policy: solution.policy,
        statistics: solution.statistics.expect("statistics were tracked"),
        scan,
    })
}

const POLICY_MAGIC: &[u8; 8] = b"DDPOLICY";
const POLICY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    w_star: f64,
    horizon: f64,
    rebalances: usize,
    q_min: f64,
    q_max: f64,
    grid: GridConfig,
    withdrawal_nodes: usize,
    allocation_nodes: usize,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Writes `policy` as magic, version, a JSON header carrying `metadata`, then
/// the withdrawal and allocation tables as little-endian binary64.
pub fn write_policy(
    policy: &Policy,
    metadata: serde_json::Value,
    mut out: impl std::io::Write,
) -> Result<()> {
    let header = PolicyHeader {
        w_star: policy.w_star,
        horizon: policy.horizon,
        rebalances: policy.rebalances,
        q_min: policy.q_min,
        q_max: policy.q_max,
        grid: policy.grid,
        withdrawal_nodes: policy.withdrawal_axis.len(),
        allocation_nodes: policy.allocation_axis.len(),
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(POLICY_MAGIC)?;
    out.write_all(&POLICY_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(
        8 * (header.withdrawal_nodes + header.allocation_nodes) * policy.dates(),
    );
    for table in policy.withdrawals.iter().chain(&policy.allocations) {
        for v in table {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a file produced by [`write_policy`], returning the policy and the
/// metadata stored with it.
pub fn read_policy(mut input: impl std::io::Read) -> Result<(Policy, serde_json::Value)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != POLICY_MAGIC {
        return Err(Error::PolicyFormat("not a policy file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != POLICY_VERSION {
        return Err(Error::PolicyFormat(format!(
            "unsupported version {version}"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::PolicyFormat("header too large".into()));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: PolicyHeader = serde_json::from_slice(&json)?;
    let dates = header.rebalances + 1;
    let mut read_tables = |width: usize| -> Result<Vec<Vec<f64>>> {
        let mut bytes = vec![0u8; 8 * width];
        (0..dates)
            .map(|_| {
                input.read_exact(&mut bytes)?;
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
                    .collect())
            })
            .collect()
    };
    let withdrawals = read_tables(header.withdrawal_nodes)?;
    let allocations = read_tables(header.allocation_nodes)?;
    let policy = Policy::new(
        header.w_star,
        header.horizon,
        header.rebalances,
        header.q_min,
        header.q_max,
        header.grid,
        withdrawals,
        allocations,
    )
    .map_err(|e| Error::PolicyFormat(e.to_string()))?;
    Ok((policy, header.metadata))
}
