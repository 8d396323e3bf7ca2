//! Backward propagation of the value function between rebalancing dates.
//!
//! Between dates nothing is controlled, so the value at `t_{n-1}^+` is the
//! conditional expectation of the value at `t_n^-` under the joint stock/bond
//! law. On equally spaced `(log s, log b)` grids that expectation is a
//! correlation with the transition density, applied here as a product with the
//! characteristic function in the discrete Fourier domain. Grids are padded
//! with edge values before transforming to keep wrap-around away from the
//! retained nodes.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::MarketModel;

/// Relative size of the imaginary residue tolerated after the inverse transform.
const IMAG_TOLERANCE: f64 = 1e-9;

/// Construction parameters for the solver grids (wealth in thousands).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Nodes along `log s`.
    pub n_x: usize,
    /// Nodes along `log b`; also the allocation-control count unless overridden.
    pub n_y: usize,
    /// Nodes of the `log(-b)` debt grid; zero means "same as `n_y`".
    pub n_debt: usize,
    /// Centre of every log range.
    pub center: f64,
    /// Half width of every log range before widening.
    pub half_width: f64,
    /// Extra log units added on both sides of every range.
    pub widen: f64,
    /// Padding per side, as a fraction of the range.
    pub pad_fraction: f64,
    pub kernel: KernelScheme,
}

/// How the one-interval transition operator is discretised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelScheme {
    /// Characteristic function sampled at the grid frequencies.
    Spectral,
    /// Transition density projected onto the piecewise-linear interpolant,
    /// with aliases folded in and negative weights removed. Monotone.
    #[default]
    Projected,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_x: 512,
            n_y: 512,
            n_debt: 0,
            center: 100f64.ln(),
            half_width: 8.0,
            widen: 0.0,
            pad_fraction: 0.25,
            kernel: KernelScheme::Projected,
        }
    }
}

impl GridConfig {
    pub fn square(n: usize) -> Self {
        Self {
            n_x: n,
            n_y: n,
            ..Self::default()
        }
    }
}

/// Equally spaced nodes in `log v` on `[min, max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogAxis {
    min: f64,
    max: f64,
    step: f64,
    logs: Vec<f64>,
    values: Vec<f64>,
}

impl LogAxis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "range [{min}, {max}] is not an ordered finite interval"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidGrid(format!("{n} nodes is too few")));
        }
        let step = (max - min) / (n - 1) as f64;
        let logs: Vec<f64> = (0..n).map(|k| min + k as f64 * step).collect();
        let values = logs.iter().map(|x| x.exp()).collect();
        Ok(Self {
            min,
            max,
            step,
            logs,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Node positions in log space.
    pub fn logs(&self) -> &[f64] {
        &self.logs
    }

    /// Node positions `exp(log v)`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Cell index and linear weight (in `v`, not `log v`) for interpolation at
    /// `v`; `ln_v` must be `v.ln()` whenever `v > 0`. Points outside the range
    /// clamp to the boundary node.
    #[inline]
    pub fn locate(&self, v: f64, ln_v: f64) -> (usize, f64) {
        let n = self.values.len();
        if !(v > self.values[0]) {
            return (0, 0.0);
        }
        if v >= self.values[n - 1] {
            return (n - 2, 1.0);
        }
        let mut k = (((ln_v - self.min) / self.step) as usize).min(n - 2);
        while k > 0 && v < self.values[k] {
            k -= 1;
        }
        while k < n - 2 && v >= self.values[k + 1] {
            k += 1;
        }
        let (lo, hi) = (self.values[k], self.values[k + 1]);
        (k, (v - lo) / (hi - lo))
    }
}

/// Solver grids: stock `log s`, bond `log b`, and debt `log(-b)` axes.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub config: GridConfig,
    pub x: LogAxis,
    pub y: LogAxis,
    pub debt: LogAxis,
}

/// Builds the grids described by `config`; sizes must be powers of two ≥ 64.
pub fn build_grids(config: &GridConfig) -> Result<GridSpec> {
    let mut config = *config;
    if config.n_debt == 0 {
        config.n_debt = config.n_y;
    }
    for (name, n) in [
        ("n_x", config.n_x),
        ("n_y", config.n_y),
        ("n_debt", config.n_debt),
    ] {
        if n < 64 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "{name} = {n} must be a power of two no smaller than 64"
            )));
        }
    }
    if !(config.pad_fraction >= 0.0) {
        return Err(Error::InvalidGrid(
            "padding fraction must be non-negative".into(),
        ));
    }
    let lo = config.center - config.half_width - config.widen;
    let hi = config.center + config.half_width + config.widen;
    Ok(GridSpec {
        config,
        x: LogAxis::new(lo, hi, config.n_x)?,
        y: LogAxis::new(lo, hi, config.n_y)?,
        debt: LogAxis::new(lo, hi, config.n_debt)?,
    })
}

impl GridSpec {
    fn pad_nodes(&self, axis: &LogAxis) -> usize {
        (self.config.pad_fraction * (axis.len() - 1) as f64).ceil() as usize
    }

    /// A surface of zeros at time `time`.
    pub fn zero_surface(&self, w_star: f64, time: f64) -> ValueSurface {
        ValueSurface {
            n_x: self.x.len(),
            n_y: self.y.len(),
            solvent: vec![0.0; self.x.len() * self.y.len()],
            debt: vec![0.0; self.debt.len()],
            w_star,
            time,
        }
    }

    /// Surface whose solvent entries are `f(s, b)` and debt entries `g(b')`,
    /// where the debt state holds bond amount `-b'`.
    pub fn tabulate(
        &self,
        w_star: f64,
        time: f64,
        f: impl Fn(f64, f64) -> f64,
        g: impl Fn(f64) -> f64,
    ) -> ValueSurface {
        let mut surface = self.zero_surface(w_star, time);
        let n_y = self.y.len();
        for (i, &s) in self.x.values().iter().enumerate() {
            for (j, &b) in self.y.values().iter().enumerate() {
                surface.solvent[i * n_y + j] = f(s, b);
            }
        }
        for (j, &bp) in self.debt.values().iter().enumerate() {
            surface.debt[j] = g(bp);
        }
        surface
    }

    /// Bilinear value of the solvent table at `(s, b)`, with precomputed logs.
    #[inline]
    pub fn solvent_value_ln(
        &self,
        surface: &ValueSurface,
        s: f64,
        ln_s: f64,
        b: f64,
        ln_b: f64,
    ) -> f64 {
        let (i, wx) = self.x.locate(s, ln_s);
        let (j, wy) = self.y.locate(b, ln_b);
        let n_y = surface.n_y;
        let v = &surface.solvent;
        let r0 = i * n_y + j;
        let r1 = r0 + n_y;
        let lo = v[r0] + wy * (v[r0 + 1] - v[r0]);
        let hi = v[r1] + wy * (v[r1 + 1] - v[r1]);
        lo + wx * (hi - lo)
    }

    /// Bilinear value of the solvent table at `(s, b)`; clamps outside the grid.
    pub fn solvent_value(&self, surface: &ValueSurface, s: f64, b: f64) -> f64 {
        self.solvent_value_ln(surface, s, safe_ln(s), b, safe_ln(b))
    }

    /// Linear value of the debt table at debt size `b' = -b > 0`.
    #[inline]
    pub fn debt_value(&self, surface: &ValueSurface, debt: f64) -> f64 {
        let (j, w) = self.debt.locate(debt, safe_ln(debt));
        let v = &surface.debt;
        v[j] + w * (v[j + 1] - v[j])
    }
}

#[inline]
pub(crate) fn safe_ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Discrete value function at one instant for a fixed `W*`.
///
/// `solvent[i * n_y + j]` holds `V(s_i, b_j)`; `debt[j]` holds the value with
/// zero stock and bond amount `-b'_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub n_x: usize,
    pub n_y: usize,
    pub solvent: Vec<f64>,
    pub debt: Vec<f64>,
    pub w_star: f64,
    pub time: f64,
}

impl ValueSurface {
    pub fn is_finite(&self) -> bool {
        self.solvent.iter().chain(&self.debt).all(|v| v.is_finite())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.solvent[i * self.n_y + j]
    }

    fn max_abs(&self) -> f64 {
        self.solvent
            .iter()
            .chain(&self.debt)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Fourier multipliers for one no-trading interval, with the FFT plans that
/// apply them. Immutable and shareable once built.
pub struct TransitionKernel {
    dt: f64,
    n_x: usize,
    n_y: usize,
    n_debt: usize,
    pad_x: usize,
    pad_y: usize,
    pad_d: usize,
    len_x: usize,
    len_y: usize,
    len_d: usize,
    /// Transposed layout: entry `[ky * len_x + kx]`.
    solvent: Vec<Complex64>,
    debt: Vec<Complex64>,
    fft_x: Arc<dyn Fft<f64>>,
    ifft_x: Arc<dyn Fft<f64>>,
    fft_y: Arc<dyn Fft<f64>>,
    ifft_y: Arc<dyn Fft<f64>>,
    fft_d: Arc<dyn Fft<f64>>,
    ifft_d: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for TransitionKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransitionKernel")
            .field("dt", &self.dt)
            .field("solvent_len", &(self.len_x, self.len_y))
            .field("debt_len", &self.len_d)
            .finish()
    }
}

/// Signed angular frequencies of a length-`len` transform with spacing `dx`.
/// The Nyquist bin (even `len`) returns both signs so the multiplier can be
/// symmetrised, keeping the output of a real input real.
fn frequencies(len: usize, dx: f64) -> Vec<Vec<f64>> {
    let scale = 2.0 * std::f64::consts::PI / (len as f64 * dx);
    (0..len)
        .map(|k| {
            if len % 2 == 0 && k == len / 2 {
                let w = k as f64 * scale;
                vec![w, -w]
            } else if k <= len / 2 {
                vec![k as f64 * scale]
            } else {
                vec![(k as f64 - len as f64) * scale]
            }
        })
        .collect()
}

fn spectral_multipliers(
    model: &MarketModel,
    grid: &GridSpec,
    dt: f64,
    (len_x, len_y, len_d): (usize, usize, usize),
) -> (Vec<Complex64>, Vec<Complex64>) {
    let wx = frequencies(len_x, grid.x.step());
    let wy = frequencies(len_y, grid.y.step());
    let mut solvent = vec![Complex64::new(0.0, 0.0); len_x * len_y];
    for (ky, uys) in wy.iter().enumerate() {
        for (kx, uxs) in wx.iter().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for &ux in uxs {
                for &uy in uys {
                    acc += model.joint_char_fn(ux, uy, dt, false);
                }
            }
            solvent[ky * len_x + kx] = acc / (uxs.len() * uys.len()) as f64;
        }
    }
    let debt = frequencies(len_d, grid.debt.step())
        .iter()
        .map(|us| {
            us.iter()
                .map(|&u| model.joint_char_fn(0.0, u, dt, true))
                .sum::<Complex64>()
                / us.len() as f64
        })
        .collect();
    (solvent, debt)
}

/// Alias folding stops once the diffusion factor has decayed below e^-40,
/// or after this many periods either side.
const MAX_ALIASES: i64 = 32;

/// Frequencies `ω0 + rΩ` that alias onto bin `k`, each with the transform of
/// the unit hat function, `sinc²(ωdx/2)`.
fn alias_set(len: usize, dx: f64, k: usize, sigma: f64, dt: f64) -> Vec<(f64, f64)> {
    let period = 2.0 * std::f64::consts::PI / dx;
    let scale = period / len as f64;
    let nyquist = len % 2 == 0 && k == len / 2;
    let base = if k <= len / 2 {
        k as f64 * scale
    } else {
        (k as f64 - len as f64) * scale
    };
    let lowest = if nyquist {
        -MAX_ALIASES - 1
    } else {
        -MAX_ALIASES
    };
    (lowest..=MAX_ALIASES)
        .map(|r| base + r as f64 * period)
        .filter(|&w| w == base || 0.5 * sigma * sigma * dt * w * w < 40.0)
        .map(|w| {
            let t = 0.5 * w * dx;
            let sinc = if t == 0.0 { 1.0 } else { t.sin() / t };
            (w, sinc * sinc)
        })
        .collect()
}

fn projected_multipliers(
    model: &MarketModel,
    grid: &GridSpec,
    dt: f64,
    (len_x, len_y, len_d): (usize, usize, usize),
) -> (Vec<Complex64>, Vec<Complex64>) {
    // The Gaussian bound on the folded terms uses the variance left after
    // removing the correlated part.
    let damp = (1.0 - model.correlation.abs()).sqrt();
    let sx = model.stock.volatility * damp;
    let sy = model.bond.volatility * damp;
    let ax: Vec<_> = (0..len_x)
        .map(|k| alias_set(len_x, grid.x.step(), k, sx, dt))
        .collect();
    let ay: Vec<_> = (0..len_y)
        .map(|k| alias_set(len_y, grid.y.step(), k, sy, dt))
        .collect();
    let mut solvent = vec![Complex64::new(0.0, 0.0); len_x * len_y];
    solvent
        .par_chunks_mut(len_x)
        .enumerate()
        .for_each(|(ky, row)| {
            for (kx, cell) in row.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for &(uy, wy) in &ay[ky] {
                    for &(ux, wx) in &ax[kx] {
                        acc += model.joint_char_fn(ux, uy, dt, false) * (wx * wy);
                    }
                }
                *cell = acc;
            }
        });
    positive_part(&mut solvent, len_y, len_x);

    let mut debt: Vec<Complex64> = (0..len_d)
        .map(|k| {
            alias_set(len_d, grid.debt.step(), k, model.bond.volatility, dt)
                .into_iter()
                .map(|(u, w)| model.joint_char_fn(0.0, u, dt, true) * w)
                .sum()
        })
        .collect();
    positive_part(&mut debt, 1, len_d);
    (solvent, debt)
}

/// Moves multipliers to grid weights, drops negative weights, restores unit
/// mass and transforms back.
fn positive_part(data: &mut [Complex64], rows: usize, cols: usize) {
    let mut planner = FftPlanner::new();
    fft2(&mut planner, data, rows, cols, true);
    let n = (rows * cols) as f64;
    let mut mass = 0.0;
    for c in data.iter_mut() {
        let w = (c.re / n).max(0.0);
        mass += w;
        *c = Complex64::new(w, 0.0);
    }
    for c in data.iter_mut() {
        *c /= mass;
    }
    fft2(&mut planner, data, rows, cols, false);
}

fn fft2(
    planner: &mut FftPlanner<f64>,
    data: &mut [Complex64],
    rows: usize,
    cols: usize,
    inverse: bool,
) {
    let plan = |planner: &mut FftPlanner<f64>, len| {
        if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        }
    };
    plan(planner, cols).process(data);
    if rows > 1 {
        let mut t = vec![Complex64::new(0.0, 0.0); data.len()];
        transpose(data, &mut t, rows, cols);
        plan(planner, rows).process(&mut t);
        transpose(&t, data, cols, rows);
    }
}

/// Builds the interval kernel for `dt` years on `grid`.
pub fn build_kernel(model: &MarketModel, grid: &GridSpec, dt: f64) -> Result<TransitionKernel> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "interval {dt} must be positive"
        )));
    }
    let (pad_x, pad_y, pad_d) = (
        grid.pad_nodes(&grid.x),
        grid.pad_nodes(&grid.y),
        grid.pad_nodes(&grid.debt),
    );
    let len_x = grid.x.len() + 2 * pad_x;
    let len_y = grid.y.len() + 2 * pad_y;
    let len_d = grid.debt.len() + 2 * pad_d;

    let (solvent, debt) = match grid.config.kernel {
        KernelScheme::Spectral => spectral_multipliers(model, grid, dt, (len_x, len_y, len_d)),
        KernelScheme::Projected => projected_multipliers(model, grid, dt, (len_x, len_y, len_d)),
    };

    let mut planner = FftPlanner::new();
    Ok(TransitionKernel {
        dt,
        n_x: grid.x.len(),
        n_y: grid.y.len(),
        n_debt: grid.debt.len(),
        pad_x,
        pad_y,
        pad_d,
        len_x,
        len_y,
        len_d,
        solvent,
        debt,
        fft_x: planner.plan_fft_forward(len_x),
        ifft_x: planner.plan_fft_inverse(len_x),
        fft_y: planner.plan_fft_forward(len_y),
        ifft_y: planner.plan_fft_inverse(len_y),
        fft_d: planner.plan_fft_forward(len_d),
        ifft_d: planner.plan_fft_inverse(len_d),
    })
}

impl TransitionKernel {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Multiplier of the solvent kernel at discrete frequency `(kx, ky)`.
    pub fn solvent_multiplier(&self, kx: usize, ky: usize) -> Complex64 {
        self.solvent[ky * self.len_x + kx]
    }

    pub fn debt_multiplier(&self, k: usize) -> Complex64 {
        self.debt[k]
    }

    /// Padded transform lengths `(x, y, debt)`.
    pub fn padded_lengths(&self) -> (usize, usize, usize) {
        (self.len_x, self.len_y, self.len_d)
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Carries `surface`, the value just before the rebalance at `t_n`, back to
/// just after the rebalance at `t_{n-1}`, one interval of `kernel.dt()`.
pub fn propagate(surface: &ValueSurface, kernel: &TransitionKernel) -> Result<ValueSurface> {
    if surface.n_x != kernel.n_x || surface.n_y != kernel.n_y || surface.debt.len() != kernel.n_debt
    {
        return Err(Error::InvalidGrid(
            "surface and kernel dimensions differ".into(),
        ));
    }
    if !surface.is_finite() {
        return Err(Error::NonFinite("propagate input"));
    }
    let limit = IMAG_TOLERANCE * surface.max_abs();
    let mut residue = 0.0f64;

    let (nx, ny) = (surface.n_x, surface.n_y);
    let (lx, ly) = (kernel.len_x, kernel.len_y);
    let zero = Complex64::new(0.0, 0.0);

    // Row-major [px * ly + py], edge values replicated into the padding.
    let mut grid = vec![zero; lx * ly];
    for px in 0..lx {
        let i = px.saturating_sub(kernel.pad_x).min(nx - 1);
        let src = &surface.solvent[i * ny..(i + 1) * ny];
        let row = &mut grid[px * ly..(px + 1) * ly];
        for (py, cell) in row.iter_mut().enumerate() {
            let j = py.saturating_sub(kernel.pad_y).min(ny - 1);
            *cell = Complex64::new(src[j], 0.0);
        }
    }
    let scratch_len = kernel
        .fft_y
        .get_inplace_scratch_len()
        .max(kernel.fft_x.get_inplace_scratch_len())
        .max(kernel.ifft_x.get_inplace_scratch_len())
        .max(kernel.ifft_y.get_inplace_scratch_len());
    let mut scratch = vec![zero; scratch_len];
    kernel.fft_y.process_with_scratch(&mut grid, &mut scratch);
    let mut cols = vec![zero; lx * ly];
    transpose(&grid, &mut cols, lx, ly);
    kernel.fft_x.process_with_scratch(&mut cols, &mut scratch);
    for (c, m) in cols.iter_mut().zip(&kernel.solvent) {
        *c *= m;
    }
    kernel.ifft_x.process_with_scratch(&mut cols, &mut scratch);
    transpose(&cols, &mut grid, ly, lx);
    kernel.ifft_y.process_with_scratch(&mut grid, &mut scratch);

    let norm = 1.0 / (lx * ly) as f64;
    let mut solvent = vec![0.0; nx * ny];
    for i in 0..nx {
        let row = &grid[(i + kernel.pad_x) * ly + kernel.pad_y..][..ny];
        for (j, c) in row.iter().enumerate() {
            residue = residue.max(c.im.abs() * norm);
            solvent[i * ny + j] = c.re * norm;
        }
    }

    let nd = surface.debt.len();
    let ld = kernel.len_d;
    let mut line: Vec<Complex64> = (0..ld)
        .map(|p| {
            Complex64::new(
                surface.debt[p.saturating_sub(kernel.pad_d).min(nd - 1)],
                0.0,
            )
        })
        .collect();
    let mut scratch = vec![
        zero;
        kernel
            .fft_d
            .get_inplace_scratch_len()
            .max(kernel.ifft_d.get_inplace_scratch_len())
    ];
    kernel.fft_d.process_with_scratch(&mut line, &mut scratch);
    for (c, m) in line.iter_mut().zip(&kernel.debt) {
        *c *= m;
    }
    kernel.ifft_d.process_with_scratch(&mut line, &mut scratch);
    let norm_d = 1.0 / ld as f64;
    let debt: Vec<f64> = line[kernel.pad_d..kernel.pad_d + nd]
        .iter()
        .map(|c| {
            residue = residue.max(c.im.abs() * norm_d);
            c.re * norm_d
        })
        .collect();

    if residue > limit && residue > f64::MIN_POSITIVE {
        return Err(Error::ImaginaryResidue { residue, limit });
    }
    let out = ValueSurface {
        n_x: nx,
        n_y: ny,
        solvent,
        debt,
        w_star: surface.w_star,
        time: surface.time - kernel.dt,
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("propagate output"));
    }
    Ok(out)
}
