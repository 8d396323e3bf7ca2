//! Optimal withdrawal and asset-allocation controls for retirement
//! decumulation, trading expected total withdrawals against expected
//! shortfall of terminal wealth.
//!
//! The crate is organised bottom-up:
//!
//! * [`market`]: the correlated stock/bond jump-diffusion model.
//! * [`pide`]: Fourier propagation of value surfaces between rebalancing dates.
//! * [`dp`]: the rebalancing operator, the backward sweep and the `W*` search.
//! * [`sim`]: forward Monte Carlo evaluation of stored or fixed policies.
//! * [`bootstrap`]: stationary block bootstrap backtests on historical returns.
//! * [`frontier`]: run configuration, frontier sweeps and result files.

pub mod bootstrap;
pub mod dp;
pub mod error;
pub mod frontier;
pub mod market;
pub mod pide;
pub mod rng;
pub mod sim;

pub use bootstrap::{
    backtest, load_return_series, load_return_series_file, stationary_block_resample,
    BlockResampler, BootstrapConfig, HistoricalMarket, Month, ReturnSeries,
};
pub use dp::{
    optimize_wstar, read_policy, refine_wstar, solve_auxiliary, terminal_values, write_policy,
    AuxiliarySolution, AuxiliarySolver, Optimum, PdeStatistics, Policy, Scenario, TerminalPayoff,
    WStarSearch,
};
pub use error::{Error, Result};
pub use frontier::{
    run_benchmark, run_frontier, Artifacts, BenchmarkRow, FrontierPoint, FrontierRun, RunConfig,
};
pub use market::{AssetParams, JumpLaw, MarketModel, PeriodReturn, PeriodSampler};
pub use pide::{
    build_grids, build_kernel, propagate, GridConfig, GridSpec, KernelScheme, LogAxis,
    TransitionKernel, ValueSurface,
};
pub use sim::{
    expected_shortfall, heatmap_export, simulate, summarize, Bands, ControlLaw, Ensemble,
    FixedPolicy, HeatMap, PathRecord, ReturnSource, SummaryStats, SyntheticMarket,
};
