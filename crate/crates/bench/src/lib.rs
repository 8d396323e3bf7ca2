//! Benchmark fixtures shared by the criterion targets.

use drawdown_core::{GridConfig, MarketModel, Scenario};

/// Base-case market and scenario on an `n x n` grid.
pub fn base_case(n: usize) -> (MarketModel, Scenario, GridConfig) {
    (
        MarketModel::default(),
        Scenario::default(),
        GridConfig::square(n),
    )
}
