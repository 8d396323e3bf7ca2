//! Stationary block bootstrap of paired monthly real returns, and backtests
//! of stored controls on the resampled histories.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::dp::Scenario;
use crate::error::{Error, Result};
use crate::market::PeriodReturn;
use crate::rng::Substreams;
use crate::sim::{collect, summarize, ControlLaw, ReturnSource, SummaryStats};

/// Column names of the monthly return file.
pub const SERIES_HEADER: [&str; 3] = ["period", "stock_gross_real", "bond_gross_real"];

/// Calendar month `year-month`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Month {
    pub year: i32,
    pub month: u32,
}

impl Month {
    pub fn parse(label: &str) -> Option<Self> {
        let (y, m) = label.trim().split_once('-')?;
        if y.len() != 4 || m.len() != 2 {
            return None;
        }
        let year = y.parse().ok()?;
        let month = m.parse().ok()?;
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                month: self.month + 1,
                ..self
            }
        }
    }
}

impl std::fmt::Display for Month {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Consecutive monthly gross real returns of the stock and bond indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    start: Month,
    stock: Vec<f64>,
    bond: Vec<f64>,
}

impl ReturnSeries {
    /// Series starting at `start`; both columns must have equal length of at
    /// least two and hold positive finite gross returns.
    pub fn new(start: Month, stock: Vec<f64>, bond: Vec<f64>) -> Result<Self> {
        if stock.len() != bond.len() {
            return Err(Error::Series {
                line: 0,
                reason: format!("stock has {} entries, bond {}", stock.len(), bond.len()),
            });
        }
        if stock.len() < 2 {
            return Err(Error::Series {
                line: 0,
                reason: "need at least two months".into(),
            });
        }
        for (k, (s, b)) in stock.iter().zip(&bond).enumerate() {
            if !(s.is_finite() && *s > 0.0 && b.is_finite() && *b > 0.0) {
                return Err(Error::Series {
                    line: k + 2,
                    reason: format!("gross returns must be positive, found ({s}, {b})"),
                });
            }
        }
        Ok(Self { start, stock, bond })
    }

    pub fn len(&self) -> usize {
        self.stock.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stock.is_empty()
    }

    pub fn stock(&self) -> &[f64] {
        &self.stock
    }

    pub fn bond(&self) -> &[f64] {
        &self.bond
    }

    pub fn start(&self) -> Month {
        self.start
    }

    pub fn label(&self, index: usize) -> Month {
        (0..index).fold(self.start, |m, _| m.next())
    }

    /// Writes the series in the loader's format.
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SERIES_HEADER)?;
        let mut month = self.start;
        for (s, b) in self.stock.iter().zip(&self.bond) {
            w.write_record([month.to_string(), s.to_string(), b.to_string()])?;
            month = month.next();
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses `period,stock_gross_real,bond_gross_real` CSV with `YYYY-MM`
/// periods and no missing months.
pub fn load_return_series(input: impl Read) -> Result<ReturnSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != SERIES_HEADER {
        return Err(Error::Series {
            line: 1,
            reason: format!("expected header {}", SERIES_HEADER.join(",")),
        });
    }
    let (mut stock, mut bond) = (Vec::new(), Vec::new());
    let mut start = None;
    let mut expected: Option<Month> = None;
    for (k, row) in reader.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::Series {
            line,
            reason: e.to_string(),
        })?;
        let bad = |reason: String| Error::Series { line, reason };
        let month = Month::parse(&row[0])
            .ok_or_else(|| bad(format!("period '{}' is not YYYY-MM", &row[0])))?;
        if let Some(want) = expected {
            if month != want {
                return Err(bad(format!("expected period {want}, found {month}")));
            }
        }
        start.get_or_insert(month);
        expected = Some(month.next());
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("'{s}' is not a number")))
        };
        let (s, b) = (parse(&row[1])?, parse(&row[2])?);
        if !(s > 0.0 && b > 0.0 && s.is_finite() && b.is_finite()) {
            return Err(bad(format!(
                "gross returns must be positive, found ({s}, {b})"
            )));
        }
        stock.push(s);
        bond.push(b);
    }
    let start = start.ok_or(Error::EmptySample)?;
    ReturnSeries::new(start, stock, bond)
}

pub fn load_return_series_file(path: impl AsRef<Path>) -> Result<ReturnSeries> {
    load_return_series(std::fs::File::open(path)?)
}

/// Bootstrap settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    /// Expected block length in years.
    pub blocksize_years: f64,
    pub resamples: usize,
    pub seed: u64,
    pub horizon: f64,
    pub months_per_period: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            blocksize_years: 0.25,
            resamples: 100_000,
            seed: 2020,
            horizon: 30.0,
            months_per_period: 12,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blocksize_years > 0.0)
            || self.resamples == 0
            || self.months_per_period == 0
            || !(self.horizon > 0.0)
        {
            return Err(Error::InvalidParameter(
                "bootstrap needs positive blocksize, horizon and counts".into(),
            ));
        }
        Ok(())
    }
}

/// Position inside the current block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockState {
    /// Next month to emit.
    pub index: usize,
    /// Months left in the current block, including `index`.
    pub remaining: usize,
}

/// Geometric block lengths with uniform starts and circular wraparound.
#[derive(Debug, Clone)]
pub struct BlockResampler {
    len: usize,
    lengths: Geometric,
}

impl BlockResampler {
    pub fn new(series_len: usize, blocksize_years: f64) -> Result<Self> {
        if series_len < 2 {
            return Err(Error::InvalidParameter(
                "series must have at least two months".into(),
            ));
        }
        if !(blocksize_years > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "blocksize {blocksize_years} must be positive"
            )));
        }
        let v = (1.0 / (12.0 * blocksize_years)).min(1.0);
        Ok(Self {
            len: series_len,
            lengths: Geometric::new(v).map_err(|e| Error::InvalidParameter(e.to_string()))?,
        })
    }

    /// Length of a new block, `Pr(k) = (1 - v)^(k-1) v`, capped at the series length.
    pub fn block_length<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        (self.lengths.sample(rng).saturating_add(1)).min(self.len as u64) as usize
    }

    /// Emits the next source month, starting a new block when the current one ends.
    pub fn next_index<R: Rng + ?Sized>(&self, state: &mut BlockState, rng: &mut R) -> usize {
        if state.remaining == 0 {
            state.remaining = self.block_length(rng);
            state.index = rng.random_range(0..self.len);
        }
        let k = state.index;
        state.index = (k + 1) % self.len;
        state.remaining -= 1;
        k
    }
}

/// Source-month indices of one resampled path of `months` months.
pub fn stationary_block_resample<R: Rng + ?Sized>(
    series: &ReturnSeries,
    config: &BootstrapConfig,
    months: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let resampler = BlockResampler::new(series.len(), config.blocksize_years)?;
    let mut state = BlockState::default();
    Ok((0..months)
        .map(|_| resampler.next_index(&mut state, rng))
        .collect())
}

/// Bootstrapped historical market: each period compounds
/// `months_per_period` resampled months, stock and bond from the same month.
#[derive(Debug, Clone)]
pub struct HistoricalMarket<'a> {
    series: &'a ReturnSeries,
    resampler: BlockResampler,
    streams: Substreams,
    months: usize,
    monthly_spread: f64,
}

impl<'a> HistoricalMarket<'a> {
    pub fn new(
        series: &'a ReturnSeries,
        config: &BootstrapConfig,
        borrow_spread: f64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            series,
            resampler: BlockResampler::new(series.len(), config.blocksize_years)?,
            streams: Substreams::new(config.seed),
            months: config.months_per_period,
            monthly_spread: (borrow_spread / 12.0).exp(),
        })
    }

    /// Source months used by `path` over its first `periods` periods.
    pub fn provenance(&self, path: u64, periods: usize) -> Vec<usize> {
        let mut state = BlockState::default();
        let mut out = Vec::with_capacity(periods * self.months);
        for n in 0..periods {
            let mut rng = self.streams.at(path, n as u64);
            for _ in 0..self.months {
                out.push(self.resampler.next_index(&mut state, &mut rng));
            }
        }
        out
    }
}

impl ReturnSource for HistoricalMarket<'_> {
    type State = BlockState;

    fn initial_state(&self, _path: u64) -> BlockState {
        BlockState::default()
    }

    fn period_return(
        &self,
        path: u64,
        period: usize,
        state: &mut BlockState,
        insolvent: bool,
    ) -> PeriodReturn {
        let mut rng = self.streams.at(path, period as u64);
        let (mut s, mut b) = (1.0, 1.0);
        for _ in 0..self.months {
            let k = self.resampler.next_index(state, &mut rng);
            s *= self.series.stock[k];
            b *= self.series.bond[k];
            if insolvent {
                b *= self.monthly_spread;
            }
        }
        PeriodReturn {
            stock_gross: s,
            bond_gross: b,
        }
    }
}

/// Applies `control` along `config.resamples` bootstrapped histories.
pub fn backtest<C>(
    control: &C,
    scenario: &Scenario,
    series: &ReturnSeries,
    config: &BootstrapConfig,
    borrow_spread: f64,
) -> Result<SummaryStats>
where
    C: ControlLaw + ?Sized,
{
    config.validate()?;
    if (config.horizon - scenario.horizon).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "bootstrap horizon {} differs from scenario horizon {}",
            config.horizon, scenario.horizon
        )));
    }
    let months = (12.0 * scenario.dt()).round();
    if (months - 12.0 * scenario.dt()).abs() > 1e-9 || months as usize != config.months_per_period {
        return Err(Error::Config(format!(
            "rebalancing interval of {} years does not match {} months per period",
            scenario.dt(),
            config.months_per_period
        )));
    }
    let market = HistoricalMarket::new(series, config, borrow_spread)?;
    summarize(
        &collect(scenario, control, &market, config.resamples)?,
        scenario.alpha,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::MarketModel;
    use crate::sim::{simulate, FixedPolicy};

    fn monthly(n: usize, stock: f64, bond: f64) -> ReturnSeries {
        ReturnSeries::new(
            Month {
                year: 1926,
                month: 1,
            },
            vec![stock; n],
            vec![bond; n],
        )
        .unwrap()
    }

    fn rows(lines: &[&str]) -> String {
        let mut s = String::from("period,stock_gross_real,bond_gross_real\n");
        for l in lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    #[test]
    fn loads_small_file() {
        let series =
            load_return_series(rows(&["1926-01,1.01,1.002", "1926-02,0.98,1.001"]).as_bytes())
                .unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series.stock(), &[1.01, 0.98]);
        assert_eq!(series.label(1).to_string(), "1926-02");
    }

    #[test]
    fn rejects_bad_files() {
        let zero = load_return_series(rows(&["1926-01,1.01,1.0", "1926-02,0.0,1.0"]).as_bytes());
        assert!(matches!(zero, Err(Error::Series { line: 3, .. })));
        let gap = load_return_series(rows(&["1926-01,1.01,1.0", "1926-03,1.0,1.0"]).as_bytes());
        assert!(matches!(gap, Err(Error::Series { line: 3, .. })));
        let label = load_return_series(rows(&["1926/01,1.01,1.0", "1926-02,1.0,1.0"]).as_bytes());
        assert!(label.is_err());
        let short = load_return_series(rows(&["1926-01,1.01", "1926-02,1.0,1.0"]).as_bytes());
        assert!(short.is_err());
        let header = load_return_series("month,s,b\n1926-01,1,1\n".as_bytes());
        assert!(matches!(header, Err(Error::Series { line: 1, .. })));
        assert!(ReturnSeries::new(
            Month {
                year: 2000,
                month: 1
            },
            vec![1.0; 3],
            vec![1.0; 2]
        )
        .is_err());
    }

    #[test]
    fn full_history_length() {
        let series = monthly(1128, 1.005, 1.002);
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let back = load_return_series(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1128);
        assert_eq!(back.label(1127).to_string(), "2019-12");
        assert_eq!(back, series);
    }

    #[test]
    fn constant_series_resamples_to_constant() {
        let series = monthly(50, 1.01, 0.99);
        let market = HistoricalMarket::new(&series, &BootstrapConfig::default(), 0.0).unwrap();
        let mut state = BlockState::default();
        for n in 0..30 {
            let r = market.period_return(7, n, &mut state, false);
            assert!((r.stock_gross - 1.01f64.powi(12)).abs() < 1e-12);
            assert!((r.bond_gross - 0.99f64.powi(12)).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_block_length() {
        let r = BlockResampler::new(1128, 0.25).unwrap();
        let mut rng = Substreams::new(8).path(0);
        let n = 100_000;
        let mean = (0..n).map(|_| r.block_length(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn resample_is_reproducible() {
        let series = monthly(100, 1.0, 1.0);
        let cfg = BootstrapConfig::default();
        let a =
            stationary_block_resample(&series, &cfg, 360, &mut Substreams::new(1).path(3)).unwrap();
        let b =
            stationary_block_resample(&series, &cfg, 360, &mut Substreams::new(1).path(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&k| k < 100));
    }

    #[test]
    fn wraps_to_first_month() {
        let r = BlockResampler::new(10, 1.0).unwrap();
        let mut rng = Substreams::new(1).path(0);
        let mut state = BlockState {
            index: 9,
            remaining: 3,
        };
        let got: Vec<usize> = (0..3).map(|_| r.next_index(&mut state, &mut rng)).collect();
        assert_eq!(got, vec![9, 0, 1]);
    }

    #[test]
    fn blocks_capped_at_series_length() {
        let r = BlockResampler::new(5, 1000.0).unwrap();
        let mut rng = Substreams::new(2).path(0);
        assert!((0..1000).all(|_| r.block_length(&mut rng) <= 5));
    }

    #[test]
    fn monthly_blocks_draw_months_uniformly() {
        let len = 120;
        let r = BlockResampler::new(len, 1.0 / 12.0).unwrap();
        let mut rng = Substreams::new(3).path(0);
        let mut state = BlockState::default();
        let draws = 1_000_000;
        let mut counts = vec![0usize; len];
        for _ in 0..draws {
            counts[r.next_index(&mut state, &mut rng)] += 1;
        }
        let expected = draws as f64 / len as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Wilson-Hilferty: the cube root of chi2/dof is close to normal.
        let dof = (len - 1) as f64;
        let z = ((chi2 / dof).cbrt() - (1.0 - 2.0 / (9.0 * dof))) / (2.0 / (9.0 * dof)).sqrt();
        assert!(z < 3.09, "chi2 = {chi2}, z = {z}");
    }

    #[test]
    fn pairs_come_from_one_month() {
        let n = 60;
        let stock: Vec<f64> = (0..n).map(|k| 1.0 + k as f64 * 1e-3).collect();
        let bond: Vec<f64> = (0..n).map(|k| 1.0 + k as f64 * 1e-4).collect();
        let series = ReturnSeries::new(
            Month {
                year: 1990,
                month: 1,
            },
            stock,
            bond,
        )
        .unwrap();
        let cfg = BootstrapConfig {
            months_per_period: 1,
            ..BootstrapConfig::default()
        };
        let market = HistoricalMarket::new(&series, &cfg, 0.0).unwrap();
        let used = market.provenance(4, 200);
        let mut state = BlockState::default();
        for (n, &k) in used.iter().enumerate() {
            let r = market.period_return(4, n, &mut state, false);
            assert_eq!(r.stock_gross, series.stock()[k]);
            assert_eq!(r.bond_gross, series.bond()[k]);
        }
    }

    #[test]
    fn zero_return_backtest_is_deterministic() {
        let series = monthly(24, 1.0, 1.0);
        let cfg = BootstrapConfig {
            resamples: 500,
            ..BootstrapConfig::default()
        };
        let sc = Scenario::default();
        let stats = backtest(
            &FixedPolicy::new(0.0, 40.0).unwrap(),
            &sc,
            &series,
            &cfg,
            0.0,
        )
        .unwrap();
        assert!((stats.terminal_wealth.p5 + 240.0).abs() < 1e-9);
        assert!((stats.terminal_wealth.p95 + 240.0).abs() < 1e-9);
        assert!((stats.expected_shortfall + 240.0).abs() < 1e-9);
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let series = monthly(24, 1.0, 1.0);
        let cfg = BootstrapConfig {
            horizon: 20.0,
            ..BootstrapConfig::default()
        };
        let err = backtest(
            &FixedPolicy::new(0.0, 40.0).unwrap(),
            &Scenario::default(),
            &series,
            &cfg,
            0.0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn bootstrap_of_model_data_matches_simulation() {
        let model = MarketModel::crsp_1926_2019();
        let sampler = crate::market::PeriodSampler::new(&model, 1.0 / 12.0);
        let mut rng = Substreams::new(77).path(0);
        let months = 2_400_000;
        let (stock, bond): (Vec<f64>, Vec<f64>) = (0..months)
            .map(|_| {
                let r = sampler.sample(&mut rng, false);
                (r.stock_gross, r.bond_gross)
            })
            .unzip();
        let series = ReturnSeries::new(Month { year: 1, month: 1 }, stock, bond).unwrap();
        let sc = Scenario::default();
        let fixed = FixedPolicy::new(0.4, 40.0).unwrap();
        let cfg = BootstrapConfig {
            resamples: 200_000,
            blocksize_years: 0.5,
            ..BootstrapConfig::default()
        };
        let boot = backtest(&fixed, &sc, &series, &cfg, 0.0).unwrap();
        let direct = simulate(&model, &sc, &fixed, 200_000, 5).unwrap();
        let se = boot
            .expected_shortfall_se
            .hypot(direct.expected_shortfall_se);
        assert!(
            (boot.expected_shortfall - direct.expected_shortfall).abs() < 3.0 * se,
            "{} vs {} (se {se})",
            boot.expected_shortfall,
            direct.expected_shortfall
        );
    }
}
