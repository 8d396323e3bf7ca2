//! Run configuration, frontier sweeps, benchmark grids and result files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::{backtest, load_return_series_file, BootstrapConfig, ReturnSeries};
use crate::dp::{optimize_wstar, write_policy, Optimum, Policy, Scenario, WStarSearch};
use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::pide::{GridConfig, KernelScheme};
use crate::sim::{heatmap_export, simulate, Bands, FixedPolicy, HeatMap, SummaryStats};

/// Version of every CSV and JSON layout written here.
pub const SCHEMA_VERSION: u32 = 1;
/// Scalarization weights above this are refused.
pub const KAPPA_LIMIT: f64 = 1e5;
/// Scalarization weights above this draw a warning.
pub const KAPPA_WARN: f64 = 1e3;

/// Grid ladder, coarse to fine, plus the shared domain settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Sizes as `"n_x x n_y"`, e.g. `"512x512"`.
    pub ladder: Vec<String>,
    pub half_width: f64,
    pub widen: f64,
    pub pad_fraction: f64,
    pub kernel: KernelScheme,
}

impl Default for GridSection {
    fn default() -> Self {
        let base = GridConfig::default();
        Self {
            ladder: vec!["256x256".into(), "512x512".into(), "1024x1024".into()],
            half_width: base.half_width,
            widen: base.widen,
            pad_fraction: base.pad_fraction,
            kernel: base.kernel,
        }
    }
}

/// Parses `"512x512"` (or a single `"512"`) into `(n_x, n_y)`.
pub fn parse_grid_size(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("grid size '{text}' is not of the form NxN"));
    let text = text.trim();
    let (a, b) = text.split_once(['x', 'X']).unwrap_or((text, text));
    let nx = a.trim().parse().map_err(|_| bad())?;
    let ny = b.trim().parse().map_err(|_| bad())?;
    Ok((nx, ny))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub paths: usize,
    pub seed: u64,
    /// Stored policy to evaluate instead of solving.
    pub policy: Option<PathBuf>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            paths: 2_560_000,
            seed: 2020,
            policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierConfig {
    pub kappas: Vec<f64>,
}

impl Default for FrontierConfig {
    fn default() -> Self {
        Self {
            kappas: vec![0.05, 0.2, 0.5, 1.0, 5.0, 50.0, 5000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub equity_weights: Vec<f64>,
    pub withdrawal: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            equity_weights: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            withdrawal: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    /// Monthly return file; required by `backtest`.
    pub series: Option<PathBuf>,
    pub blocksize_years: f64,
    pub resamples: usize,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let base = BootstrapConfig::default();
        Self {
            series: None,
            blocksize_years: base.blocksize_years,
            resamples: base.resamples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

/// Everything a run needs; every field has the base-case default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketModel,
    pub scenario: Scenario,
    pub grid: GridSection,
    pub wstar: WStarSearch,
    pub simulation: SimulationConfig,
    pub frontier: FrontierConfig,
    pub benchmark: BenchmarkConfig,
    pub bootstrap: BootstrapSection,
    pub output: OutputConfig,
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Config(format!("kappa {kappa} must be positive")));
    }
    if kappa > KAPPA_LIMIT {
        return Err(Error::Config(format!(
            "kappa {kappa} exceeds {KAPPA_LIMIT:e}; solutions are not reliable there"
        )));
    }
    if kappa > KAPPA_WARN {
        log::warn!("kappa {kappa} is large; accuracy may suffer");
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| e.in_stage(format!("reading {}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.scenario.validate()?;
        check_kappa(self.scenario.kappa)?;
        self.grid_ladder()?;
        if self.simulation.paths == 0 {
            return Err(Error::Config("simulation.paths must be positive".into()));
        }
        for &k in &self.frontier.kappas {
            check_kappa(k)?;
        }
        for &p in &self.benchmark.equity_weights {
            FixedPolicy::new(p, self.benchmark.withdrawal)?;
        }
        self.bootstrap_config().validate()?;
        Ok(())
    }

    pub fn grid_ladder(&self) -> Result<Vec<GridConfig>> {
        if self.grid.ladder.is_empty() {
            return Err(Error::Config("grid ladder is empty".into()));
        }
        self.grid
            .ladder
            .iter()
            .map(|text| {
                let (n_x, n_y) = parse_grid_size(text)?;
                let cfg = GridConfig {
                    n_x,
                    n_y,
                    n_debt: 0,
                    half_width: self.grid.half_width,
                    widen: self.grid.widen,
                    pad_fraction: self.grid.pad_fraction,
                    kernel: self.grid.kernel,
                    ..GridConfig::default()
                };
                crate::pide::build_grids(&cfg)?;
                Ok(cfg)
            })
            .collect()
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig {
            blocksize_years: self.bootstrap.blocksize_years,
            resamples: self.bootstrap.resamples,
            seed: self.simulation.seed,
            horizon: self.scenario.horizon,
            months_per_period: (12.0 * self.scenario.dt()).round().max(1.0) as usize,
        }
    }

    /// SHA-256 of the fully resolved configuration. Where the outputs go is
    /// not part of a run's identity.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.output = OutputConfig::default();
        let bytes = serde_json::to_vec(&identity).expect("configuration serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn with_kappa(&self, kappa: f64) -> Scenario {
        Scenario {
            kappa,
            ..self.scenario
        }
    }
}

/// Solves the configured scenario on the full grid ladder.
pub fn solve(cfg: &RunConfig) -> Result<Optimum> {
    let ladder = cfg.grid_ladder()?;
    optimize_wstar(&cfg.market, &cfg.scenario, &ladder, &cfg.wstar)
        .map_err(|e| e.in_stage("optimize W*"))
}

/// One row of an EW-ES frontier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub kappa: f64,
    pub expected_shortfall: f64,
    pub mean_withdrawal: f64,
    pub median_terminal_wealth: f64,
    pub mean_median_equity: f64,
    pub w_star: f64,
    pub pde_expected_shortfall: f64,
    pub pde_mean_withdrawal: f64,
}

impl FrontierPoint {
    pub fn new(kappa: f64, optimum: &Optimum, stats: &SummaryStats) -> Result<Self> {
        let point = Self {
            kappa,
            expected_shortfall: stats.expected_shortfall,
            mean_withdrawal: stats.mean_withdrawal,
            median_terminal_wealth: stats.median_terminal_wealth,
            mean_median_equity: stats.mean_median_equity,
            w_star: optimum.w_star,
            pde_expected_shortfall: optimum.statistics.expected_shortfall,
            pde_mean_withdrawal: optimum.statistics.mean_withdrawal,
        };
        let fields = [
            point.expected_shortfall,
            point.mean_withdrawal,
            point.median_terminal_wealth,
            point.mean_median_equity,
            point.w_star,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frontier point"));
        }
        Ok(point)
    }
}

/// A frontier point together with the control and statistics behind it.
#[derive(Debug, Clone)]
pub struct FrontierRun {
    pub point: FrontierPoint,
    pub optimum: Optimum,
    pub stats: SummaryStats,
}

/// Solves and simulates every `κ` of the sweep; rows come back sorted by `κ`.
pub fn run_frontier(cfg: &RunConfig) -> Result<Vec<FrontierRun>> {
    let mut kappas = cfg.frontier.kappas.clone();
    if kappas.is_empty() {
        return Err(Error::Config("frontier needs at least one kappa".into()));
    }
    kappas.sort_by(f64::total_cmp);
    if kappas.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("kappa list contains duplicates".into()));
    }
    for &k in &kappas {
        check_kappa(k)?;
    }
    let ladder = cfg.grid_ladder()?;
    kappas
        .par_iter()
        .map(|&kappa| {
            let scenario = cfg.with_kappa(kappa);
            let optimum = optimize_wstar(&cfg.market, &scenario, &ladder, &cfg.wstar)
                .map_err(|e| e.in_stage(format!("kappa {kappa}: optimize W*")))?;
            let stats = simulate(
                &cfg.market,
                &scenario,
                &optimum.policy,
                cfg.simulation.paths,
                cfg.simulation.seed,
            )
            .map_err(|e| e.in_stage(format!("kappa {kappa}: simulate")))?;
            let point = FrontierPoint::new(kappa, &optimum, &stats)?;
            Ok(FrontierRun {
                point,
                optimum,
                stats,
            })
        })
        .collect()
}

/// Constant-weight, constant-withdrawal benchmark statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub equity: f64,
    pub withdrawal: f64,
    pub expected_shortfall: f64,
    pub median_terminal_wealth: f64,
    pub mean_withdrawal: f64,
    /// Same statistics on the bootstrapped history, when a series is given.
    pub bootstrap_expected_shortfall: Option<f64>,
    pub bootstrap_median_terminal_wealth: Option<f64>,
}

pub fn run_benchmark(cfg: &RunConfig, series: Option<&ReturnSeries>) -> Result<Vec<BenchmarkRow>> {
    cfg.benchmark
        .equity_weights
        .iter()
        .map(|&equity| {
            let fixed = FixedPolicy::new(equity, cfg.benchmark.withdrawal)?;
            let scenario = Scenario {
                q_min: fixed.withdrawal,
                q_max: fixed.withdrawal,
                ..cfg.scenario
            };
            let stats = simulate(
                &cfg.market,
                &scenario,
                &fixed,
                cfg.simulation.paths,
                cfg.simulation.seed,
            )
            .map_err(|e| e.in_stage(format!("benchmark equity {equity}: simulate")))?;
            let boot = series
                .map(|s| {
                    backtest(
                        &fixed,
                        &scenario,
                        s,
                        &cfg.bootstrap_config(),
                        cfg.market.borrow_spread,
                    )
                })
                .transpose()
                .map_err(|e| e.in_stage(format!("benchmark equity {equity}: backtest")))?;
            Ok(BenchmarkRow {
                equity,
                withdrawal: fixed.withdrawal,
                expected_shortfall: stats.expected_shortfall,
                median_terminal_wealth: stats.median_terminal_wealth,
                mean_withdrawal: stats.mean_withdrawal,
                bootstrap_expected_shortfall: boot.as_ref().map(|b| b.expected_shortfall),
                bootstrap_median_terminal_wealth: boot.as_ref().map(|b| b.median_terminal_wealth),
            })
        })
        .collect()
}

/// Loads the configured return series, if any.
pub fn configured_series(cfg: &RunConfig) -> Result<Option<ReturnSeries>> {
    cfg.bootstrap
        .series
        .as_ref()
        .map(|p| {
            load_return_series_file(p).map_err(|e| e.in_stage(format!("loading {}", p.display())))
        })
        .transpose()
}

/// Identification carried by every written file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub schema: u32,
    pub config_sha256: String,
    pub seed: u64,
}

impl Stamp {
    fn comment(&self) -> String {
        format!(
            "# schema={} config_sha256={} seed={}\n",
            self.schema, self.config_sha256, self.seed
        )
    }
}

/// Writer for one output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: PathBuf,
    stamp: Stamp,
}

impl Artifacts {
    /// Creates `dir` and records the resolved configuration in it.
    pub fn create(dir: impl Into<PathBuf>, cfg: &RunConfig) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let stamp = Stamp {
            schema: SCHEMA_VERSION,
            config_sha256: cfg.hash(),
            seed: cfg.simulation.seed,
        };
        let out = Self { dir, stamp };
        let mut text = out.stamp.comment();
        text.push_str(&cfg.to_toml()?);
        fs::write(out.path("config.resolved.toml"), text)?;
        Ok(out)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stamp(&self) -> &Stamp {
        &self.stamp
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn csv(&self, name: &str) -> Result<csv::Writer<fs::File>> {
        let mut file = fs::File::create(self.path(name))?;
        file.write_all(self.stamp.comment().as_bytes())?;
        Ok(csv::Writer::from_writer(file))
    }

    /// `summary.json`: the stamp, the mode and its results.
    pub fn write_summary(&self, mode: &str, results: &impl Serialize) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a, T> {
            #[serde(flatten)]
            stamp: &'a Stamp,
            mode: &'a str,
            results: &'a T,
        }
        let body = serde_json::to_vec_pretty(&Summary {
            stamp: &self.stamp,
            mode,
            results,
        })?;
        fs::write(self.path("summary.json"), body)?;
        Ok(())
    }

    pub fn write_frontier(&self, points: &[FrontierPoint]) -> Result<()> {
        let mut w = self.csv("frontier.csv")?;
        for p in points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_benchmark(&self, rows: &[BenchmarkRow]) -> Result<()> {
        let mut w = self.csv("benchmark.csv")?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `percentiles_{wealth,withdrawal,equity}.csv`, one row per date.
    pub fn write_percentiles(&self, stats: &SummaryStats, dt: f64) -> Result<()> {
        let tables: [(&str, &[Bands]); 3] = [
            ("percentiles_wealth.csv", &stats.wealth),
            ("percentiles_withdrawal.csv", &stats.withdrawal),
            ("percentiles_equity.csv", &stats.equity),
        ];
        for (name, bands) in tables {
            let mut w = self.csv(name)?;
            w.write_record(["date", "time", "p5", "p20", "p50", "p80", "p95"])?;
            for (n, b) in bands.iter().enumerate() {
                let mut row = vec![n.to_string(), (n as f64 * dt).to_string()];
                row.extend(b.as_array().iter().map(f64::to_string));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    fn write_heatmap(&self, name: &str, map: &HeatMap) -> Result<()> {
        let mut w = self.csv(name)?;
        let mut header = vec!["wealth".to_string()];
        header.extend(map.times.iter().map(|t| format!("t={t}")));
        w.write_record(&header)?;
        for (wealth, row) in map.wealth.iter().zip(&map.values) {
            let mut rec = vec![wealth.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `heatmap_p.csv` and `heatmap_q.csv`.
    pub fn write_heatmaps(&self, policy: &Policy) -> Result<()> {
        let (equity, withdrawal) = heatmap_export(policy);
        self.write_heatmap("heatmap_p.csv", &equity)?;
        self.write_heatmap("heatmap_q.csv", &withdrawal)
    }

    pub fn write_policy(&self, name: &str, policy: &Policy) -> Result<()> {
        let meta = serde_json::to_value(&self.stamp)?;
        let file = fs::File::create(self.path(name))?;
        let mut out = std::io::BufWriter::new(file);
        write_policy(policy, meta, &mut out)?;
        out.flush()?;
        Ok(())
    }
}
