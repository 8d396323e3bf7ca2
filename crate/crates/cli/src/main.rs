//! `drawdown`: solve, simulate and backtest optimal decumulation strategies.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use drawdown_core::frontier::{configured_series, solve};
use drawdown_core::{
    backtest, read_policy, run_benchmark, run_frontier, simulate, Artifacts, FrontierPoint,
    Optimum, Policy, RunConfig, SummaryStats,
};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "drawdown",
    version,
    about = "EW-ES optimal withdrawal and allocation for retirement portfolios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize W* and the controls, then write the policy and heat maps.
    Solve(Options),
    /// Monte Carlo statistics in the synthetic market.
    Simulate(Options),
    /// Bootstrap resampling of a historical monthly return series.
    Backtest(Options),
    /// Solve and simulate a sweep of scalarization weights.
    Frontier(Options),
    /// Constant-weight, constant-withdrawal reference strategies.
    Benchmark(Options),
}

#[derive(Args, Clone, Default)]
struct Options {
    /// TOML run configuration; missing keys take the base-case defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo paths, or bootstrap resamples for `backtest`.
    #[arg(long)]
    paths: Option<usize>,
    /// Grid ladder, coarse to fine, e.g. `256x256,512x512`.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<String>,
    /// Scalarization weights; a single value also sets the scenario weight.
    #[arg(long, value_delimiter = ',')]
    kappa: Vec<f64>,
    /// Monthly real return series (CSV).
    #[arg(long)]
    series: Option<PathBuf>,
    /// Expected bootstrap block length in years.
    #[arg(long)]
    blocksize: Option<f64>,
    /// Stored policy to evaluate instead of solving.
    #[arg(long)]
    policy: Option<PathBuf>,
}

impl Options {
    fn resolve(&self, backtesting: bool) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = &self.out {
            cfg.output.dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.simulation.seed = seed;
        }
        if let Some(paths) = self.paths {
            if backtesting {
                cfg.bootstrap.resamples = paths;
            } else {
                cfg.simulation.paths = paths;
            }
        }
        if !self.grid.is_empty() {
            cfg.grid.ladder = self.grid.clone();
        }
        match self.kappa.as_slice() {
            [] => {}
            [k] => {
                cfg.scenario.kappa = *k;
                cfg.frontier.kappas = vec![*k];
            }
            many => cfg.frontier.kappas = many.to_vec(),
        }
        if let Some(series) = &self.series {
            cfg.bootstrap.series = Some(series.clone());
        }
        if let Some(b) = self.blocksize {
            cfg.bootstrap.blocksize_years = b;
        }
        if let Some(policy) = &self.policy {
            cfg.simulation.policy = Some(policy.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct SolveSummary {
    w_star: f64,
    value: f64,
    pde_mean_withdrawal: f64,
    pde_expected_shortfall: f64,
    finest_grid: String,
    scan: Vec<(f64, f64)>,
}

impl SolveSummary {
    fn new(opt: &Optimum) -> Self {
        Self {
            w_star: opt.w_star,
            value: opt.value,
            pde_mean_withdrawal: opt.statistics.mean_withdrawal,
            pde_expected_shortfall: opt.statistics.expected_shortfall,
            finest_grid: format!("{}x{}", opt.policy.grid.n_x, opt.policy.grid.n_y),
            scan: opt.scan.clone(),
        }
    }
}

#[derive(Serialize)]
struct EvaluationSummary<'a> {
    w_star: f64,
    solve: Option<SolveSummary>,
    statistics: &'a SummaryStats,
}

fn load_policy(path: &Path) -> Result<Policy> {
    let file = File::open(path).with_context(|| format!("opening policy {}", path.display()))?;
    let (policy, _) = read_policy(BufReader::new(file))
        .with_context(|| format!("reading policy {}", path.display()))?;
    Ok(policy)
}

/// The configured stored policy, or a fresh solve written to `policy.bin`.
fn obtain_policy(cfg: &RunConfig, out: &Artifacts) -> Result<(Policy, Option<SolveSummary>)> {
    if let Some(path) = &cfg.simulation.policy {
        let policy = load_policy(path)?;
        policy.check_scenario(&cfg.scenario)?;
        log::info!(
            "loaded policy with W* = {} from {}",
            policy.w_star,
            path.display()
        );
        return Ok((policy, None));
    }
    let opt = solve(cfg)?;
    out.write_policy("policy.bin", &opt.policy)?;
    let summary = SolveSummary::new(&opt);
    Ok((opt.policy, Some(summary)))
}

fn run(command: Command) -> Result<PathBuf> {
    let (mode, opts) = match &command {
        Command::Solve(o) => ("solve", o),
        Command::Simulate(o) => ("simulate", o),
        Command::Backtest(o) => ("backtest", o),
        Command::Frontier(o) => ("frontier", o),
        Command::Benchmark(o) => ("benchmark", o),
    };
    let cfg = opts.resolve(mode == "backtest")?;
    let out = Artifacts::create(&cfg.output.dir, &cfg)?;
    log::info!(
        "{mode}: config {} -> {}",
        out.stamp().config_sha256,
        out.dir().display()
    );

    match command {
        Command::Solve(_) => {
            let opt = solve(&cfg)?;
            out.write_policy("policy.bin", &opt.policy)?;
            out.write_heatmaps(&opt.policy)?;
            out.write_summary(mode, &SolveSummary::new(&opt))?;
            println!(
                "W* = {:.3}  value = {:.4}  EW = {:.4}  ES = {:.4}",
                opt.w_star,
                opt.value,
                opt.statistics.mean_withdrawal,
                opt.statistics.expected_shortfall
            );
        }
        Command::Simulate(_) => {
            let (policy, solve) = obtain_policy(&cfg, &out)?;
            let stats = simulate(
                &cfg.market,
                &cfg.scenario,
                &policy,
                cfg.simulation.paths,
                cfg.simulation.seed,
            )?;
            out.write_percentiles(&stats, cfg.scenario.dt())?;
            out.write_heatmaps(&policy)?;
            out.write_summary(
                mode,
                &EvaluationSummary {
                    w_star: policy.w_star,
                    solve,
                    statistics: &stats,
                },
            )?;
            print_stats(&stats);
        }
        Command::Backtest(_) => {
            let Some(series) = configured_series(&cfg)? else {
                bail!("backtest needs a return series (--series or bootstrap.series)");
            };
            log::info!(
                "series of {} months starting {}",
                series.len(),
                series.label(0)
            );
            let (policy, solve) = obtain_policy(&cfg, &out)?;
            let stats = backtest(
                &policy,
                &cfg.scenario,
                &series,
                &cfg.bootstrap_config(),
                cfg.market.borrow_spread,
            )?;
            out.write_percentiles(&stats, cfg.scenario.dt())?;
            out.write_summary(
                mode,
                &EvaluationSummary {
                    w_star: policy.w_star,
                    solve,
                    statistics: &stats,
                },
            )?;
            print_stats(&stats);
        }
        Command::Frontier(_) => {
            let runs = run_frontier(&cfg)?;
            let points: Vec<FrontierPoint> = runs.iter().map(|r| r.point).collect();
            for r in &runs {
                out.write_policy(
                    &format!("policy_kappa_{}.bin", r.point.kappa),
                    &r.optimum.policy,
                )?;
            }
            out.write_frontier(&points)?;
            out.write_summary(mode, &points)?;
            println!(
                "{:>10} {:>10} {:>10} {:>10} {:>8} {:>10}",
                "kappa", "ES", "EW", "median W_T", "p", "W*"
            );
            for p in &points {
                println!(
                    "{:>10} {:>10.2} {:>10.3} {:>10.1} {:>8.3} {:>10.2}",
                    p.kappa,
                    p.expected_shortfall,
                    p.mean_withdrawal,
                    p.median_terminal_wealth,
                    p.mean_median_equity,
                    p.w_star
                );
            }
        }
        Command::Benchmark(_) => {
            let series = configured_series(&cfg)?;
            let rows = run_benchmark(&cfg, series.as_ref())?;
            out.write_benchmark(&rows)?;
            out.write_summary(mode, &rows)?;
            println!("{:>8} {:>10} {:>12}", "equity", "ES", "median W_T");
            for r in &rows {
                println!(
                    "{:>8.2} {:>10.2} {:>12.1}",
                    r.equity, r.expected_shortfall, r.median_terminal_wealth
                );
            }
        }
    }
    Ok(out.dir().to_path_buf())
}

fn print_stats(stats: &SummaryStats) {
    println!(
        "EW = {:.4} (se {:.4})  ES = {:.3} (se {:.3})  median W_T = {:.2}  mean median p = {:.4}",
        stats.mean_withdrawal,
        stats.mean_withdrawal_se,
        stats.expected_shortfall,
        stats.expected_shortfall_se,
        stats.median_terminal_wealth,
        stats.mean_median_equity
    );
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(dir) => log::info!("outputs in {}", dir.display()),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
