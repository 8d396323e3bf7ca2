//! Acceptance suite: one PASS/FAIL line per reproduction target.
//!
//! Runs as a plain binary (`harness = false`). Set `ACCEPTANCE_ONLY` to a
//! comma list of target names (e.g. `compensator,determinism`) to run a subset.
//! Failures of targets carrying a documented gap are reported but do not fail
//! the process; any other failure, or any error, exits non-zero.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use drawdown_core::rng::Substreams;
use drawdown_core::{
    backtest, optimize_wstar, refine_wstar, run_benchmark, simulate, AuxiliarySolver,
    BootstrapConfig, FixedPolicy, GridConfig, MarketModel, Month, Optimum, PeriodSampler,
    ReturnSeries, RunConfig, Scenario, SummaryStats, WStarSearch,
};
use sha2::{Digest, Sha256};

const MC_PATHS: usize = 2_560_000;
const MC_SEED: u64 = 20_200_101;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

type Check = fn(&mut Lab) -> drawdown_core::Result<Verdict>;

struct Target {
    name: &'static str,
    check: Check,
    /// Why a failure is expected, if it is.
    known_gap: Option<&'static str>,
}

fn within_rel(value: f64, reference: f64, tol: f64) -> bool {
    (value - reference).abs() <= tol * reference.abs()
}

fn rel(value: f64, reference: f64) -> f64 {
    (value - reference) / reference.abs()
}

/// Expensive solves and simulations shared between targets.
struct Lab {
    model: MarketModel,
    optima: HashMap<(u64, u64, u64), Optimum>,
    runs: HashMap<(u64, u64, u64), SummaryStats>,
    /// Base case refined on 1024 x 1024, with its Monte Carlo statistics.
    fine: Option<(Optimum, SummaryStats)>,
}

impl Lab {
    fn new() -> Self {
        Self {
            model: MarketModel::crsp_1926_2019(),
            optima: HashMap::new(),
            runs: HashMap::new(),
            fine: None,
        }
    }

    fn scenario(kappa: f64, q_min: f64, q_max: f64) -> Scenario {
        Scenario {
            kappa,
            q_min,
            q_max,
            ..Scenario::default()
        }
    }

    fn ladder() -> [GridConfig; 2] {
        [GridConfig::square(256), GridConfig::square(512)]
    }

    /// Optimal controls on the 512 x 512 grid.
    fn optimum(&mut self, kappa: f64, q_min: f64, q_max: f64) -> drawdown_core::Result<&Optimum> {
        let key = (kappa.to_bits(), q_min.to_bits(), q_max.to_bits());
        if !self.optima.contains_key(&key) {
            let started = Instant::now();
            let sc = Self::scenario(kappa, q_min, q_max);
            let opt = optimize_wstar(&self.model, &sc, &Self::ladder(), &WStarSearch::default())?;
            eprintln!(
                "  solved kappa={kappa} q=[{q_min},{q_max}]: W*={:.2} in {:.0}s",
                opt.w_star,
                started.elapsed().as_secs_f64()
            );
            self.optima.insert(key, opt);
        }
        Ok(&self.optima[&key])
    }

    /// Monte Carlo statistics of the 512 x 512 optimal policy.
    fn evaluate(
        &mut self,
        kappa: f64,
        q_min: f64,
        q_max: f64,
    ) -> drawdown_core::Result<SummaryStats> {
        let key = (kappa.to_bits(), q_min.to_bits(), q_max.to_bits());
        if !self.runs.contains_key(&key) {
            let sc = Self::scenario(kappa, q_min, q_max);
            let model = self.model;
            let policy = self.optimum(kappa, q_min, q_max)?.policy.clone();
            let stats = simulate(&model, &sc, &policy, MC_PATHS, MC_SEED)?;
            self.runs.insert(key, stats);
        }
        Ok(self.runs[&key].clone())
    }

    fn fine_base_case(&mut self) -> drawdown_core::Result<(Optimum, SummaryStats)> {
        if self.fine.is_none() {
            let sc = Self::scenario(1.0, 35.0, 60.0);
            let seed = self.optimum(1.0, 35.0, 60.0)?.w_star;
            let started = Instant::now();
            let fine = refine_wstar(&self.model, &sc, &GridConfig::square(1024), seed, 4.0, 0.1)?;
            eprintln!(
                "  refined on 1024x1024: W*={:.2} in {:.0}s",
                fine.w_star,
                started.elapsed().as_secs_f64()
            );
            let stats = simulate(&self.model, &sc, &fine.policy, MC_PATHS, MC_SEED)?;
            self.fine = Some((fine, stats));
        }
        Ok(self.fine.clone().expect("just computed"))
    }
}

fn compensator(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let started = Instant::now();
    let n = 10_000_000u64;
    let mut detail = String::new();
    let mut pass = true;
    for (label, asset, stream) in [("stock", lab.model.stock, 0), ("bond", lab.model.bond, 1)] {
        let law = asset.jump;
        let closed = law.compensator()?;
        let mut rng = Substreams::new(4242).path(stream);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = law.sample_log_jump(&mut rng).exp() - 1.0;
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / (n as f64 - 1.0)).sqrt();
        let ok = (closed - mean).abs() <= 3.0 * se;
        pass &= ok;
        write!(
            detail,
            "{label} closed {closed:.6} vs sampled {mean:.6} (se {se:.1e}); "
        )
        .unwrap();
    }
    let secs = started.elapsed().as_secs_f64();
    pass &= secs < 30.0;
    write!(detail, "{secs:.1}s").unwrap();
    Ok(Verdict::new(pass, detail))
}

fn constant_weight_benchmarks(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let reference = [
        (0.0, -469.4, 127.4),
        (0.2, -288.6, 579.3),
        (0.4, -295.5, 1137.0),
        (0.6, -436.0, 1762.0),
        (0.8, -630.6, 2374.0),
    ];
    let sc = Lab::scenario(1.0, 40.0, 40.0);
    let mut pass = true;
    let mut detail = String::new();
    for (equity, es, median) in reference {
        let fixed = FixedPolicy::new(equity, 40.0)?;
        let stats = simulate(&lab.model, &sc, &fixed, MC_PATHS, MC_SEED)?;
        let ok = within_rel(stats.expected_shortfall, es, 0.02)
            && within_rel(stats.median_terminal_wealth, median, 0.01);
        pass &= ok;
        write!(
            detail,
            "p={equity}: ES {:.1} ({:+.1}%), median {:.1} ({:+.1}%); ",
            stats.expected_shortfall,
            100.0 * rel(stats.expected_shortfall, es),
            stats.median_terminal_wealth,
            100.0 * rel(stats.median_terminal_wealth, median)
        )
        .unwrap();
    }
    Ok(Verdict::new(pass, detail))
}

fn grid_convergence(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let (pde_512, pde_1024) = ((-16.788, 49.7470), (-9.3609, 49.8513));
    let reference_w_star = 204.6;
    let sc = Lab::scenario(1.0, 35.0, 60.0);
    let coarse = lab.optimum(1.0, 35.0, 60.0)?.clone();
    let mc_coarse = lab.evaluate(1.0, 35.0, 60.0)?;
    let (fine, mc_fine) = lab.fine_base_case()?;

    let rows_ok = |opt: &Optimum, (es, ew): (f64, f64)| {
        within_rel(opt.statistics.expected_shortfall, es, 0.05)
            && within_rel(opt.statistics.mean_withdrawal, ew, 0.05)
    };
    let pde_ok = rows_ok(&coarse, pde_512) && rows_ok(&fine, pde_1024);
    let gap = |opt: &Optimum, mc: &SummaryStats| {
        (mc.expected_shortfall - opt.statistics.expected_shortfall).abs()
    };
    let approaching = gap(&fine, &mc_fine) <= gap(&coarse, &mc_coarse);
    let w_ok = (fine.w_star - reference_w_star).abs() <= 3.0;

    // Where the shortfall term alone peaks, for comparison with the reference W*.
    let solver = AuxiliarySolver::new(&lab.model, &sc, &GridConfig::square(512))?;
    let (w_shortfall, _) = drawdown_core::dp::golden_section_max(
        |w| {
            solver
                .solve(w, true)
                .map(|s| s.statistics.expect("tracked").expected_shortfall)
        },
        100.0,
        300.0,
        0.5,
    )?;
    let at_peak = solver
        .solve(w_shortfall, true)?
        .statistics
        .expect("tracked");

    let detail = format!(
        "512: PDE ES {:.2} EW {:.3}, MC ES {:.2} EW {:.3}, W* {:.2}; \
         1024: PDE ES {:.2} EW {:.3}, MC ES {:.2} EW {:.3}, W* {:.2} (reference 204.6); \
         PDE rows {}, MC-PDE ES gap {:.2} -> {:.2} {}, W* {}; \
         shortfall term alone peaks at W* {:.1} on 512, where PDE ES {:.2} EW {:.3}",
        coarse.statistics.expected_shortfall,
        coarse.statistics.mean_withdrawal,
        mc_coarse.expected_shortfall,
        mc_coarse.mean_withdrawal,
        coarse.w_star,
        fine.statistics.expected_shortfall,
        fine.statistics.mean_withdrawal,
        mc_fine.expected_shortfall,
        mc_fine.mean_withdrawal,
        fine.w_star,
        if pde_ok { "match" } else { "differ" },
        gap(&coarse, &mc_coarse),
        gap(&fine, &mc_fine),
        if approaching { "shrinks" } else { "grows" },
        if w_ok { "matches" } else { "differs" },
        w_shortfall,
        at_peak.expected_shortfall,
        at_peak.mean_withdrawal,
    );
    Ok(Verdict::new(pde_ok && approaching && w_ok, detail))
}

fn constant_withdrawal(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let stats = lab.evaluate(1.0, 40.0, 40.0)?;
    let w_star = lab.optimum(1.0, 40.0, 40.0)?.w_star;
    let es_ok = within_rel(stats.expected_shortfall, -196.1, 0.05);
    let median_ok = within_rel(stats.median_terminal_wealth, 716.6, 0.02);
    let equity_ok = (stats.mean_median_equity - 0.357).abs() <= 0.02;
    let detail = format!(
        "ES {:.1} ({:+.1}%, {}), median W_T {:.1} ({:+.1}%, {}), mean median equity {:.3} ({}), W* {:.1}",
        stats.expected_shortfall,
        100.0 * rel(stats.expected_shortfall, -196.1),
        ok_word(es_ok),
        stats.median_terminal_wealth,
        100.0 * rel(stats.median_terminal_wealth, 716.6),
        ok_word(median_ok),
        stats.mean_median_equity,
        ok_word(equity_ok),
        w_star
    );
    Ok(Verdict::new(es_ok && median_ok && equity_ok, detail))
}

fn ok_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "out of tolerance"
    }
}

const FRONTIER_REFERENCE: [(f64, f64, f64); 4] = [
    (0.2, -177.9, 53.24),
    (0.5, -50.86, 51.33),
    (1.0, -4.730, 49.89),
    (5.0, 25.79, 47.67),
];

fn frontier_points(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let mut rows_ok = true;
    let mut detail = String::new();
    let mut points = Vec::new();
    for (kappa, es, ew) in FRONTIER_REFERENCE {
        let stats = lab.evaluate(kappa, 35.0, 60.0)?;
        let ok = within_rel(stats.expected_shortfall, es, 0.05)
            && within_rel(stats.mean_withdrawal, ew, 0.01);
        rows_ok &= ok;
        points.push((stats.expected_shortfall, stats.mean_withdrawal));
        write!(
            detail,
            "k={kappa}: ES {:.2} (ref {es}), EW {:.3} (ref {ew}); ",
            stats.expected_shortfall, stats.mean_withdrawal
        )
        .unwrap();
    }
    let monotone = points
        .windows(2)
        .all(|p| p[1].0 > p[0].0 && p[1].1 < p[0].1);
    write!(
        detail,
        "rows {}, monotone {}",
        if rows_ok { "match" } else { "differ" },
        monotone
    )
    .unwrap();
    Ok(Verdict::new(rows_ok && monotone, detail))
}

fn variable_beats_constant(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let constant = lab.evaluate(1.0, 40.0, 40.0)?;
    let constant_ok = (constant.mean_withdrawal - 40.0).abs() < 1e-9
        && within_rel(constant.expected_shortfall, -196.1, 0.05);
    let mut detail = format!(
        "q=40: EW {:.2} ES {:.1}; ",
        constant.mean_withdrawal, constant.expected_shortfall
    );
    let mut found = false;
    for kappa in [1.0, 2.5, 5.0, 10.0] {
        let stats = lab.evaluate(kappa, 40.0, 65.0)?;
        let hit = stats.mean_withdrawal >= 53.0 && stats.expected_shortfall >= -210.0;
        found |= hit;
        write!(
            detail,
            "k={kappa}: EW {:.2} ES {:.1}{}; ",
            stats.mean_withdrawal,
            stats.expected_shortfall,
            if hit { " *" } else { "" }
        )
        .unwrap();
    }
    Ok(Verdict::new(found && constant_ok, detail))
}

fn bang_bang(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let mut pass = true;
    let mut detail = String::new();
    for (kappa, _, _) in FRONTIER_REFERENCE {
        let stats = lab.evaluate(kappa, 35.0, 60.0)?;
        pass &= stats.bang_bang_fraction >= 0.95;
        write!(
            detail,
            "512, k={kappa}: {:.2}% at a bound; ",
            100.0 * stats.bang_bang_fraction
        )
        .unwrap();
    }
    let (_, fine) = lab.fine_base_case()?;
    pass &= fine.bang_bang_fraction >= 0.95;
    write!(
        detail,
        "1024, k=1: {:.2}% at a bound",
        100.0 * fine.bang_bang_fraction
    )
    .unwrap();
    Ok(Verdict::new(pass, detail))
}

/// Monthly returns drawn from the model, long enough that resampling error
/// dominates over the sample's own estimation error.
fn model_series(model: &MarketModel, months: usize) -> drawdown_core::Result<ReturnSeries> {
    let sampler = PeriodSampler::new(model, 1.0 / 12.0);
    let mut rng = Substreams::new(1926).path(0);
    let (stock, bond): (Vec<f64>, Vec<f64>) = (0..months)
        .map(|_| {
            let r = sampler.sample(&mut rng, false);
            (r.stock_gross, r.bond_gross)
        })
        .unzip();
    ReturnSeries::new(Month { year: 1, month: 1 }, stock, bond)
}

fn bootstrap_consistency(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let paths = 400_000;
    let sc = Lab::scenario(1.0, 35.0, 60.0);
    let policy = lab.optimum(1.0, 35.0, 60.0)?.policy.clone();
    let series = model_series(&lab.model, 2_400_000)?;
    let direct = simulate(&lab.model, &sc, &policy, paths, MC_SEED)?;
    let mut boots = Vec::new();
    for blocksize in [0.25, 0.5, 1.0] {
        let cfg = BootstrapConfig {
            blocksize_years: blocksize,
            resamples: paths,
            seed: 77,
            ..BootstrapConfig::default()
        };
        boots.push((
            blocksize,
            backtest(&policy, &sc, &series, &cfg, lab.model.borrow_spread)?,
        ));
    }
    let reference = &boots[1].1;
    let se = reference
        .expected_shortfall_se
        .hypot(direct.expected_shortfall_se);
    let es_ok = (reference.expected_shortfall - direct.expected_shortfall).abs() <= 3.0 * se;
    let ew_ok = (reference.mean_withdrawal - direct.mean_withdrawal).abs() <= 0.2;
    let ews: Vec<f64> = boots.iter().map(|b| b.1.mean_withdrawal).collect();
    let (lo, hi) = ews
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread = (hi - lo) / lo;
    let robust = spread < 0.005;
    let mut detail = format!(
        "direct ES {:.2} EW {:.3}; bootstrap (b=0.5y) ES {:.2} EW {:.3}, ES gap {:.2} vs 3se {:.2}; ",
        direct.expected_shortfall,
        direct.mean_withdrawal,
        reference.expected_shortfall,
        reference.mean_withdrawal,
        (reference.expected_shortfall - direct.expected_shortfall).abs(),
        3.0 * se
    );
    for (b, stats) in &boots {
        write!(detail, "b={b}: EW {:.3}; ", stats.mean_withdrawal).unwrap();
    }
    write!(detail, "EW spread {:.3}%", 100.0 * spread).unwrap();
    Ok(Verdict::new(es_ok && ew_ok && robust, detail))
}

/// Every mode run under a given worker count, serialized for byte comparison.
fn all_modes(lab: &Lab, threads: usize) -> drawdown_core::Result<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| drawdown_core::Error::Config(e.to_string()))?;
    pool.install(|| {
        let sc = Lab::scenario(1.0, 35.0, 60.0);
        let search = WStarSearch {
            scan_step: 50.0,
            ..WStarSearch::default()
        };
        let ladder = [GridConfig::square(64), GridConfig::square(128)];
        let opt = optimize_wstar(&lab.model, &sc, &ladder, &search)?;
        let sim = simulate(&lab.model, &sc, &opt.policy, 50_000, 3)?;
        let series = model_series(&lab.model, 12_000)?;
        let cfg = BootstrapConfig {
            resamples: 50_000,
            ..BootstrapConfig::default()
        };
        let boot = backtest(&opt.policy, &sc, &series, &cfg, 0.0)?;
        let mut run = RunConfig::default();
        run.simulation.paths = 50_000;
        run.bootstrap.resamples = 20_000;
        let bench = run_benchmark(&run, Some(&series))?;
        let mut policy = Vec::new();
        drawdown_core::write_policy(&opt.policy, serde_json::Value::Null, &mut policy)?;
        let text = serde_json::to_string(&(opt.w_star, opt.value, &opt.scan, &sim, &boot, &bench))?;
        Ok(format!("{text}{}", hex::encode(Sha256::digest(&policy))))
    })
}

fn determinism(lab: &mut Lab) -> drawdown_core::Result<Verdict> {
    let single = all_modes(lab, 1)?;
    let many = all_modes(lab, 4)?;
    let again = all_modes(lab, 4)?;
    let pass = single == many && many == again;
    Ok(Verdict::new(
        pass,
        format!(
            "solve, simulate, backtest and benchmark outputs {} under 1 and 4 workers ({} bytes compared)",
            if pass { "identical" } else { "differ" },
            single.len()
        ),
    ))
}

const STABILIZATION_GAP: &str = "with the withdrawal fixed, allocations where shortfall is out of reach \
     are set by the tiny terminal-wealth stabilization weight, so the median and equity fraction are not \
     pinned by the objective, see the decisions ledger";

const INTERPOLATION_GAP: &str = "stored tables switch between the bounds within one or two nodes, but \
     linear interpolation across the switching cell leaves 5-10% of paths per date in between, see the decisions ledger";

const SHORTFALL_GAP: &str =
    "the reference W* and ES rows sit where the shortfall term alone peaks; \
     maximising the full objective moves W* and the PDE shortfall, see the decisions ledger";

fn targets() -> Vec<Target> {
    vec![
        Target {
            name: "compensator",
            check: compensator,
            known_gap: None,
        },
        Target {
            name: "constant-weight",
            check: constant_weight_benchmarks,
            known_gap: None,
        },
        Target {
            name: "convergence",
            check: grid_convergence,
            known_gap: Some(SHORTFALL_GAP),
        },
        Target {
            name: "constant-withdrawal",
            check: constant_withdrawal,
            known_gap: Some(STABILIZATION_GAP),
        },
        Target {
            name: "frontier",
            check: frontier_points,
            known_gap: Some(SHORTFALL_GAP),
        },
        Target {
            name: "variable-withdrawal",
            check: variable_beats_constant,
            known_gap: None,
        },
        Target {
            name: "bang-bang",
            check: bang_bang,
            known_gap: Some(INTERPOLATION_GAP),
        },
        Target {
            name: "bootstrap",
            check: bootstrap_consistency,
            known_gap: None,
        },
        Target {
            name: "determinism",
            check: determinism,
            known_gap: None,
        },
    ]
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|t| t.trim().to_string()).collect());
    let mut lab = Lab::new();
    let (mut passed, mut total, mut unexpected) = (0, 0, 0);
    for target in targets() {
        if only
            .as_ref()
            .is_some_and(|o| !o.iter().any(|n| n == target.name))
        {
            continue;
        }
        total += 1;
        let started = Instant::now();
        let outcome = (target.check)(&mut lab);
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(v) if v.pass => {
                passed += 1;
                println!("PASS {}: {} [{secs:.0}s]", target.name, v.detail);
            }
            Ok(v) => {
                let note = match target.known_gap {
                    Some(why) => format!(" (known gap: {why})"),
                    None => {
                        unexpected += 1;
                        String::new()
                    }
                };
                println!("FAIL {}: {}{note} [{secs:.0}s]", target.name, v.detail);
            }
            Err(e) => {
                unexpected += 1;
                println!("FAIL {}: error: {e} [{secs:.0}s]", target.name);
            }
        }
    }
    println!("acceptance: {passed}/{total} passed, {unexpected} unexpected failures");
    if unexpected > 0 {
        std::process::exit(1);
    }
}
