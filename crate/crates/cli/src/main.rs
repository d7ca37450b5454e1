//! `superflow`: spectral data, moments, particle ensembles and statistical
//! verification for branching diffusions.
//!
//! Exit status: 0 success or passing verdict, 2 failing verdict, 3 regime
//! gate refusal, 64 usage or config error, 1 any other error.

mod output;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use superflow::grid::{Boundary, Grid, GridFunction, Interval};
use superflow::lln::{self, ExperimentConfig, LlnSpec, Report, Table, TestFunction, VagueSpec};
use superflow::models::{self, Model, ModelConfig};
use superflow::particles::{init_threads, run_ensemble, SimConfig, MAX_RATE_STEP};
use superflow::{pde, Error};

use output::Artifacts;

#[derive(Parser, Debug)]
#[command(name = "superflow", version, about = "Branching diffusions: spectra, moments, particle ensembles and limit-theorem checks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Serialize)]
struct Global {
    /// Model config (JSON); takes precedence over --model.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "superflow-out")]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Grid nodes for spectral and PDE solves.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Time step: particle step for simulations, PDE step otherwise.
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Registry model name (see `models`).
    #[arg(long, global = true, default_value = "wright-fisher")]
    model: String,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    length: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List the built-in models.
    Models,
    /// Principal eigenvalue, ground states and criticality class.
    Spectral,
    /// First moments from the PDE and the weighted-mass variance formula.
    Moments(MomentsArgs),
    /// Particle ensembles of the original or transformed system.
    Simulate(SimulateArgs),
    /// Coefficients of the ground-state transformed model.
    Transform(TransformArgs),
    /// Statistical and numerical checks with a pass/fail verdict.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Serialize)]
struct MomentsArgs {
    /// Comma-separated times.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    times: Vec<f64>,
    /// Test function `g` in `E⟨X_t, g⟩`, an expression in x.
    #[arg(long, default_value = "1")]
    test_function: String,
    /// Also write `S_t g` on the grid, one row per time.
    #[arg(long)]
    snapshots: bool,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    times: Vec<f64>,
    /// Particle level.
    #[arg(long, default_value_t = 100.0)]
    n: f64,
    /// Simulate the ground-state transformed model instead.
    #[arg(long)]
    transformed: bool,
    #[arg(long, default_value = "1")]
    test_function: String,
    /// Write every particle position.
    #[arg(long)]
    dump_positions: bool,
    /// Largest number of position rows a dump may hold.
    #[arg(long, default_value_t = 1_000_000)]
    max_dump: usize,
}

#[derive(Args, Debug, Serialize)]
struct TransformArgs {
    /// Time at which the time-dependent coefficients are evaluated.
    #[arg(long, default_value_t = 0.0)]
    time: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Experiment {
    Martingale,
    Variance,
    Lln,
    Vague,
    Extinction,
    Scaling,
    Laplace,
    Consistency,
    Zeroing,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    experiment: Experiment,
    /// Comma-separated observation times; each experiment has its own default.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    /// Particle level.
    #[arg(long)]
    n: Option<f64>,
    /// Test the untransformed mass in the martingale experiment.
    #[arg(long)]
    untransformed: bool,
    /// Region `lo,hi` for the extinction experiment.
    #[arg(long, value_delimiter = ',', value_name = "LO,HI")]
    region: Option<Vec<f64>>,
    /// Histogram bins for the density comparison.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Conditioning lag of the density comparison.
    #[arg(long, default_value_t = 0.5)]
    lag: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_threads();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Regime { .. } => 3,
        Error::Config(_) | Error::Parse { .. } | Error::TestFunction(_) => 64,
        _ => 1,
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Solver(format!("i/o: {e}"))
}

fn model_config(g: &Global) -> Result<ModelConfig, Error> {
    if let Some(path) = &g.config {
        let src = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        return ModelConfig::from_json(&src);
    }
    let mut params = BTreeMap::new();
    for (k, v) in [("gamma", g.gamma), ("beta", g.beta), ("alpha", g.alpha), ("length", g.length)] {
        if let Some(v) = v {
            params.insert(k.to_string(), v);
        }
    }
    models::by_name(&g.model, &params)
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let g = &cli.global;
    if let Command::Models = cli.command {
        let list: Vec<Value> = models::registry()
            .into_iter()
            .map(|(name, params, cfg)| {
                json!({
                    "name": name,
                    "parameters": params.into_iter().collect::<BTreeMap<_, _>>(),
                    "expected": cfg.expected,
                    "lln_applicable": cfg.lln_applicable,
                    "config": cfg,
                })
            })
            .collect();
        emit(&format!("{}\n", serde_json::to_string_pretty(&list).expect("registry serializes")));
        return Ok(0);
    }
    let cfg = model_config(g)?;
    let model = cfg.build()?;
    let mut art = Artifacts::new();
    art.json("model.json", &cfg);
    let (name, options, code) = match &cli.command {
        Command::Models => unreachable!("handled above"),
        Command::Spectral => ("spectral", Value::Null, spectral(g, &model, &mut art)?),
        Command::Moments(a) => ("moments", to_value(a), moments(g, &model, a, &mut art)?),
        Command::Simulate(a) => ("simulate", to_value(a), simulate(g, &model, a, &mut art)?),
        Command::Transform(a) => ("transform", to_value(a), transform(g, &model, a, &mut art)?),
        Command::Verify(a) => ("verify", to_value(a), verify(g, &model, a, &mut art)?),
    };
    let settings = json!({ "command": name, "global": to_value(g), "options": options, "model": cfg });
    let manifest = art.write(&g.out, name, g.seed, &settings).map_err(io)?;
    eprintln!("wrote {}", manifest.display());
    Ok(code)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("options serialize")
}

fn spectral(g: &Global, model: &Model, art: &mut Artifacts) -> Result<u8, Error> {
    let t = model.spectral(g.grid.unwrap_or(2001))?;
    let mut table = Table { name: "truncations".into(), header: vec!["lo".into(), "hi".into(), "lambda".into(), "integral_phi_phi_tilde".into(), "residual".into()], rows: Vec::new() };
    for r in &t.table {
        table.rows.push(vec![r.lo, r.hi, r.lambda, r.integral, r.residual]);
    }
    let summary = json!({
        "model": model.name(),
        "lambda_c": t.lambda_c,
        "lambda_adjoint": t.lambda_adjoint,
        "residual": t.residual,
        "pointwise_residual": t.pointwise_residual,
        "criticality": t.criticality,
        "monotone": t.monotone,
        "expected": model.config.expected,
        "truncation_table": t.table.iter().map(|r| json!({
            "lo": r.lo, "hi": r.hi, "lambda": r.lambda, "integral": r.integral, "residual": r.residual, "iterations": r.iterations,
        })).collect::<Vec<_>>(),
    });
    let grid = t.grid();
    let mut gs = Table { name: "ground_states".into(), header: vec!["x".into(), "phi".into(), "phi_tilde".into()], rows: Vec::new() };
    for i in 0..grid.nodes {
        gs.rows.push(vec![grid.x(i), t.phi_c.values[i], t.phi_tilde_c.values[i]]);
    }
    emit(&format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serializes")));
    art.json("spectral.json", &summary);
    art.table(&table);
    art.table(&gs);
    Ok(0)
}

fn moments(g: &Global, model: &Model, a: &MomentsArgs, art: &mut Artifacts) -> Result<u8, Error> {
    let grid = Grid::on(model.truncation(), g.grid.unwrap_or(801))?;
    let f = TestFunction::Expr(a.test_function.clone()).on(grid)?;
    let f = GridFunction::new(grid, f.values, Boundary::DirichletZero)?;
    let flow = pde::expectation_flow(&model.q, &f, &a.times, g.dt)?;
    let triple = model.spectral(g.grid.unwrap_or(801))?;
    let mut table = Table { name: "moments".into(), header: vec!["t".into(), "mean".into(), "variance_formula".into(), "variance_bound".into()], rows: Vec::new() };
    let mut note = None;
    for (k, &t) in a.times.iter().enumerate() {
        let mean = model.mu.pair_grid(&flow.snapshots[k]);
        let (v, b) = match pde::variance_weighted_mass(&model.q, &triple, &model.mu, t, g.dt) {
            Ok(vm) => (vm.value, vm.bound),
            Err(e @ (Error::NotApplicable(_) | Error::Regime { .. })) => {
                note = Some(e.to_string());
                (f64::NAN, f64::NAN)
            }
            Err(e) => return Err(e),
        };
        table.rows.push(vec![t, mean, v, b]);
    }
    if let Some(n) = note {
        eprintln!("variance columns not available: {n}");
    }
    emit(&table.to_csv());
    art.table(&table);
    if a.snapshots {
        let mut header = vec!["t".to_string()];
        header.extend(grid.xs().iter().map(|x| lln::format_number(*x)));
        let rows = a.times.iter().zip(&flow.snapshots).map(|(t, u)| std::iter::once(*t).chain(u.values.iter().copied()).collect()).collect();
        art.table(&Table { name: "snapshots".into(), header, rows });
    }
    Ok(0)
}

fn simulate(g: &Global, model: &Model, a: &SimulateArgs, art: &mut Artifacts) -> Result<u8, Error> {
    let eval = TestFunction::Expr(a.test_function.clone()).evaluator()?;
    let (q, mu) = if a.transformed {
        let gs = lln::ground_state(model, g.grid.unwrap_or(801), false)?;
        (gs.q_h, gs.mu_h)
    } else {
        (model.q.clone(), model.mu.clone())
    };
    let horizon = a.times.last().copied().unwrap_or(0.0);
    let mut sim = SimConfig::new(a.n, horizon, g.seed, g.replicates.unwrap_or(100)).with_snapshots(&a.times);
    sim.dt = g.dt.unwrap_or(MAX_RATE_STEP / a.n);
    let dump = a.dump_positions;
    let runs = run_ensemble(&q, model.truncation(), &mu, &sim, |_, snaps| {
        let obs: Vec<[f64; 3]> = snaps
            .iter()
            .map(|c| [c.total_mass(), c.alive_count() as f64, c.positions.iter().map(|&x| eval(x)).sum::<f64>() / c.level])
            .collect();
        let pos: Vec<Vec<f64>> = if dump { snaps.iter().map(|c| c.positions.clone()).collect() } else { Vec::new() };
        (obs, pos)
    })?;
    let mut table = Table { name: "simulate".into(), header: vec!["replicate".into(), "t".into(), "mass".into(), "alive".into(), "pairing".into()], rows: Vec::new() };
    for (r, (obs, _)) in runs.iter().enumerate() {
        for (k, o) in obs.iter().enumerate() {
            table.rows.push(vec![r as f64, a.times[k], o[0], o[1], o[2]]);
        }
    }
    art.table(&table);
    if dump {
        let total: usize = runs.iter().map(|(_, p)| p.iter().map(Vec::len).sum::<usize>()).sum();
        if total > a.max_dump {
            return Err(Error::Config(format!("position dump of {total} rows exceeds --max-dump {}", a.max_dump)));
        }
        let mut t = Table { name: "positions".into(), header: vec!["replicate".into(), "t".into(), "x".into()], rows: Vec::with_capacity(total) };
        for (r, (_, pos)) in runs.iter().enumerate() {
            for (k, p) in pos.iter().enumerate() {
                t.rows.extend(p.iter().map(|&x| vec![r as f64, a.times[k], x]));
            }
        }
        art.table(&t);
    }
    eprintln!("{} replicates, {} rows", runs.len(), table.rows.len());
    Ok(0)
}

fn transform(g: &Global, model: &Model, a: &TransformArgs, art: &mut Artifacts) -> Result<u8, Error> {
    let rep = lln::h_transform_zeroing(model, g.grid.unwrap_or(2001), a.time)?;
    emit_report(&rep, art);
    Ok(0)
}

fn verify(g: &Global, model: &Model, a: &VerifyArgs, art: &mut Artifacts) -> Result<u8, Error> {
    use Experiment::*;
    let default_times: &[f64] = match a.experiment {
        Martingale => &[0.5, 1.0, 2.0, 4.0],
        Variance => &[1.0, 2.0, 4.0],
        Lln | Vague => &[1.0, 2.0, 4.0, 8.0],
        Extinction => &[1.0, 2.0, 5.0, 10.0, 20.0],
        Scaling => &[0.0, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0],
        Laplace | Zeroing => &[1.0],
        Consistency => &[1.0, 2.0],
    };
    let times = a.times.clone().unwrap_or_else(|| default_times.to_vec());
    let n = a.n.unwrap_or(match a.experiment {
        Lln | Vague => 200.0,
        Martingale | Variance => 200.0,
        _ => 50.0,
    });
    let mut cfg = ExperimentConfig::new(n, g.replicates.unwrap_or(400), g.seed, times.clone());
    cfg.dt = g.dt;
    if let Some(grid) = g.grid {
        cfg.grid_size = grid;
    }
    let trunc0 = model.q.domain().truncations[0];
    let rep = match a.experiment {
        Martingale => lln::martingale_check(model, &cfg, !a.untransformed)?,
        Variance => lln::variance_check(model, &cfg)?,
        Lln => lln::lln_ratio_experiment(model, &cfg, &LlnSpec::default())?,
        Vague => {
            let spec = VagueSpec { bins: a.bins, lag: a.lag, ..VagueSpec::default() };
            lln::vague_limit_density(model, &cfg, &spec)?
        }
        Extinction => {
            let region = match &a.region {
                Some(r) if r.len() == 2 => Interval::new(r[0], r[1])?,
                Some(r) => return Err(Error::Config(format!("--region takes two values lo,hi, got {}", r.len()))),
                None => centre_half(trunc0)?,
            };
            lln::local_extinction_check(model, region, &cfg)?
        }
        Scaling => {
            let g = TestFunction::smooth_indicator(lerp(trunc0, 0.125), lerp(trunc0, 0.875));
            lln::scaling_dichotomy(model, &[], &g, &cfg)?
        }
        Laplace => lln::laplace_cross_validation(model, &default_tests(trunc0), times[times.len() - 1], &cfg)?,
        Consistency => {
            let fs = vec![TestFunction::Expr("1".into()), TestFunction::Expr("x".into()), TestFunction::smooth_indicator(lerp(trunc0, 0.25), lerp(trunc0, 0.75))];
            lln::h_transform_consistency(model, &fs, &cfg)?
        }
        Zeroing => lln::h_transform_zeroing(model, g.grid.unwrap_or(2001), times[0])?,
    };
    emit_report(&rep, art);
    if let Some(s) = &rep.summary {
        art.json("summary.json", s);
    }
    Ok(if rep.pass { 0 } else { 2 })
}

fn lerp(iv: Interval, s: f64) -> f64 {
    iv.lo + s * (iv.hi - iv.lo)
}

fn centre_half(iv: Interval) -> Result<Interval, Error> {
    Interval::new(lerp(iv, 0.25), lerp(iv, 0.75))
}

/// A smoothed indicator of the middle of `iv` and a Gaussian bump centred
/// in `iv`.
fn default_tests(iv: Interval) -> Vec<TestFunction> {
    let c = lerp(iv, 0.5);
    let w = 0.25 * iv.len();
    vec![
        TestFunction::smooth_indicator(lerp(iv, 0.25), lerp(iv, 0.75)),
        TestFunction::Expr(format!("2*exp(-((x - {c})/{w})^2)")),
    ]
}

fn emit_report(rep: &Report, art: &mut Artifacts) {
    let verdict = json!({
        "experiment": rep.experiment,
        "model": rep.model,
        "pass": rep.pass,
        "metrics": rep.metrics,
        "notes": rep.notes,
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&verdict).expect("verdict serializes")));
    for n in &rep.notes {
        eprintln!("note: {n}");
    }
    art.json("verdict.json", &verdict);
    for t in &rep.tables {
        art.table(t);
    }
}

/// Writes to stdout; a closed pipe (`superflow models | head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}
