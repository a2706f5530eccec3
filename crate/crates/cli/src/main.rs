use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use laughlin_core::fields::{self, coulomb_metric};
use laughlin_core::meanfield::{
    bound_checks, solve_free_energy, BoundReport, ResidualReport, SolutionSummary,
};
use laughlin_core::pipeline::{self, mean_field_chain, ScenarioConfig};
use laughlin_core::plasma::{decay_check, incompressibility_check, run_chains};
use laughlin_core::potentials::{validate_assumption, Potential};
use laughlin_core::quasiholes::{build_continuous, enclosing_radius, to_polynomial};
use laughlin_core::solve_bathtub;

#[derive(Parser)]
#[command(name = "laughlin", version, about = "Bathtub, quasi-hole and plasma runs for Laughlin trial states")]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output`, then `out/<name>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the bathtub problem for the scenario potential.
    Bathtub,
    /// Minimize a mean-field functional with the scenario's quasi-hole layout.
    MfSolve {
        #[arg(long, value_enum, default_value_t = Functional::Electrostatic)]
        functional: Functional,
    },
    /// Build the continuous quasi-hole charge and its discrete layout.
    Inverse,
    /// Monte Carlo sampling of the plasma with the scenario's layout.
    Sample,
    /// Re-run the checks on the artifacts of a scenario directory.
    Verify {
        /// Scenario output directory; defaults to `--out`.
        dir: Option<PathBuf>,
    },
    /// Mean-field scaling study over the scenario's N list.
    Scaling,
    /// Full pipeline: bathtub, layout, mean field, Monte Carlo, checks.
    Scenario,
}

#[derive(Clone, Copy, ValueEnum)]
enum Functional {
    Electrostatic,
    FreeEnergy,
}

/// 0 on success, 2 when a check fails; errors exit with 1.
enum Outcome {
    Passed,
    ChecksFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if let Command::Verify { dir } = &cli.command {
        let dir = dir
            .clone()
            .or_else(|| cli.out.clone())
            .context("verify needs a directory")?;
        let report = pipeline::verify(&dir)?;
        print_checks(report.checks.iter().map(|c| (&c.name, c.passed, c.value, c.threshold)));
        write_json(&dir.join("verify.json"), &report)?;
        return Ok(outcome(report.passed()));
    }
    let path = cli.config.as_deref().context("--config is required")?;
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("out").join(&cfg.name));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Bathtub => bathtub(&cfg, &out),
        Command::MfSolve { functional } => mf_solve(&cfg, &out, functional),
        Command::Inverse => inverse(&cfg, &out),
        Command::Sample => sample(&cfg, &out),
        Command::Scaling => {
            let report = pipeline::run_scaling(&cfg, Some(&out))?;
            for r in &report.rows {
                println!(
                    "N={:<8} D={:.4e} |E_el/E_bt-1|={:.3e} charges={}",
                    r.n_particles, r.d_bt_el, r.mean_field_ratio_error, r.charges
                );
            }
            println!("slope of log D vs log N: {:.3}", report.d_slope);
            print_checks(report.checks.iter().map(|c| (&c.name, c.passed, c.value, c.threshold)));
            Ok(outcome(report.passed()))
        }
        Command::Scenario => {
            let res = pipeline::run_scenario(&cfg, &out)?;
            let s = &res.summary;
            println!(
                "{} N={} E_bt={:.6} E_el={:.6} D(bt,el)={:.3e}",
                s.name, s.n_particles, s.e_bt, s.e_el, s.d_metrics.bt_el
            );
            if let (Some(e), Some(r)) = (s.e_mc, s.ratio) {
                println!("E_mc={:.6} +- {:.2e} ratio={r:.4}", e.value, e.stderr);
            }
            print_checks(s.checks.iter().map(|c| (&c.name, c.passed, c.value, c.threshold)));
            println!("artifacts in {}", out.display());
            Ok(outcome(s.passed()))
        }
        Command::Verify { .. } => unreachable!(),
    }
}

fn outcome(passed: bool) -> Outcome {
    if passed {
        Outcome::Passed
    } else {
        Outcome::ChecksFailed
    }
}

fn print_checks<'a>(checks: impl Iterator<Item = (&'a String, bool, f64, f64)>) {
    for (name, passed, value, threshold) in checks {
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {value:.4e} (threshold {threshold:.4e})");
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn single_n(cfg: &ScenarioConfig) -> Result<usize> {
    match cfg.particle_counts().as_slice() {
        [n] => Ok(*n),
        _ => bail!("this command needs a single N in the config"),
    }
}

fn bathtub(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let n = single_n(cfg)?;
    let grid = cfg.grid.grid()?;
    let base = cfg.base_dir.as_deref();
    let u = Potential::from_spec(&cfg.potential, n, &grid, base)?;
    let validation = validate_assumption(&cfg.potential, &grid, n, cfg.ell, base)?;
    let bt = solve_bathtub(&u, cfg.ell, &grid)?;
    fields::write_csv_file(&bt.density, &out.join("bathtub_density.csv"))?;
    fields::write_csv_file(&u.sample(&grid), &out.join("potential.csv"))?;
    write_json(&out.join("bathtub.json"), &bt.summary())?;
    write_json(&out.join("validation.json"), &validation)?;
    println!(
        "E_bt={:.6} e0={:.6} area={:.6}",
        bt.energy, bt.fermi_level, bt.area
    );
    for w in &validation.warnings {
        println!("warning: {w}");
    }
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct MfReport {
    #[serde(rename = "N")]
    n_particles: usize,
    solution: SolutionSummary,
    residuals: ResidualReport,
    bounds: BoundReport,
    d_bathtub: f64,
}

fn mf_solve(cfg: &ScenarioConfig, out: &Path, functional: Functional) -> Result<Outcome> {
    let n = single_n(cfg)?;
    let chain = mean_field_chain(cfg, n)?;
    let sol = match functional {
        Functional::Electrostatic => chain.solution,
        Functional::FreeEnergy => solve_free_energy(
            &chain.problem,
            &cfg.solver,
            Some(&chain.solution.density),
        )?,
    };
    let residuals = chain.problem.verify_variational(&sol.density)?;
    let bounds = bound_checks(&chain.problem, &sol.density, Some(chain.radius));
    let name = match functional {
        Functional::Electrostatic => "mf_density.csv",
        Functional::FreeEnergy => "mf_free_density.csv",
    };
    fields::write_csv_file(&sol.density, &out.join(name))?;
    let report = MfReport {
        n_particles: n,
        solution: sol.summary(),
        residuals,
        bounds,
        d_bathtub: coulomb_metric(&chain.bathtub.density, &sol.density)?,
    };
    write_json(&out.join("mf_solution.json"), &report)?;
    println!(
        "iterations={} C={:.6} residuals=({:.2e}, {:.2e}) d(bt)={:.3e}",
        sol.iterations,
        sol.multiplier,
        sol.residual_on_support,
        sol.residual_off_support,
        report.d_bathtub
    );
    Ok(outcome(report.bounds.density_ok && report.bounds.grad_ok))
}

fn inverse(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let n = single_n(cfg)?;
    let grid = cfg.grid.grid()?;
    let u = Potential::from_spec(&cfg.potential, n, &grid, cfg.base_dir.as_deref())?;
    let bt = solve_bathtub(&u, cfg.ell, &grid)?;
    let radius = enclosing_radius(&grid, &bt.occupancy)?;
    let q0 = build_continuous(&grid, &bt.occupancy, radius)?;
    fields::write_csv_file(&q0, &out.join("q0.csv"))?;
    let layout =
        pipeline::build_layout(cfg.layout_scheme, &u, &bt, radius, n, cfg.disk_budget)?;
    fs::write(out.join("layout.json"), layout.to_json())?;
    let poly = to_polynomial(&layout)?;
    write_json(&out.join("polynomial.json"), &poly)?;
    println!(
        "R={radius:.4} charges={} total={:.6} degree={}",
        layout.charges.len(),
        layout.total_charge(),
        poly.degree()
    );
    for w in &layout.warnings {
        println!("warning: {w}");
    }
    Ok(Outcome::Passed)
}

fn sample(cfg: &ScenarioConfig, out: &Path) -> Result<Outcome> {
    let n = single_n(cfg)?;
    let mut sampler = cfg
        .sampler
        .clone()
        .context("the config has no [sampler] block")?;
    sampler.seed = cfg.seed;
    let grid = cfg.grid.grid()?;
    let u = Potential::from_spec(&cfg.potential, n, &grid, cfg.base_dir.as_deref())?;
    let bt = solve_bathtub(&u, cfg.ell, &grid)?;
    let radius = enclosing_radius(&grid, &bt.occupancy)?;
    let layout =
        pipeline::build_layout(cfg.layout_scheme, &u, &bt, radius, n, cfg.disk_budget)?;
    let (hist, _) = pipeline::histogram_grid(&grid, n)?;
    let est = run_chains(&layout.charges, cfg.ell, n, &sampler, &hist, &u, &[])?;
    fields::write_csv_file(&est.density.histogram, &out.join("mc_density.csv"))?;
    write_json(&out.join("mc_density.json"), &est.density.summary())?;
    write_json(&out.join("mc_energy.json"), &est.energy)?;
    let inc = incompressibility_check(&est.density, cfg.ell, n);
    let decay = decay_check(&est.density, n);
    write_json(
        &out.join("mc_checks.json"),
        &serde_json::json!({ "incompressibility": inc, "decay": decay }),
    )?;
    println!(
        "E_mc={:.6} +- {:.2e} acceptance={:.3} R-hat={:.4}",
        est.energy.value, est.energy.stderr, est.density.acceptance_rate, est.r_hat
    );
    for w in &est.warnings {
        println!("warning: {w}");
    }
    if let Some(note) = &inc.notice {
        println!("incompressibility: {note}");
    }
    Ok(outcome(inc.passed))
}
