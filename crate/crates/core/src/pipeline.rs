//! Scenario runs: bathtub, quasi-hole layout, mean field and Monte Carlo,
//! written to a directory with a deterministic `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bathtub::{solve_bathtub, BathtubSolution};
use crate::error::{Error, Result};
use crate::fields::{self, coulomb_metric, Grid2D, ScalarField2D};
use crate::meanfield::{
    bound_checks, solve_electrostatic, stability_sweep, BoundReport, ChargeEnvironment,
    MeanFieldProblem, MeanFieldSolution, ResidualReport, SolverOptions, StabilityReport,
};
use crate::plasma::{
    decay_check, incompressibility_check, mf_vs_mc, run_chains, ComparisonReport, DecayReport,
    IncompressibilityReport, ObservableEstimate, PlasmaEstimate, SamplerConfig, TestFunction,
};
use crate::potentials::{validate_assumption, Potential, PotentialSpec, ValidationReport};
use crate::quasiholes::{
    annular_layout, cheese_layout, discretize_lattice, enclosing_radius, Complement,
    QuasiholeLayout, Scheme,
};

/// Monte Carlo runs only up to this particle number in scaling studies.
pub const MC_MAX_N: usize = 64;
/// Relative allowance of the energy sandwich at desk-scale `N`.
pub const EDGE_ALLOWANCE: f64 = 0.3;
/// Slope of `log D(rho_bt - rho_el)` against `log N` required in scaling runs.
pub const D_SLOPE_MAX: f64 = -0.4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// The grid covers `[-half_width, half_width]^2`.
    pub half_width: f64,
    /// Cells per axis.
    pub resolution: usize,
}

impl GridSpec {
    pub fn grid(&self) -> Result<Grid2D> {
        Grid2D::centered(self.half_width, self.resolution)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParticleCount {
    One(usize),
    Many(Vec<usize>),
}

fn default_scheme() -> Scheme {
    Scheme::Lattice
}

fn default_budget() -> usize {
    16
}

fn default_trials() -> usize {
    100
}

/// One scenario file. Scalar keys come first so that the effective config
/// serializes back to TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub ell: u32,
    #[serde(rename = "N")]
    pub n: ParticleCount,
    #[serde(default = "default_scheme")]
    pub layout_scheme: Scheme,
    /// Largest number of disks placed by the cheese scheme.
    #[serde(default = "default_budget")]
    pub disk_budget: usize,
    #[serde(default = "default_trials")]
    pub stability_trials: usize,
    /// Seeds the sampler and the stability perturbations.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub potential: PotentialSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Monte Carlo runs only when this block is present.
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    /// Directory against which relative table paths resolve.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, source: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(source, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 {
            return Err(Error::Config("ell must be at least 1".into()));
        }
        match &self.n {
            ParticleCount::One(0) => return Err(Error::Config("N must be at least 1".into())),
            ParticleCount::Many(v) => {
                if v.is_empty() || v[0] == 0 {
                    return Err(Error::Config("N list must be nonempty and positive".into()));
                }
                if v.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("N list must be strictly increasing".into()));
                }
            }
            ParticleCount::One(_) => {}
        }
        if !(self.grid.half_width > 0.0) || self.grid.resolution < 8 {
            return Err(Error::Config(
                "grid needs a positive half-width and at least 8 cells per axis".into(),
            ));
        }
        if let Some(s) = &self.sampler {
            s.validate()?;
        }
        Ok(())
    }

    pub fn particle_counts(&self) -> Vec<usize> {
        match &self.n {
            ParticleCount::One(n) => vec![*n],
            ParticleCount::Many(v) => v.clone(),
        }
    }

    /// The effective configuration, with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    fn sampler_for_run(&self) -> Option<SamplerConfig> {
        self.sampler.clone().map(|mut s| {
            s.seed = self.seed;
            s
        })
    }
}

/// Results of the deterministic stages for one `N`.
pub struct MeanFieldChain {
    pub n_particles: usize,
    pub potential: Potential,
    pub validation: ValidationReport,
    pub bathtub: BathtubSolution,
    pub radius: f64,
    pub layout: QuasiholeLayout,
    pub problem: MeanFieldProblem,
    pub solution: MeanFieldSolution,
    pub timings: Timings,
}

/// Wall-clock seconds per stage; kept out of the summary so that it stays
/// reproducible.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub bathtub_s: f64,
    pub layout_s: f64,
    pub meanfield_s: f64,
    pub checks_s: f64,
    pub sampling_s: f64,
    pub total_s: f64,
}

pub fn build_layout(
    scheme: Scheme,
    potential: &Potential,
    bathtub: &BathtubSolution,
    radius: f64,
    n: usize,
    disk_budget: usize,
) -> Result<QuasiholeLayout> {
    match scheme {
        Scheme::Lattice => {
            let region = Complement::from_bathtub(bathtub, radius)?;
            discretize_lattice(&region, n)
        }
        Scheme::Annular => annular_layout(potential, bathtub.ell, radius, n),
        Scheme::Cheese => {
            let region = Complement::from_bathtub(bathtub, radius)?;
            cheese_layout(&region, bathtub.grid(), n, disk_budget)
        }
    }
}

/// Potential, bathtub, layout and electrostatic minimizer for `n` particles.
pub fn mean_field_chain(cfg: &ScenarioConfig, n: usize) -> Result<MeanFieldChain> {
    let start = Instant::now();
    let mut timings = Timings::default();
    let grid = cfg.grid.grid()?;
    let base = cfg.base_dir.as_deref();
    let potential = Potential::from_spec(&cfg.potential, n, &grid, base)?;
    let validation = validate_assumption(&cfg.potential, &grid, n, cfg.ell, base)?;
    let bathtub = solve_bathtub(&potential, cfg.ell, &grid)?;
    timings.bathtub_s = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let radius = enclosing_radius(&grid, &bathtub.occupancy)?;
    let layout = build_layout(
        cfg.layout_scheme,
        &potential,
        &bathtub,
        radius,
        n,
        cfg.disk_budget,
    )?;
    timings.layout_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let env = ChargeEnvironment::empty(cfg.ell, n).with_points(layout.charges.clone());
    let problem = MeanFieldProblem::new(&env, &grid)?;
    let mut opts = cfg.solver.clone();
    opts.warm_radius = opts.warm_radius.or(Some(radius));
    let solution = solve_electrostatic(&problem, &opts, None)?;
    timings.meanfield_s = t.elapsed().as_secs_f64();
    timings.total_s = start.elapsed().as_secs_f64();
    Ok(MeanFieldChain {
        n_particles: n,
        potential,
        validation,
        bathtub,
        radius,
        layout,
        problem,
        solution,
        timings,
    })
}

/// `R^2 - 2 R^2 log R`, the multiplier of the enclosing-disk construction.
pub fn enclosing_multiplier(radius: f64) -> f64 {
    radius * radius - 2.0 * radius * radius * radius.ln()
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    /// Failed gating checks turn the run into a check failure.
    pub gating: bool,
}

impl Check {
    fn new(name: &str, passed: bool, value: f64, threshold: f64, gating: bool) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            threshold,
            gating,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LayoutSummary {
    pub scheme: Scheme,
    pub charges: usize,
    pub total_charge: f64,
    pub delta: f64,
    pub region_area: f64,
    pub deficit: f64,
    pub shortfall: f64,
    pub warnings: Vec<String>,
}

impl LayoutSummary {
    fn of(l: &QuasiholeLayout) -> Self {
        Self {
            scheme: l.scheme,
            charges: l.charges.len(),
            total_charge: l.total_charge(),
            delta: l.delta,
            region_area: l.region_area,
            deficit: l.deficit,
            shortfall: l.shortfall,
            warnings: l.warnings.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DMetrics {
    /// `d(rho_bt, rho_el)`.
    pub bt_el: f64,
    /// `d(rho_el, mu_hist)`, when Monte Carlo ran.
    pub el_mc: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MonteCarloSummary {
    pub acceptance: f64,
    pub r_hat: f64,
    pub proposal_sigma: f64,
    pub n_samples: usize,
    pub outside_fraction: f64,
    pub second_moment: ObservableEstimate,
    pub hamiltonian: ObservableEstimate,
    pub incompressibility: IncompressibilityReport,
    pub decay: DecayReport,
    /// Test-function integrals against `rho_el`.
    pub versus_mean_field: ComparisonReport,
    /// Test-function integrals against `rho_bt`.
    pub versus_bathtub: ComparisonReport,
    pub warnings: Vec<String>,
}

/// Everything `summary.json` holds.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub name: String,
    #[serde(rename = "N")]
    pub n_particles: usize,
    pub ell: u32,
    pub seed: u64,
    /// `int U rho_bt`.
    #[serde(rename = "E_bt")]
    pub e_bt: f64,
    /// Electrostatic functional at its minimizer.
    #[serde(rename = "E_el")]
    pub e_el: f64,
    /// `int U rho_el`.
    #[serde(rename = "E_el_U")]
    pub e_el_u: f64,
    /// `int U mu^(1)` from Monte Carlo.
    #[serde(rename = "E_mc")]
    pub e_mc: Option<ObservableEstimate>,
    /// `E_mc / E_bt`.
    pub ratio: Option<f64>,
    /// `E_el_U / E_bt`.
    pub mean_field_ratio: f64,
    #[serde(rename = "D_metrics")]
    pub d_metrics: DMetrics,
    pub multiplier: f64,
    pub enclosing_radius: f64,
    pub enclosing_multiplier: f64,
    pub residuals: [f64; 2],
    pub iterations: usize,
    pub fermi_level: f64,
    pub layout: LayoutSummary,
    pub bounds: BoundReport,
    pub plateau_deviation: f64,
    pub stability: StabilityReport,
    pub validation: ValidationReport,
    pub monte_carlo: Option<MonteCarloSummary>,
    pub checks: Vec<Check>,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }
}

pub struct ScenarioOutcome {
    pub summary: RunSummary,
    pub timings: Timings,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Histogram grid for `n` particles: the mean-field grid refined until the
/// cell side is at most `0.5/sqrt(n)`. Returns the refinement factor too.
pub fn histogram_grid(grid: &Grid2D, n: usize) -> Result<(Grid2D, usize)> {
    let target = 0.5 / (n as f64).sqrt();
    let k = (grid.spacing() / target).ceil().max(1.0) as usize;
    Ok((grid.refine(k)?, k))
}

/// Runs the full chain for a single `N` and writes its artifacts to `out`.
pub fn run_scenario(cfg: &ScenarioConfig, out: &Path) -> Result<ScenarioOutcome> {
    let start = Instant::now();
    let n = match &cfg.n {
        ParticleCount::One(n) => *n,
        ParticleCount::Many(_) => {
            return Err(Error::Config(
                "a scenario run needs a single N; use the scaling mode for a list".into(),
            ))
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;

    let chain = mean_field_chain(cfg, n)?;
    let mut timings = chain.timings.clone();
    let grid = *chain.problem.grid();
    fields::write_csv_file(&chain.potential.sample(&grid), &out.join("potential.csv"))?;
    fields::write_csv_file(&chain.bathtub.density, &out.join("bathtub_density.csv"))?;
    fields::write_csv_file(&chain.solution.density, &out.join("mf_density.csv"))?;
    write(&out.join("layout.json"), &chain.layout.to_json())?;

    let t = Instant::now();
    let sol = &chain.solution;
    let u_field = chain.potential.sample(&grid);
    let e_bt = chain.bathtub.energy;
    let e_el_u = sol.density.dot(&u_field)?;
    let d_bt_el = coulomb_metric(&chain.bathtub.density, &sol.density)?;
    let bounds = bound_checks(&chain.problem, &sol.density, Some(chain.radius));
    let plateau = chain.problem.plateau_deviation(&sol.density)?;
    let stability = stability_sweep(&chain.problem, &sol.density, cfg.stability_trials, cfg.seed)?;
    let c_r = enclosing_multiplier(chain.radius);
    let residual_limit = 1e-2;
    let mut checks = vec![
        Check::new(
            "variational_residual",
            sol.residual_on_support <= residual_limit
                && sol.residual_off_support >= -residual_limit,
            sol.residual_on_support.max(-sol.residual_off_support),
            residual_limit,
            true,
        ),
        Check::new(
            "density_bound",
            bounds.density_ok,
            bounds.max_bulk_density,
            bounds.density_cap * 1.02,
            true,
        ),
        Check::new(
            "gradient_bound",
            bounds.grad_ok,
            bounds.max_grad_potential,
            bounds.grad_bound,
            true,
        ),
        Check::new(
            "stability",
            stability.passed,
            stability.worst_relative_slack,
            -crate::meanfield::STABILITY_SLACK,
            true,
        ),
        Check::new("plateau", plateau <= 0.05, plateau, 0.05, true),
    ];
    timings.checks_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut monte_carlo = None;
    let mut e_mc = None;
    let mut el_mc = None;
    if let Some(sampler) = cfg.sampler_for_run() {
        let (hist_grid, k) = histogram_grid(&grid, n)?;
        let tests = TestFunction::standard_set();
        let est = run_chains(
            &chain.layout.charges,
            cfg.ell,
            n,
            &sampler,
            &hist_grid,
            &chain.potential,
            &tests,
        )?;
        fields::write_csv_file(&est.density.histogram, &out.join("mc_density.csv"))?;
        write(
            &out.join("mc_density.json"),
            &to_json(&est.density.summary()),
        )?;
        write(&out.join("mc_energy.json"), &to_json(&est.energy))?;
        let coarse = est.density.histogram.coarsen(k)?;
        el_mc = Some(coulomb_metric(&sol.density, &coarse)?);
        let mc = summarize_mc(&est, sol, &chain.bathtub, &tests, n, cfg.ell)?;
        if mc.incompressibility.checked {
            checks.push(Check::new(
                "incompressibility",
                mc.incompressibility.passed,
                mc.incompressibility.max_block_mean,
                mc.incompressibility.bound,
                true,
            ));
        }
        let upper = (est.energy.value + 3.0 * est.energy.stderr) * (1.0 + EDGE_ALLOWANCE);
        checks.push(Check::new(
            "energy_sandwich",
            e_bt <= upper,
            e_bt,
            upper,
            true,
        ));
        checks.push(Check::new(
            "sampler_convergence",
            est.r_hat <= 1.05,
            est.r_hat,
            1.05,
            false,
        ));
        e_mc = Some(ObservableEstimate {
            value: est.energy.value,
            stderr: est.energy.stderr,
        });
        monte_carlo = Some(mc);
    }
    timings.sampling_s = t.elapsed().as_secs_f64();

    let summary = RunSummary {
        name: cfg.name.clone(),
        n_particles: n,
        ell: cfg.ell,
        seed: cfg.seed,
        e_bt,
        e_el: sol.energy,
        e_el_u,
        ratio: e_mc.map(|e| e.value / e_bt),
        e_mc,
        mean_field_ratio: e_el_u / e_bt,
        d_metrics: DMetrics {
            bt_el: d_bt_el,
            el_mc,
        },
        multiplier: sol.multiplier,
        enclosing_radius: chain.radius,
        enclosing_multiplier: c_r,
        residuals: [sol.residual_on_support, sol.residual_off_support],
        iterations: sol.iterations,
        fermi_level: chain.bathtub.fermi_level,
        layout: LayoutSummary::of(&chain.layout),
        bounds,
        plateau_deviation: plateau,
        stability,
        validation: chain.validation,
        monte_carlo,
        checks,
    };
    timings.total_s = start.elapsed().as_secs_f64();
    write(&out.join("summary.json"), &to_json(&summary))?;
    write(&out.join("timings.json"), &to_json(&timings))?;
    Ok(ScenarioOutcome { summary, timings })
}

fn summarize_mc(
    est: &PlasmaEstimate,
    el: &MeanFieldSolution,
    bt: &BathtubSolution,
    tests: &[TestFunction],
    n: usize,
    ell: u32,
) -> Result<MonteCarloSummary> {
    Ok(MonteCarloSummary {
        acceptance: est.density.acceptance_rate,
        r_hat: est.r_hat,
        proposal_sigma: est.proposal_sigma,
        n_samples: est.density.n_samples,
        outside_fraction: est.density.outside_fraction,
        second_moment: est.second_moment,
        hamiltonian: est.hamiltonian,
        incompressibility: incompressibility_check(&est.density, ell, n),
        decay: decay_check(&est.density, n),
        versus_mean_field: mf_vs_mc(est, &el.density, tests, n)?,
        versus_bathtub: mf_vs_mc(est, &bt.density, tests, n)?,
        warnings: est.warnings.clone(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    #[serde(rename = "N")]
    pub n_particles: usize,
    pub charges: usize,
    pub d_bt_el: f64,
    pub e_bt: f64,
    pub e_el_u: f64,
    /// `|E_el_U / E_bt - 1|`.
    pub mean_field_ratio_error: f64,
    pub mc_ratio: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub name: String,
    pub scheme: Scheme,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `log D(rho_bt - rho_el)` against `log N`.
    pub d_slope: f64,
    /// Same for `log |E_el_U / E_bt - 1|`, over rows where it is positive.
    pub energy_slope: Option<f64>,
    /// Whether `|E_mc / E_bt - 1|` is nonincreasing over the Monte Carlo rows.
    pub mc_trend_monotone: Option<bool>,
    pub checks: Vec<Check>,
}

impl ScalingReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }
}

/// Least-squares slope of `log y` against `log x`; needs three points.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Mean-field chain for every `N` of the list, plus Monte Carlo for
/// `N <= MC_MAX_N` when a sampler block is present.
pub fn run_scaling(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<ScalingReport> {
    let ns = cfg.particle_counts();
    if ns.len() < 3 {
        return Err(Error::Config(format!(
            "scaling needs at least 3 values of N, got {}",
            ns.len()
        )));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &n in &ns {
        let chain = match mean_field_chain(cfg, n) {
            Ok(c) => c,
            Err(e) => {
                failures.push(format!("N={n}: {e}"));
                continue;
            }
        };
        let grid = *chain.problem.grid();
        let u_field = chain.potential.sample(&grid);
        let e_el_u = chain.solution.density.dot(&u_field)?;
        let e_bt = chain.bathtub.energy;
        let (mut mc_ratio, mut mc_stderr) = (None, None);
        if let Some(sampler) = cfg.sampler_for_run().filter(|_| n <= MC_MAX_N) {
            let (hist_grid, _) = histogram_grid(&grid, n)?;
            let est = run_chains(
                &chain.layout.charges,
                cfg.ell,
                n,
                &sampler,
                &hist_grid,
                &chain.potential,
                &[],
            )?;
            mc_ratio = Some(est.energy.value / e_bt);
            mc_stderr = Some(est.energy.stderr / e_bt);
        }
        rows.push(ScalingRow {
            n_particles: n,
            charges: chain.layout.charges.len(),
            d_bt_el: coulomb_metric(&chain.bathtub.density, &chain.solution.density)?,
            e_bt,
            e_el_u,
            mean_field_ratio_error: (e_el_u / e_bt - 1.0).abs(),
            mc_ratio,
            mc_stderr,
            iterations: chain.solution.iterations,
        });
    }
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "scaling fit needs 3 successful runs, got {}: {}",
            rows.len(),
            failures.join("; ")
        )));
    }
    let d_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.n_particles as f64, r.d_bt_el))
        .collect();
    let d_slope = log_log_slope(&d_pts).ok_or_else(|| {
        Error::InvalidArgument("degenerate fit: fewer than 3 positive distances".into())
    })?;
    let e_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.n_particles as f64, r.mean_field_ratio_error))
        .collect();
    let energy_slope = log_log_slope(&e_pts);
    let mc_errors: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.mc_ratio.map(|x| (x - 1.0).abs()))
        .collect();
    let mc_trend_monotone =
        (mc_errors.len() >= 2).then(|| mc_errors.windows(2).all(|w| w[1] <= w[0]));
    let mut checks = vec![Check::new(
        "d_slope",
        d_slope <= D_SLOPE_MAX,
        d_slope,
        D_SLOPE_MAX,
        true,
    )];
    if let Some(m) = mc_trend_monotone {
        checks.push(Check::new(
            "mc_trend",
            m,
            *mc_errors.last().unwrap(),
            EDGE_ALLOWANCE,
            false,
        ));
    }
    let report = ScalingReport {
        name: cfg.name.clone(),
        scheme: cfg.layout_scheme,
        rows,
        d_slope,
        energy_slope,
        mc_trend_monotone,
        checks,
    };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write(&out.join("config.toml"), &cfg.to_toml()?)?;
        write(&out.join("scaling.json"), &to_json(&report))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub directory: PathBuf,
    pub residuals: Option<ResidualReport>,
    pub bounds: Option<BoundReport>,
    pub stability: Option<StabilityReport>,
    pub incompressibility: Option<IncompressibilityReport>,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }
}

fn read_field(path: &Path) -> Result<ScalarField2D> {
    fields::read_csv_file(path)
}

/// Re-evaluates the mean-field and density checks on the artifacts of a
/// scenario directory. Every file must parse; failing checks are reported,
/// not raised.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let summary_path = dir.join("summary.json");
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(&summary_path, e.to_string()))?;
    let cfg_path = dir.join("config.toml");
    let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ScenarioConfig::from_toml_str(&cfg_text, &cfg_path)?;
    let layout_path = dir.join("layout.json");
    let layout_text = fs::read_to_string(&layout_path).map_err(|e| Error::io(&layout_path, e))?;
    let layout = QuasiholeLayout::from_json(&layout_text, &layout_path.display().to_string())?;
    let rho = read_field(&dir.join("mf_density.csv"))?;
    let mc = dir.join("mc_density.csv");
    let hist = if mc.exists() {
        Some(read_field(&mc)?)
    } else {
        None
    };
    let n = summary
        .get("N")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::parse(&summary_path, "missing integer field N"))?
        as usize;

    let mut report = VerifyReport {
        directory: dir.to_path_buf(),
        residuals: None,
        bounds: None,
        stability: None,
        incompressibility: None,
        checks: Vec::new(),
    };
    let min = rho.min();
    let mass_err = (rho.mass() - 1.0).abs();
    let feasible = min >= 0.0 && mass_err <= 1e-9;
    report.checks.push(Check::new(
        "feasibility",
        feasible,
        if min < 0.0 { min } else { mass_err },
        if min < 0.0 { 0.0 } else { 1e-9 },
        true,
    ));
    if feasible {
        let env = ChargeEnvironment::empty(cfg.ell, n).with_points(layout.charges.clone());
        let problem = MeanFieldProblem::new(&env, rho.grid())?;
        let res = problem.verify_variational(&rho)?;
        let limit = 1e-2;
        report.checks.push(Check::new(
            "variational_residual",
            res.support <= limit && res.off_support >= -limit,
            res.support.max(-res.off_support),
            limit,
            true,
        ));
        let radius = summary.get("enclosing_radius").and_then(|v| v.as_f64());
        let bounds = bound_checks(&problem, &rho, radius);
        report.checks.push(Check::new(
            "density_bound",
            bounds.density_ok,
            bounds.max_bulk_density,
            bounds.density_cap * 1.02,
            true,
        ));
        report.checks.push(Check::new(
            "gradient_bound",
            bounds.grad_ok,
            bounds.max_grad_potential,
            bounds.grad_bound,
            true,
        ));
        let stab = stability_sweep(&problem, &rho, cfg.stability_trials, cfg.seed)?;
        report.checks.push(Check::new(
            "stability",
            stab.passed,
            stab.worst_relative_slack,
            -crate::meanfield::STABILITY_SLACK,
            true,
        ));
        report.residuals = Some(res);
        report.bounds = Some(bounds);
        report.stability = Some(stab);
    }
    if let Some(h) = hist {
        let est = crate::plasma::DensityEstimate {
            counts: vec![0; h.grid().len()],
            stderr: vec![0.0; h.grid().len()],
            acceptance_rate: f64::NAN,
            n_samples: 0,
            outside_fraction: 0.0,
            radial_counts: vec![0],
            radial_bin: 1.0,
            histogram: h,
        };
        let inc = incompressibility_check(&est, cfg.ell, n);
        if inc.checked {
            report.checks.push(Check::new(
                "incompressibility",
                inc.passed,
                inc.max_block_mean,
                inc.bound,
                true,
            ));
        }
        report.incompressibility = Some(inc);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUADRATIC: &str = r#"
        name = "quadratic"
        ell = 2
        N = 64
        seed = 7
        [potential]
        family = { kind = "radial_power", s = 2.0 }
        [grid]
        half_width = 2.5
        resolution = 48
    "#;

    fn cfg(text: &str) -> ScenarioConfig {
        ScenarioConfig::from_toml_str(text, Path::new("inline.toml")).unwrap()
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = cfg(QUADRATIC);
        assert_eq!(c.layout_scheme, Scheme::Lattice);
        assert_eq!(c.stability_trials, 100);
        let back = cfg(&c.to_toml().unwrap());
        assert_eq!(back, c);
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = QUADRATIC.replace("ell = 2", "ell = 0");
        assert!(ScenarioConfig::from_toml_str(&bad, Path::new("x")).is_err());
        let bad = QUADRATIC.replace("N = 64", "N = [100, 10, 1000]");
        assert!(ScenarioConfig::from_toml_str(&bad, Path::new("x")).is_err());
        let bad = QUADRATIC.replace("seed = 7", "seed = 7\nunknown = 1");
        assert!(ScenarioConfig::from_toml_str(&bad, Path::new("x")).is_err());
    }

    #[test]
    fn scaling_needs_three_values() {
        let c = cfg(&QUADRATIC.replace("N = 64", "N = [100, 1000]"));
        assert!(matches!(run_scaling(&c, None), Err(Error::Config(_))));
    }

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [1e3, 1e4, 1e5]
            .iter()
            .map(|&n: &f64| (n, 3.0 * n.powf(-0.5)))
            .collect();
        assert!((log_log_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert!(log_log_slope(&pts[..2]).is_none());
    }

    #[test]
    fn enclosing_multiplier_value() {
        let r: f64 = 2.0;
        assert!((enclosing_multiplier(r) - (4.0 - 8.0 * r.ln())).abs() < 1e-15);
    }

    #[test]
    fn mean_field_scenario_writes_artifacts_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(&QUADRATIC.replace("seed = 7", "seed = 7\nstability_trials = 10"));
        let out = run_scenario(&c, dir.path()).unwrap();
        assert!(out.summary.passed(), "{:?}", out.summary.checks);
        for f in [
            "summary.json",
            "timings.json",
            "config.toml",
            "layout.json",
            "mf_density.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let v = verify(dir.path()).unwrap();
        assert!(v.passed(), "{:?}", v.checks);
    }
}
