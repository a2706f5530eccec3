//! Mean-field functionals of the plasma with quasi-hole charges.
//!
//! Electrostatic functional
//! `E[rho] = <W, rho> + 2 ell D(rho, rho)`, `W = |x|^2 + Phi_qh`,
//! and free energy `F[rho] = E[rho] + N^-1 <rho, log rho>`, both over
//! probability densities on a grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    self, gradient, norm, points_potential_on_grid, points_potential_on_grid_direct, FieldKind,
    Grid2D, LogConvolver, Point, PointChargeSet, ScalarField2D,
};

/// Quasi-hole charges seen by the plasma.
#[derive(Clone, Debug, PartialEq)]
pub struct ChargeEnvironment {
    pub smeared: Option<ScalarField2D>,
    pub points: PointChargeSet,
    pub ell: u32,
    /// Particle number; sets the temperature `1/N` of the free energy.
    pub n_particles: usize,
}

impl ChargeEnvironment {
    pub fn empty(ell: u32, n_particles: usize) -> Self {
        Self {
            smeared: None,
            points: PointChargeSet::empty(),
            ell,
            n_particles,
        }
    }

    pub fn with_smeared(mut self, q: ScalarField2D) -> Self {
        self.smeared = Some(q);
        self
    }

    pub fn with_points(mut self, points: PointChargeSet) -> Self {
        self.points = points;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.ell == 0 {
            return Err(Error::InvalidArgument("ell must be at least 1".into()));
        }
        if self.n_particles == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        if let Some(q) = &self.smeared {
            q.check_finite()?;
            if let Some(k) = q.values().iter().position(|&v| v < 0.0) {
                return Err(Error::InvalidCharge(format!(
                    "smeared charge is negative at cell {:?}",
                    q.grid().coords(k)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Support residual target, relative to `|C|`.
    pub tol_support: f64,
    /// Allowed violation of `W + 2 ell Phi >= C` off the support, relative to `|C|`.
    pub tol_off: f64,
    /// Coulomb distance between `rho` and its image at which the fixed-point method stops.
    pub tol_fixed_point: f64,
    /// Initial damping of the free-energy iteration.
    pub damping: f64,
    /// Radius of the warm-start disk; defaults to 60% of the grid half-width.
    pub warm_radius: Option<f64>,
    /// Switch the self-interaction off (checks against closed forms only).
    pub interaction: bool,
    pub free_energy_method: FreeEnergyMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol_support: 1e-9,
            tol_off: 1e-9,
            tol_fixed_point: 1e-9,
            damping: 0.1,
            warm_radius: None,
            interaction: true,
            free_energy_method: FreeEnergyMethod::Proximal,
        }
    }
}

/// `1/(pi ell)` as the support threshold scale.
fn support_threshold(ell: u32) -> f64 {
    1e-3 * crate::bathtub::density_cap(ell)
}

/// Cached data of one minimization problem: the external potential `W` and
/// the convolution plan.
pub struct MeanFieldProblem {
    grid: Grid2D,
    conv: LogConvolver,
    external: Vec<f64>,
    smeared: Option<ScalarField2D>,
    point_cells: Vec<usize>,
    ell: u32,
    n_particles: usize,
    interaction: bool,
}

impl std::fmt::Debug for MeanFieldProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeanFieldProblem")
            .field("grid", &self.grid)
            .field("ell", &self.ell)
            .field("n_particles", &self.n_particles)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    /// `int (|x|^2 + Phi_qh) rho`.
    pub external: f64,
    /// `2 ell D(rho, rho)`.
    pub interaction: f64,
    pub total: f64,
    /// Cells holding a point charge on which `rho > 0`; their `Phi_qh` uses
    /// the regularized kernel.
    pub flagged_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    /// Median of `W + 2 ell Phi_rho` over `{rho > tau}`.
    pub multiplier: f64,
    /// `max |W + 2 ell Phi_rho - C| / |C|` over the support.
    pub support: f64,
    /// `min (W + 2 ell Phi_rho - C) / |C|` off the support (negative values violate).
    pub off_support: f64,
    pub support_cells: usize,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    Electrostatic,
    FreeEnergy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldSolution {
    pub functional: Functional,
    pub density: ScalarField2D,
    /// `C^el`, or `C^MF` for the free energy.
    pub multiplier: f64,
    pub residual_on_support: f64,
    pub residual_off_support: f64,
    /// `E^el[rho]` (the free energy adds the entropy in `free_energy`).
    pub energy: f64,
    pub free_energy: Option<f64>,
    pub second_moment: f64,
    pub iterations: usize,
    /// `log rho` per cell, kept for the free energy where `rho` underflows.
    pub log_density: Option<Vec<f64>>,
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolutionSummary {
    pub functional: Functional,
    pub energy: f64,
    pub free_energy: Option<f64>,
    pub multiplier: f64,
    pub residuals: [f64; 2],
    pub second_moment: f64,
    pub iterations: usize,
}

impl MeanFieldSolution {
    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            functional: self.functional,
            energy: self.energy,
            free_energy: self.free_energy,
            multiplier: self.multiplier,
            residuals: [self.residual_on_support, self.residual_off_support],
            second_moment: self.second_moment,
            iterations: self.iterations,
        }
    }
}

fn weighted_dot(a: &[f64], b: &[f64], area: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * area
}

impl MeanFieldProblem {
    pub fn new(env: &ChargeEnvironment, grid: &Grid2D) -> Result<Self> {
        env.validate()?;
        let conv = LogConvolver::new(grid);
        let mut external: Vec<f64> = grid.centers().map(|x| x[0] * x[0] + x[1] * x[1]).collect();
        if let Some(q) = &env.smeared {
            if q.grid() != grid {
                return Err(Error::GridMismatch);
            }
            for (w, p) in external.iter_mut().zip(conv.potential_values(q.values())) {
                *w += p;
            }
        }
        let mut point_cells = Vec::new();
        if !env.points.is_empty() {
            let direct_cost = env.points.len() as f64 * grid.len() as f64;
            let phi = if direct_cost <= 2e7 {
                points_potential_on_grid_direct(&env.points, grid)
            } else {
                points_potential_on_grid(&env.points, &conv)
            };
            for (w, p) in external.iter_mut().zip(phi) {
                *w += p;
            }
            for x in env.points.positions() {
                if let Some((i, j)) = grid.cell_of(x) {
                    point_cells.push(grid.index(i, j));
                }
            }
            point_cells.sort_unstable();
            point_cells.dedup();
        }
        Ok(Self {
            grid: *grid,
            conv,
            external,
            smeared: env.smeared.clone(),
            point_cells,
            ell: env.ell,
            n_particles: env.n_particles,
            interaction: true,
        })
    }

    /// Turns the self-interaction off (the functional becomes linear).
    pub fn without_interaction(mut self) -> Self {
        self.interaction = false;
        self
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn ell(&self) -> u32 {
        self.ell
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn convolver(&self) -> &LogConvolver {
        &self.conv
    }

    /// `W = |x|^2 + Phi_qh` per cell.
    pub fn external(&self) -> &[f64] {
        &self.external
    }

    pub fn smeared(&self) -> Option<&ScalarField2D> {
        self.smeared.as_ref()
    }

    fn coupling(&self) -> f64 {
        if self.interaction {
            2.0 * self.ell as f64
        } else {
            0.0
        }
    }

    /// `Phi_rho` per cell.
    pub fn potential(&self, rho: &[f64]) -> Vec<f64> {
        self.conv.potential_values(rho)
    }

    fn check(&self, rho: &ScalarField2D) -> Result<()> {
        if rho.grid() != &self.grid {
            return Err(Error::GridMismatch);
        }
        rho.check_finite()
    }

    fn breakdown(&self, rho: &[f64], phi: &[f64]) -> EnergyBreakdown {
        let area = self.grid.cell_area();
        let external = weighted_dot(&self.external, rho, area);
        let interaction = 0.5 * self.coupling() * weighted_dot(rho, phi, area);
        let flagged_cells = self.point_cells.iter().filter(|&&k| rho[k] > 0.0).count();
        EnergyBreakdown {
            external,
            interaction,
            total: external + interaction,
            flagged_cells,
        }
    }

    /// `E[rho]` for a feasible density.
    pub fn energy(&self, rho: &ScalarField2D) -> Result<EnergyBreakdown> {
        self.check(rho)?;
        if let Some(k) = rho.values().iter().position(|&v| v < 0.0) {
            return Err(Error::Infeasible {
                constraint: format!("density is negative at cell {:?}", self.grid.coords(k)),
            });
        }
        if (rho.mass() - 1.0).abs() > 1e-9 {
            return Err(Error::Infeasible {
                constraint: format!("mass is {}, expected 1", rho.mass()),
            });
        }
        let phi = self.potential(rho.values());
        Ok(self.breakdown(rho.values(), &phi))
    }

    /// `W + 2 ell Phi_rho` per cell.
    pub fn effective_potential(&self, rho: &[f64]) -> Vec<f64> {
        let phi = self.potential(rho);
        let c = self.coupling();
        self.external
            .iter()
            .zip(&phi)
            .map(|(w, p)| w + c * p)
            .collect()
    }

    fn residuals_from(&self, rho: &[f64], g: &[f64]) -> ResidualReport {
        let tau = support_threshold(self.ell);
        let mut on: Vec<f64> = rho
            .iter()
            .zip(g)
            .filter(|(r, _)| **r > tau)
            .map(|(_, v)| *v)
            .collect();
        let support_cells = on.len();
        if on.is_empty() {
            return ResidualReport {
                multiplier: f64::NAN,
                support: f64::INFINITY,
                off_support: f64::NEG_INFINITY,
                support_cells,
                tau,
            };
        }
        let mid = on.len() / 2;
        let (_, &mut c, _) = on.select_nth_unstable_by(mid, f64::total_cmp);
        let scale = c.abs().max(1e-12);
        let support = on.iter().fold(0.0f64, |m, v| m.max((v - c).abs())) / scale;
        let off_support = rho
            .iter()
            .zip(g)
            .filter(|(r, _)| **r <= tau)
            .fold(f64::INFINITY, |m, (_, v)| m.min(v - c))
            / scale;
        ResidualReport {
            multiplier: c,
            support,
            off_support: off_support.min(0.0),
            support_cells,
            tau,
        }
    }

    /// Variational residuals of `W + 2 ell Phi_rho = C` on `{rho > tau}` and
    /// `>= C` elsewhere, `tau = 1e-3 / (pi ell)`.
    pub fn verify_variational(&self, rho: &ScalarField2D) -> Result<ResidualReport> {
        self.check(rho)?;
        let g = self.effective_potential(rho.values());
        Ok(self.residuals_from(rho.values(), &g))
    }

    /// `(E[rho + nu], E[rho] + 2 ell D(nu, nu))` for a zero-mass perturbation
    /// with `rho + nu >= 0`.
    pub fn stability_check(&self, rho: &ScalarField2D, nu: &ScalarField2D) -> Result<(f64, f64)> {
        self.check(rho)?;
        self.check(nu)?;
        let tv = nu.total_variation();
        if nu.mass().abs() > 1e-9 * tv.max(1e-300) + 1e-14 {
            return Err(Error::Infeasible {
                constraint: format!("perturbation carries mass {:e}", nu.mass()),
            });
        }
        let sum: Vec<f64> = rho
            .values()
            .iter()
            .zip(nu.values())
            .map(|(a, b)| a + b)
            .collect();
        if let Some(k) = sum.iter().position(|&v| v < -1e-14) {
            return Err(Error::Infeasible {
                constraint: format!("rho + nu is negative at cell {:?}", self.grid.coords(k)),
            });
        }
        let area = self.grid.cell_area();
        let (phi_rho, phi_nu) = self.conv.potential_pair(rho.values(), nu.values());
        let e_rho = self.breakdown(rho.values(), &phi_rho).total;
        let d_nu = 0.5 * weighted_dot(nu.values(), &phi_nu, area);
        let phi_sum: Vec<f64> = phi_rho.iter().zip(&phi_nu).map(|(a, b)| a + b).collect();
        let e_sum = self.breakdown(&sum, &phi_sum).total;
        Ok((e_sum, e_rho + self.coupling() * d_nu))
    }

    /// `max(0, 1/(pi ell) - Q/(2 ell))` on `D(0, r)`, normalized. Point
    /// charges enter through their bilinear deposit.
    pub fn warm_start(&self, r: f64) -> Vec<f64> {
        let cap = crate::bathtub::density_cap(self.ell);
        let mut q = vec![0.0; self.grid.len()];
        if let Some(s) = &self.smeared {
            q.copy_from_slice(s.values());
        }
        let two_ell = 2.0 * self.ell as f64;
        let mut rho: Vec<f64> = (0..self.grid.len())
            .map(|k| {
                if norm(self.grid.center_of(k)) <= r {
                    (cap - q[k] / two_ell).max(0.0)
                } else {
                    0.0
                }
            })
            .collect();
        if !self.point_cells.is_empty() {
            for &k in &self.point_cells {
                rho[k] = 0.0;
            }
        }
        let m: f64 = rho.iter().sum::<f64>() * self.grid.cell_area();
        if m > 0.0 {
            rho.iter_mut().for_each(|v| *v /= m);
        } else {
            let n = rho.len() as f64;
            rho.iter_mut()
                .for_each(|v| *v = 1.0 / (n * self.grid.cell_area()));
        }
        rho
    }

    /// Largest eigenvalue of the convolution restricted to zero-mass fields.
    fn lipschitz_estimate(&self) -> f64 {
        let n = self.grid.len();
        let mut v: Vec<f64> = (0..n)
            .map(|k| ((k as f64) * 0.618_033_988_7).fract() - 0.5)
            .collect();
        let center = |v: &mut Vec<f64>| {
            let m = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= m);
        };
        center(&mut v);
        let mut lambda = 0.0;
        for _ in 0..40 {
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= nv);
            let mut w = self.potential(&v);
            center(&mut w);
            lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            v = w;
        }
        lambda.abs()
    }
}

/// Euclidean projection onto `{x >= 0, sum x = s}` (Michelot's algorithm).
fn project_simplex(z: &[f64], s: f64, out: &mut [f64]) {
    let mut active: Vec<f64> = z.to_vec();
    let mut theta = (active.iter().sum::<f64>() - s) / active.len() as f64;
    loop {
        let before = active.len();
        active.retain(|&v| v > theta);
        if active.is_empty() {
            break;
        }
        let t = (active.iter().sum::<f64>() - s) / active.len() as f64;
        let done = active.len() == before;
        theta = t;
        if done {
            break;
        }
    }
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - theta).max(0.0);
    }
}

/// Minimizes the electrostatic functional by accelerated projected gradient
/// (FISTA with gradient restart and backtracking) on the discrete simplex.
pub fn minimize_electrostatic(
    env: &ChargeEnvironment,
    grid: &Grid2D,
    opts: &SolverOptions,
) -> Result<MeanFieldSolution> {
    let mut problem = MeanFieldProblem::new(env, grid)?;
    if !opts.interaction {
        problem = problem.without_interaction();
    }
    solve_electrostatic(&problem, opts, None)
}

/// As [`minimize_electrostatic`] on a prepared problem, optionally from a
/// given starting density.
pub fn solve_electrostatic(
    problem: &MeanFieldProblem,
    opts: &SolverOptions,
    start: Option<&ScalarField2D>,
) -> Result<MeanFieldSolution> {
    let grid = problem.grid;
    let area = grid.cell_area();
    let n = grid.len();
    let c = problem.coupling();
    let mut x = match start {
        Some(s) => {
            problem.check(s)?;
            let mut v = vec![0.0; n];
            project_simplex(s.values(), 1.0 / area, &mut v);
            v
        }
        None => problem.warm_start(opts.warm_radius.unwrap_or(0.6 * grid.inset([0.0, 0.0]))),
    };
    if c == 0.0 {
        // Linear functional: all mass on the minimal cells of W.
        let wmin = problem
            .external
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let cells: Vec<usize> = (0..n).filter(|&k| problem.external[k] == wmin).collect();
        x.iter_mut().for_each(|v| *v = 0.0);
        for &k in &cells {
            x[k] = 1.0 / (cells.len() as f64 * area);
        }
        return finish_electrostatic(problem, x, 0, Vec::new());
    }

    let mut lip = 1.05 * c * problem.lipschitz_estimate();
    let mut phi_x = problem.potential(&x);
    let mut x_prev = x.clone();
    let mut phi_prev = phi_x.clone();
    let mut t = 1.0f64;
    let mut trace = Vec::new();
    let mut y = vec![0.0; n];
    let mut phi_y = vec![0.0; n];
    let mut grad_y = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    for it in 0..opts.max_iter {
        let g: Vec<f64> = problem
            .external
            .iter()
            .zip(&phi_x)
            .map(|(w, p)| w + c * p)
            .collect();
        let rep = problem.residuals_from(&x, &g);
        trace.push(rep.support.max(-rep.off_support));
        if rep.support <= opts.tol_support && -rep.off_support <= opts.tol_off {
            return finish_electrostatic(problem, x, it, trace);
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        for k in 0..n {
            y[k] = x[k] + beta * (x[k] - x_prev[k]);
            phi_y[k] = phi_x[k] + beta * (phi_x[k] - phi_prev[k]);
            grad_y[k] = problem.external[k] + c * phi_y[k];
        }
        // The functional is quadratic, so the sufficient-decrease test reads
        // c <d, Phi_d> <= L <d, d> exactly for d = x_new - y.
        let phi_new = loop {
            for k in 0..n {
                step[k] = y[k] - grad_y[k] / lip;
            }
            project_simplex(&step, 1.0 / area, &mut x_new);
            let phi_new = problem.potential(&x_new);
            let mut curv = 0.0;
            let mut sq = 0.0;
            for k in 0..n {
                let d = x_new[k] - y[k];
                curv += d * (phi_new[k] - phi_y[k]);
                sq += d * d;
            }
            if c * curv <= lip * sq * (1.0 + 1e-10) || sq == 0.0 {
                break phi_new;
            }
            lip *= 2.0;
        };
        // Gradient-based restart.
        let restart: f64 = (0..n).map(|k| (y[k] - x_new[k]) * (x_new[k] - x[k])).sum();
        if restart > 0.0 {
            t = 1.0;
        } else {
            t = t_next;
        }
        std::mem::swap(&mut x_prev, &mut x);
        std::mem::swap(&mut x, &mut x_new);
        phi_prev = std::mem::replace(&mut phi_x, phi_new);
    }
    let last = trace.last().copied().unwrap_or(f64::INFINITY);
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        last_residual: last,
        trace,
    })
}

fn finish_electrostatic(
    problem: &MeanFieldProblem,
    x: Vec<f64>,
    iterations: usize,
    trace: Vec<f64>,
) -> Result<MeanFieldSolution> {
    let phi = problem.potential(&x);
    let c = problem.coupling();
    let g: Vec<f64> = problem
        .external
        .iter()
        .zip(&phi)
        .map(|(w, p)| w + c * p)
        .collect();
    let rep = problem.residuals_from(&x, &g);
    let e = problem.breakdown(&x, &phi);
    let density = ScalarField2D::new(problem.grid, FieldKind::Density, x)?;
    let second_moment = density.integrate(|p| p[0] * p[0] + p[1] * p[1]);
    Ok(MeanFieldSolution {
        functional: Functional::Electrostatic,
        density,
        multiplier: rep.multiplier,
        residual_on_support: rep.support,
        residual_off_support: rep.off_support,
        energy: e.total,
        free_energy: None,
        second_moment,
        iterations,
        log_density: None,
        trace,
    })
}

/// Gibbs density `exp(-N (W + u))` normalized, in log form.
fn gibbs(problem: &MeanFieldProblem, u: &[f64], log_rho: &mut [f64]) -> f64 {
    let n_part = problem.n_particles as f64;
    let area = problem.grid.cell_area();
    let mut top = f64::NEG_INFINITY;
    for ((l, w), v) in log_rho.iter_mut().zip(&problem.external).zip(u) {
        *l = -n_part * (w + v);
        top = top.max(*l);
    }
    let z: f64 = log_rho.iter().map(|l| (l - top).exp()).sum::<f64>() * area;
    let log_z = top + z.ln();
    log_rho.iter_mut().for_each(|l| *l -= log_z);
    log_z
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeEnergyMethod {
    /// Accelerated proximal gradient with the entropy handled exactly in the prox.
    Proximal,
    /// Damped fixed-point iteration `rho <- normalize(exp(-N (W + 2 ell Phi_rho)))`.
    FixedPoint,
}

/// Minimizes the free energy `E[rho] + N^-1 int rho log rho`.
pub fn minimize_free_energy(
    env: &ChargeEnvironment,
    grid: &Grid2D,
    opts: &SolverOptions,
) -> Result<MeanFieldSolution> {
    let mut problem = MeanFieldProblem::new(env, grid)?;
    if !opts.interaction {
        problem = problem.without_interaction();
    }
    solve_free_energy(&problem, opts, None)
}

pub fn solve_free_energy(
    problem: &MeanFieldProblem,
    opts: &SolverOptions,
    start: Option<&ScalarField2D>,
) -> Result<MeanFieldSolution> {
    if let Some(s) = start {
        problem.check(s)?;
    }
    if problem.coupling() == 0.0 {
        let mut log_rho = vec![0.0; problem.grid.len()];
        gibbs(problem, &vec![0.0; problem.grid.len()], &mut log_rho);
        return finish_free_energy(problem, log_rho, 0, Vec::new());
    }
    match opts.free_energy_method {
        FreeEnergyMethod::Proximal => proximal_free_energy(problem, opts, start),
        FreeEnergyMethod::FixedPoint => fixed_point_free_energy(problem, opts, start),
    }
}

/// Solution `w` of `w + ln w = z` (Wright omega function), `w > 0`.
fn wright_omega(z: f64) -> f64 {
    if z < -745.0 {
        return z.exp();
    }
    let mut w = if z > 1.0 { z - z.ln() } else { z.exp() };
    for _ in 0..100 {
        let f = w + w.ln() - z;
        let dw = f * w / (1.0 + w);
        w = (w - dw).max(0.5 * w);
        if dw.abs() <= 1e-15 * w {
            break;
        }
    }
    w
}

/// Prox of `a sum rho log rho` on `{rho >= 0, sum rho = total}` at `z`:
/// `rho_i + a ln rho_i = z_i - a - theta` with `theta` fixed by the total.
/// Writes `rho` and `ln rho`; returns `theta`.
fn entropy_prox(
    z: &[f64],
    a: f64,
    total: f64,
    theta0: f64,
    rho: &mut [f64],
    log_rho: &mut [f64],
) -> f64 {
    let ln_a = a.ln();
    let eval = |theta: f64, rho: &mut [f64], log_rho: &mut [f64]| -> (f64, f64) {
        let mut s = 0.0;
        let mut ds = 0.0;
        for ((r, l), &zi) in rho.iter_mut().zip(log_rho.iter_mut()).zip(z) {
            let arg = (zi - a - theta) / a - ln_a;
            let w = wright_omega(arg);
            *r = a * w;
            *l = ln_a + (arg - w);
            s += *r;
            ds += *r / (*r + a);
        }
        (s - total, ds)
    };
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut theta = theta0;
    for _ in 0..200 {
        let (f, ds) = eval(theta, rho, log_rho);
        if f.abs() <= 1e-13 * total {
            break;
        }
        // The excess mass decreases in theta.
        if f > 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let mut next = theta + f / ds.max(1e-300);
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo + (lo - theta).abs().max(1.0) * 2.0
            } else {
                hi - (hi - theta).abs().max(1.0) * 2.0
            };
        }
        theta = next;
    }
    theta
}

fn proximal_free_energy(
    problem: &MeanFieldProblem,
    opts: &SolverOptions,
    start: Option<&ScalarField2D>,
) -> Result<MeanFieldSolution> {
    let grid = problem.grid;
    let area = grid.cell_area();
    let n = grid.len();
    let c = problem.coupling();
    let n_part = problem.n_particles as f64;
    let total = 1.0 / area;

    let mut x = match start {
        Some(s) => s.values().to_vec(),
        None => problem.warm_start(opts.warm_radius.unwrap_or(0.6 * grid.inset([0.0, 0.0]))),
    };
    let mut log_x: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let mut lip = 1.05 * c * problem.lipschitz_estimate();
    let mut theta = 0.0;
    let mut phi_x = problem.potential(&x);
    let mut x_prev = x.clone();
    let mut phi_prev = phi_x.clone();
    let mut t = 1.0f64;
    let mut trace = Vec::new();
    let mut y = vec![0.0; n];
    let mut phi_y = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut log_new = vec![0.0; n];

    for it in 0..opts.max_iter {
        if it > 0 {
            let kkt: Vec<f64> = (0..n)
                .map(|k| problem.external[k] + c * phi_x[k] + log_x[k] / n_part)
                .collect();
            let rep = problem.residuals_from(&x, &kkt);
            trace.push(rep.support.max(-rep.off_support));
            if rep.support <= opts.tol_support && -rep.off_support <= opts.tol_off {
                return finish_free_energy(problem, log_x, it, trace);
            }
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        for k in 0..n {
            y[k] = x[k] + beta * (x[k] - x_prev[k]);
            phi_y[k] = phi_x[k] + beta * (phi_x[k] - phi_prev[k]);
        }
        let phi_new = loop {
            for k in 0..n {
                step[k] = y[k] - (problem.external[k] + c * phi_y[k]) / lip;
            }
            theta = entropy_prox(
                &step,
                1.0 / (n_part * lip),
                total,
                theta,
                &mut x_new,
                &mut log_new,
            );
            let phi_new = problem.potential(&x_new);
            let mut curv = 0.0;
            let mut sq = 0.0;
            for k in 0..n {
                let d = x_new[k] - y[k];
                curv += d * (phi_new[k] - phi_y[k]);
                sq += d * d;
            }
            if c * curv <= lip * sq * (1.0 + 1e-10) || sq == 0.0 {
                break phi_new;
            }
            lip *= 2.0;
            theta *= 0.5;
        };
        let restart: f64 = (0..n).map(|k| (y[k] - x_new[k]) * (x_new[k] - x[k])).sum();
        t = if restart > 0.0 { 1.0 } else { t_next };
        std::mem::swap(&mut x_prev, &mut x);
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut log_x, &mut log_new);
        phi_prev = std::mem::replace(&mut phi_x, phi_new);
    }
    let last = trace.last().copied().unwrap_or(f64::INFINITY);
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        last_residual: last,
        trace,
    })
}

/// Damped fixed point with Anderson mixing on the potential `u = 2 ell Phi_rho`.
/// The residual is the Coulomb distance between `rho` and its image under the
/// map; the damping is halved whenever it grows for five consecutive steps.
fn fixed_point_free_energy(
    problem: &MeanFieldProblem,
    opts: &SolverOptions,
    start: Option<&ScalarField2D>,
) -> Result<MeanFieldSolution> {
    const MEMORY: usize = 8;
    let grid = problem.grid;
    let n = grid.len();
    let area = grid.cell_area();
    let c = problem.coupling();

    let rho0 = match start {
        Some(s) => s.values().to_vec(),
        None => problem.warm_start(opts.warm_radius.unwrap_or(0.6 * grid.inset([0.0, 0.0]))),
    };
    let mut u: Vec<f64> = problem.potential(&rho0).iter().map(|p| c * p).collect();
    let mut log_rho = vec![0.0; n];
    let mut log_img = vec![0.0; n];
    let mut gamma = opts.damping;
    let mut trace: Vec<f64> = Vec::new();
    let mut hist_u: Vec<Vec<f64>> = Vec::new();
    let mut hist_f: Vec<Vec<f64>> = Vec::new();
    let mut growth = 0usize;

    for it in 0..opts.max_iter {
        gibbs(problem, &u, &mut log_rho);
        let rho: Vec<f64> = log_rho.iter().map(|l| l.exp()).collect();
        let g_u: Vec<f64> = problem.potential(&rho).iter().map(|p| c * p).collect();
        gibbs(problem, &g_u, &mut log_img);
        let diff: Vec<f64> = log_img.iter().zip(&rho).map(|(l, r)| l.exp() - r).collect();
        let pd = problem.potential(&diff);
        let residual = fields::metric_from_energy(
            0.5 * weighted_dot(&diff, &pd, area),
            diff.iter().map(|d| d.abs()).sum::<f64>() * area,
        )
        .unwrap_or(f64::INFINITY);
        trace.push(residual);
        if residual <= opts.tol_fixed_point {
            return finish_free_energy(problem, log_img, it, trace);
        }
        if trace.len() >= 2 && residual > trace[trace.len() - 2] {
            growth += 1;
            if growth >= 5 {
                gamma *= 0.5;
                growth = 0;
                hist_u.clear();
                hist_f.clear();
                if gamma < 1e-6 {
                    return Err(Error::Oscillation {
                        suggested_damping: gamma,
                    });
                }
            }
        } else {
            growth = 0;
        }

        let f: Vec<f64> = g_u.iter().zip(&u).map(|(a, b)| a - b).collect();
        hist_u.push(u.clone());
        hist_f.push(f.clone());
        if hist_u.len() > MEMORY + 1 {
            hist_u.remove(0);
            hist_f.remove(0);
        }
        let m = hist_u.len() - 1;
        let mut next: Vec<f64> = u.iter().zip(&f).map(|(a, b)| a + gamma * b).collect();
        if m > 0 {
            let diffs = |h: &[Vec<f64>], j: usize| -> Vec<f64> {
                h[j + 1].iter().zip(&h[j]).map(|(a, b)| a - b).collect()
            };
            let df: Vec<Vec<f64>> = (0..m).map(|j| diffs(&hist_f, j)).collect();
            let du: Vec<Vec<f64>> = (0..m).map(|j| diffs(&hist_u, j)).collect();
            if let Some(coef) = least_squares(&df, &f) {
                for j in 0..m {
                    for k in 0..n {
                        next[k] -= coef[j] * (du[j][k] + gamma * df[j][k]);
                    }
                }
            }
        }
        u = next;
    }
    let last = trace.last().copied().unwrap_or(f64::INFINITY);
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        last_residual: last,
        trace,
    })
}

/// `argmin_c |f - sum_j c_j a_j|` by normal equations with a small ridge.
fn least_squares(a: &[Vec<f64>], f: &[f64]) -> Option<Vec<f64>> {
    let m = a.len();
    let mut g = vec![vec![0.0; m]; m];
    let mut b = vec![0.0; m];
    for i in 0..m {
        for j in 0..=i {
            let v: f64 = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
            g[i][j] = v;
            g[j][i] = v;
        }
        b[i] = a[i].iter().zip(f).map(|(x, y)| x * y).sum();
    }
    let trace: f64 = (0..m).map(|i| g[i][i]).sum();
    if !(trace > 0.0) {
        return None;
    }
    for (i, row) in g.iter_mut().enumerate() {
        row[i] += 1e-12 * trace;
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| g[x][col].abs().total_cmp(&g[y][col].abs()))?;
        if g[piv][col].abs() < 1e-300 {
            return None;
        }
        g.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..m {
            let fct = g[r][col] / g[col][col];
            for k in col..m {
                g[r][k] -= fct * g[col][k];
            }
            b[r] -= fct * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|k| g[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / g[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn finish_free_energy(
    problem: &MeanFieldProblem,
    log_rho: Vec<f64>,
    iterations: usize,
    trace: Vec<f64>,
) -> Result<MeanFieldSolution> {
    let area = problem.grid.cell_area();
    let rho: Vec<f64> = log_rho.iter().map(|l| l.exp()).collect();
    let phi = problem.potential(&rho);
    let e = problem.breakdown(&rho, &phi);
    let n_part = problem.n_particles as f64;
    let entropy: f64 = rho
        .iter()
        .zip(&log_rho)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, l)| r * l)
        .sum::<f64>()
        * area;
    let free = e.total + entropy / n_part;
    // Fixed-point residual: W + 2 ell Phi + N^-1 log rho should be constant.
    let c = problem.coupling();
    let total: Vec<f64> = problem
        .external
        .iter()
        .zip(&phi)
        .zip(&log_rho)
        .map(|((w, p), l)| w + c * p + l / n_part)
        .collect();
    let rep = problem.residuals_from(&rho, &total);
    let density = ScalarField2D::new(problem.grid, FieldKind::Density, rho)?;
    let second_moment = density.integrate(|p| p[0] * p[0] + p[1] * p[1]);
    Ok(MeanFieldSolution {
        functional: Functional::FreeEnergy,
        density,
        multiplier: rep.multiplier,
        residual_on_support: rep.support,
        residual_off_support: rep.off_support,
        energy: e.total,
        free_energy: Some(free),
        second_moment,
        iterations,
        log_density: Some(log_rho),
        trace,
    })
}

/// Energy of `rho` for an environment (convenience wrapper).
pub fn electrostatic_energy(
    rho: &ScalarField2D,
    env: &ChargeEnvironment,
) -> Result<EnergyBreakdown> {
    MeanFieldProblem::new(env, rho.grid())?.energy(rho)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    /// Maximum over all cells, including the rim of the support.
    pub max_density: f64,
    /// Maximum outside a band of two cells along the edge of the support,
    /// where the grid minimizer rings.
    pub max_bulk_density: f64,
    pub density_cap: f64,
    pub density_ok: bool,
    pub max_grad_potential: f64,
    pub grad_bound: f64,
    pub grad_ok: bool,
    pub second_moment: f64,
    /// `second_moment / R^2` when a radius is given.
    pub moment_ratio: Option<f64>,
}

/// Density cap, potential-gradient bound `(2 pi + 1)/sqrt(pi ell)` and the
/// second moment of a density.
pub fn bound_checks(
    problem: &MeanFieldProblem,
    density: &ScalarField2D,
    radius: Option<f64>,
) -> BoundReport {
    let cap = crate::bathtub::density_cap(problem.ell);
    let max_density = density.max();
    let v = density.values();
    let second_moment = density.integrate(|x| x[0] * x[0] + x[1] * x[1]);
    let max_bulk_density = bulk_cells(&problem.grid, v, support_threshold(problem.ell), EDGE_BAND)
        .into_iter()
        .map(|k| v[k])
        .fold(0.0, f64::max);
    let phi = ScalarField2D::new(
        problem.grid,
        FieldKind::Potential,
        problem.potential(density.values()),
    )
    .expect("grid matches");
    let max_grad_potential = gradient(&phi).max_norm();
    let grad_bound =
        (2.0 * std::f64::consts::PI + 1.0) / (std::f64::consts::PI * problem.ell as f64).sqrt();
    BoundReport {
        max_density,
        max_bulk_density,
        density_cap: cap,
        density_ok: max_bulk_density <= cap * 1.02,
        max_grad_potential,
        grad_bound,
        grad_ok: max_grad_potential <= grad_bound,
        second_moment,
        moment_ratio: radius.map(|r| second_moment / (r * r)),
    }
}

/// Worst case of the stability inequality over random perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub trials: usize,
    /// `min (lhs - rhs) / |E[rho]|` over the trials.
    pub worst_relative_slack: f64,
    pub passed: bool,
}

/// Relative slack tolerated by [`stability_sweep`].
pub const STABILITY_SLACK: f64 = 1e-6;

/// Tests `E[rho + nu] >= E[rho] + 2 ell D(nu, nu)` on `trials` perturbations
/// `nu = t (sigma - rho)`, where `sigma` is a normalized sum of up to four
/// random Gaussian blobs inside the bounding box of the grid and `t` is
/// uniform in `(0, 1]`. Such `nu` has zero mass and keeps `rho + nu >= 0`.
pub fn stability_sweep(
    problem: &MeanFieldProblem,
    rho: &ScalarField2D,
    trials: usize,
    seed: u64,
) -> Result<StabilityReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g = problem.grid;
    let (lo, hi) = g.extent();
    let e = problem.energy(rho)?.total.abs().max(1e-300);
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let blobs: Vec<(Point, f64, f64)> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let c = [
                    lo[0] + rng.gen_range(0.2..0.8) * (hi[0] - lo[0]),
                    lo[1] + rng.gen_range(0.2..0.8) * (hi[1] - lo[1]),
                ];
                (
                    c,
                    rng.gen_range(0.05..0.6) * (hi[0] - lo[0]),
                    rng.gen_range(0.1..1.0),
                )
            })
            .collect();
        let sigma = ScalarField2D::from_fn(g, FieldKind::Density, |x| {
            blobs
                .iter()
                .map(|(c, w, a)| {
                    a * (-((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (w * w)).exp()
                })
                .sum()
        });
        let sigma = sigma.scaled(1.0 / sigma.mass());
        let t: f64 = 1.0 - rng.gen::<f64>();
        let nu = sigma
            .difference(rho)?
            .scaled(t)
            .with_kind(FieldKind::Charge);
        let (lhs, rhs) = problem.stability_check(rho, &nu)?;
        worst = worst.min((lhs - rhs) / e);
    }
    Ok(StabilityReport {
        trials,
        worst_relative_slack: worst,
        passed: worst >= -STABILITY_SLACK,
    })
}

/// Support cells at Chebyshev distance more than `band` cells from any cell
/// at or below `tau`. The grid minimizer rings in a thin band along the edge
/// of its support, so bulk checks skip that band.
fn bulk_cells(g: &Grid2D, v: &[f64], tau: f64, band: usize) -> Vec<usize> {
    let (nx, ny) = (g.nx(), g.ny());
    let mut out = Vec::new();
    for j in band..ny.saturating_sub(band) {
        for i in band..nx.saturating_sub(band) {
            let deep = (j - band..=j + band)
                .all(|jj| (i - band..=i + band).all(|ii| v[g.index(ii, jj)] > tau));
            if deep {
                out.push(g.index(i, j));
            }
        }
    }
    out
}

/// Width in cells of the edge band skipped by bulk checks.
pub const EDGE_BAND: usize = 2;

impl MeanFieldProblem {
    /// Largest relative deviation of `rho` from `1/(pi ell) - Q/(2 ell)` over
    /// the bulk of the support (see [`EDGE_BAND`]), where that value is
    /// positive. Cells holding a point charge are left out.
    pub fn plateau_deviation(&self, rho: &ScalarField2D) -> Result<f64> {
        self.check(rho)?;
        let g = &self.grid;
        let tau = support_threshold(self.ell);
        let cap = crate::bathtub::density_cap(self.ell);
        let two_ell = 2.0 * self.ell as f64;
        let v = rho.values();
        let mut worst = 0.0f64;
        for k in bulk_cells(g, v, tau, EDGE_BAND) {
            if self.point_cells.binary_search(&k).is_ok() {
                continue;
            }
            let q = self.smeared.as_ref().map_or(0.0, |s| s.values()[k]);
            let target = cap - q / two_ell;
            if target > 0.0 {
                worst = worst.max((v[k] - target).abs() / target);
            }
        }
        Ok(worst)
    }
}

/// Radius of the hole of a radial density around the origin, from the
/// missing mass `int_{|x| < r_probe} (cap - rho) = cap * pi r^2`.
pub fn hole_radius(rho: &ScalarField2D, cap: f64, r_probe: f64) -> f64 {
    let g = rho.grid();
    let area = g.cell_area();
    let mut deficit = 0.0;
    for (k, &v) in rho.values().iter().enumerate() {
        if norm(g.center_of(k)) < r_probe {
            deficit += (cap - v) * area;
        }
    }
    (deficit.max(0.0) / (cap * std::f64::consts::PI)).sqrt()
}

/// Exponent `kappa` of the least-squares fit `log rho ~ A - kappa |x|^2` over
/// the cells with `|x| >= r_min`. Needs the log-density of a free-energy
/// solution; `None` when fewer than ten cells qualify.
pub fn tail_exponent(sol: &MeanFieldSolution, r_min: f64) -> Option<f64> {
    let g = sol.density.grid();
    let logs = sol.log_density.as_ref()?;
    let pts: Vec<(f64, f64)> = (0..g.len())
        .filter_map(|k| {
            let r = norm(g.center_of(k));
            (r >= r_min && logs[k].is_finite()).then_some((r * r, logs[k]))
        })
        .collect();
    if pts.len() < 10 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(-sxy / sxx)
}
