//! Metropolis sampling of the plasma Gibbs measure `exp(-N H_N)` and a
//! tensor-grid quadrature oracle for very small `N`.
//!
//! Particles live in scaled coordinates. The Hamiltonian is
//! `H_N = sum_i (sum_j q_j log 1/|x_i - a_j| + |x_i|^2)
//!      + (2 ell / N) sum_{k<l} log 1/|x_k - x_l|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bathtub::density_cap;
use crate::error::{Error, Result};
use crate::fields::{norm, FieldKind, Grid2D, Point, PointChargeSet, ScalarField2D};
use crate::potentials::Potential;

/// Squared distance below which two points count as coincident.
const COINCIDENCE_SQ: f64 = 1e-24;
/// Batches per half-chain for batch-means error bars.
const BATCHES_PER_HALF: usize = 10;
/// Radial histogram resolution and reach.
const RADIAL_BIN: f64 = 1e-3;
const RADIAL_MAX: f64 = 12.0;
/// Burn-in proposals between two adjustments of the proposal width.
const TUNE_EVERY: usize = 200;
const TARGET_ACCEPTANCE: f64 = 0.3;

/// Particle positions in scaled coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PlasmaState {
    positions: Vec<Point>,
}

impl PlasmaState {
    /// Rejects coincident particles and particles sitting on a charge.
    pub fn new(positions: Vec<Point>, charges: &PointChargeSet) -> Result<Self> {
        for (i, &x) in positions.iter().enumerate() {
            if !(x[0].is_finite() && x[1].is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "particle {i} is not finite"
                )));
            }
            for y in &positions[..i] {
                if dist_sq(x, *y) < COINCIDENCE_SQ {
                    return Err(Error::Singularity {
                        point: x,
                        charge: *y,
                    });
                }
            }
            for a in charges.positions() {
                if dist_sq(x, a) < COINCIDENCE_SQ {
                    return Err(Error::Singularity {
                        point: x,
                        charge: a,
                    });
                }
            }
        }
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[inline]
fn dist_sq(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// One-body part `sum_j q_j log 1/|x - a_j| + |x|^2`; `+inf` on a charge.
#[inline]
fn one_body(x: Point, charges: &[(Point, f64)]) -> f64 {
    let mut s = x[0] * x[0] + x[1] * x[1];
    for &(a, q) in charges {
        let d2 = dist_sq(x, a);
        if d2 < COINCIDENCE_SQ {
            return f64::INFINITY;
        }
        s -= 0.5 * q * d2.ln();
    }
    s
}

fn charge_list(charges: &PointChargeSet) -> Vec<(Point, f64)> {
    charges
        .entries()
        .iter()
        .map(|c| (c.position, c.charge))
        .collect()
}

/// `H_N` of a configuration, with `+inf` when two particles coincide or a
/// particle sits on a charge.
pub fn hamiltonian(state: &PlasmaState, charges: &PointChargeSet, ell: u32) -> f64 {
    hamiltonian_raw(state.positions(), &charge_list(charges), ell)
}

fn hamiltonian_raw(xs: &[Point], charges: &[(Point, f64)], ell: u32) -> f64 {
    let n = xs.len() as f64;
    let mut h = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        h += one_body(x, charges);
        let mut pair = 0.0;
        for y in &xs[..i] {
            let d2 = dist_sq(x, *y);
            if d2 < COINCIDENCE_SQ {
                return f64::INFINITY;
            }
            pair -= 0.5 * d2.ln();
        }
        h += 2.0 * ell as f64 / n * pair;
    }
    h
}

/// Monte Carlo settings. `steps` and `burn_in` count sweeps (one proposal
/// per particle); a sample is recorded every `thinning` sweeps after burn-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub burn_in: usize,
    /// Initial proposal width; `None` starts from `0.5/sqrt(N)`.
    #[serde(default)]
    pub proposal_sigma: Option<f64>,
    /// Scenario runs replace this with the scenario seed.
    #[serde(default)]
    pub seed: u64,
    pub n_chains: usize,
    #[serde(default = "one")]
    pub thinning: usize,
}

fn one() -> usize {
    1
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            burn_in: 2_000,
            proposal_sigma: None,
            seed: 0,
            n_chains: 4,
            thinning: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps <= self.burn_in {
            return Err(Error::Config("steps must exceed burn_in".into()));
        }
        if self.n_chains < 2 {
            return Err(Error::Config("at least two chains are needed".into()));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        if let Some(s) = self.proposal_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("proposal_sigma must be positive".into()));
            }
        }
        let records = self.records();
        if records < 2 * BATCHES_PER_HALF {
            return Err(Error::Config(format!(
                "need at least {} recorded sweeps per chain, got {records}",
                2 * BATCHES_PER_HALF
            )));
        }
        Ok(())
    }

    fn records(&self) -> usize {
        (self.steps - self.burn_in).div_ceil(self.thinning)
    }
}

/// Smooth test function used to compare one-particle densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Constant {
        value: f64,
    },
    /// `a x^2 + b y^2`.
    Quadratic {
        a: f64,
        b: f64,
    },
    /// `exp(-|x - center|^2 / width^2)`.
    Gaussian {
        center: Point,
        width: f64,
    },
    /// `cos(k . x + phase)`.
    Cosine {
        k: Point,
        phase: f64,
    },
}

impl TestFunction {
    pub fn name(&self) -> String {
        match self {
            Self::Constant { value } => format!("constant({value})"),
            Self::Quadratic { a, b } => format!("quadratic({a},{b})"),
            Self::Gaussian { center, width } => {
                format!("gaussian({},{};{width})", center[0], center[1])
            }
            Self::Cosine { k, phase } => format!("cosine({},{};{phase})", k[0], k[1]),
        }
    }

    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Quadratic { a, b } => a * x[0] * x[0] + b * x[1] * x[1],
            Self::Gaussian { center, width } => (-dist_sq(x, center) / (width * width)).exp(),
            Self::Cosine { k, phase } => (k[0] * x[0] + k[1] * x[1] + phase).cos(),
        }
    }

    pub fn grad(&self, x: Point) -> Point {
        match *self {
            Self::Constant { .. } => [0.0, 0.0],
            Self::Quadratic { a, b } => [2.0 * a * x[0], 2.0 * b * x[1]],
            Self::Gaussian { center, width } => {
                let g = -2.0 / (width * width) * self.eval(x);
                [g * (x[0] - center[0]), g * (x[1] - center[1])]
            }
            Self::Cosine { k, phase } => {
                let s = -(k[0] * x[0] + k[1] * x[1] + phase).sin();
                [s * k[0], s * k[1]]
            }
        }
    }

    /// Five bounded smooth functions used for weak-convergence checks.
    pub fn standard_set() -> Vec<TestFunction> {
        vec![
            Self::Gaussian {
                center: [0.0, 0.0],
                width: 0.8,
            },
            Self::Gaussian {
                center: [0.7, -0.3],
                width: 0.5,
            },
            Self::Gaussian {
                center: [-0.9, 0.6],
                width: 0.6,
            },
            Self::Cosine {
                k: [1.3, 0.0],
                phase: 0.0,
            },
            Self::Cosine {
                k: [0.9, 1.1],
                phase: 0.4,
            },
        ]
    }
}

/// Mean and batch-means standard error of a scalar observable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Per-particle potential energy `int U mu^(1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub value: f64,
    pub stderr: f64,
    #[serde(rename = "N")]
    pub n_particles: usize,
}

/// Histogram estimate of the one-particle density.
#[derive(Clone, Debug)]
pub struct DensityEstimate {
    /// Density of the samples that fall inside the grid, normalized to mass 1.
    pub histogram: ScalarField2D,
    pub counts: Vec<u64>,
    /// Batch-means standard error of the density in each cell.
    pub stderr: Vec<f64>,
    pub acceptance_rate: f64,
    /// Recorded configurations, pooled over chains.
    pub n_samples: usize,
    /// Fraction of particle samples outside the grid.
    pub outside_fraction: f64,
    /// Particle counts in radial bins of width `radial_bin`; the last bin
    /// collects everything beyond.
    pub radial_counts: Vec<u64>,
    pub radial_bin: f64,
}

impl DensityEstimate {
    pub fn stderr_max(&self) -> f64 {
        self.stderr.iter().copied().fold(0.0, f64::max)
    }

    /// Kolmogorov-Smirnov distance between the radial distribution of the
    /// samples and `cdf`, evaluated at the radial bin edges.
    pub fn radial_ks(&self, cdf: impl Fn(f64) -> f64) -> f64 {
        let total: u64 = self.radial_counts.iter().sum();
        let mut acc = 0u64;
        let mut worst = 0.0f64;
        for (b, &c) in self.radial_counts.iter().enumerate() {
            acc += c;
            let r = (b + 1) as f64 * self.radial_bin;
            worst = worst.max((acc as f64 / total as f64 - cdf(r)).abs());
        }
        worst
    }

    /// JSON summary written next to the histogram CSV.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "acceptance": self.acceptance_rate,
            "n_samples": self.n_samples,
            "stderr_max": self.stderr_max(),
            "outside_fraction": self.outside_fraction,
        })
    }
}

/// Everything a Monte Carlo run produces.
#[derive(Clone, Debug)]
pub struct PlasmaEstimate {
    pub density: DensityEstimate,
    pub energy: EnergyEstimate,
    pub second_moment: ObservableEstimate,
    /// Mean of `H_N / N`.
    pub hamiltonian: ObservableEstimate,
    /// Estimates of `int chi mu^(1)`, in the order of the test functions.
    pub tests: Vec<ObservableEstimate>,
    /// Split-chain potential scale reduction of the energy observable.
    pub r_hat: f64,
    pub proposal_sigma: f64,
    pub warnings: Vec<String>,
}

struct ChainOutput {
    /// Observable time series: U, |x|^2, H/N, then the test functions.
    series: Vec<Vec<f64>>,
    batch_counts: Vec<Vec<u32>>,
    batch_particles: Vec<u64>,
    radial: Vec<u64>,
    outside: u64,
    accepted: u64,
    proposed: u64,
    sigma: f64,
}

/// Runs `config.n_chains` independent Metropolis chains targeting
/// `exp(-N H_N)` and pools them in chain order. `grid` is the histogram
/// grid, `u` the potential whose mean gives the energy.
pub fn run_chains(
    charges: &PointChargeSet,
    ell: u32,
    n_particles: usize,
    config: &SamplerConfig,
    grid: &Grid2D,
    u: &Potential,
    tests: &[TestFunction],
) -> Result<PlasmaEstimate> {
    config.validate()?;
    if ell == 0 || n_particles == 0 {
        return Err(Error::InvalidArgument("ell and N must be positive".into()));
    }
    let list = charge_list(charges);
    let outputs: Vec<ChainOutput> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_one_chain(&list, ell, n_particles, config, grid, u, tests, c))
        .collect::<Result<_>>()?;
    pool(outputs, n_particles, grid, tests.len())
}

#[allow(clippy::too_many_arguments)]
fn run_one_chain(
    charges: &[(Point, f64)],
    ell: u32,
    n: usize,
    config: &SamplerConfig,
    grid: &Grid2D,
    u: &Potential,
    tests: &[TestFunction],
    chain: usize,
) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64 + 1);
    let nf = n as f64;
    let pair_weight = 2.0 * ell as f64;
    let mut sigma = config.proposal_sigma.unwrap_or(0.5 / nf.sqrt());

    // Start from a Gaussian cloud, redrawing any singular point.
    let mut xs: Vec<Point> = Vec::with_capacity(n);
    while xs.len() < n {
        let x = [
            0.7 * rng.sample::<f64, _>(StandardNormal),
            0.7 * rng.sample::<f64, _>(StandardNormal),
        ];
        if one_body(x, charges).is_finite() && xs.iter().all(|y| dist_sq(x, *y) >= COINCIDENCE_SQ) {
            xs.push(x);
        }
    }
    let mut ext: Vec<f64> = xs.iter().map(|&x| one_body(x, charges)).collect();

    let records = config.records();
    let n_batches = 2 * BATCHES_PER_HALF;
    let n_obs = 3 + tests.len();
    let mut series = vec![Vec::with_capacity(records); n_obs];
    let mut batch_counts = vec![vec![0u32; grid.len()]; n_batches];
    let mut batch_particles = vec![0u64; n_batches];
    let n_radial = (RADIAL_MAX / RADIAL_BIN) as usize + 1;
    let mut radial = vec![0u64; n_radial];
    let mut outside = 0u64;
    let (mut accepted, mut proposed) = (0u64, 0u64);
    let (mut tune_acc, mut tune_prop) = (0usize, 0usize);
    let mut record = 0usize;

    for sweep in 0..config.steps {
        let burning = sweep < config.burn_in;
        for i in 0..n {
            let old = xs[i];
            let new = [
                old[0] + sigma * rng.sample::<f64, _>(StandardNormal),
                old[1] + sigma * rng.sample::<f64, _>(StandardNormal),
            ];
            let e_new = one_body(new, charges);
            let mut ok = e_new.is_finite();
            let mut d_pair = 0.0;
            if ok {
                for (l, &y) in xs.iter().enumerate() {
                    if l == i {
                        continue;
                    }
                    let dn = dist_sq(new, y);
                    if dn < COINCIDENCE_SQ {
                        ok = false;
                        break;
                    }
                    d_pair += 0.5 * (dist_sq(old, y) / dn).ln();
                }
            }
            let mut acc = false;
            if ok {
                let delta = nf * (e_new - ext[i]) + pair_weight * d_pair;
                acc = delta <= 0.0 || rng.gen::<f64>().ln() < -delta;
                if acc {
                    xs[i] = new;
                    ext[i] = e_new;
                }
            }
            if burning {
                tune_prop += 1;
                tune_acc += acc as usize;
                if tune_prop == TUNE_EVERY {
                    let rate = tune_acc as f64 / tune_prop as f64;
                    sigma *= (2.0 * (rate - TARGET_ACCEPTANCE)).exp();
                    tune_acc = 0;
                    tune_prop = 0;
                }
            } else {
                proposed += 1;
                accepted += acc as u64;
            }
        }
        if burning || (sweep - config.burn_in) % config.thinning != 0 {
            continue;
        }
        let batch = record * n_batches / records;
        let (mut su, mut sm) = (0.0, 0.0);
        let mut st = vec![0.0; tests.len()];
        for &x in &xs {
            su += u.eval(x);
            sm += x[0] * x[0] + x[1] * x[1];
            for (s, t) in st.iter_mut().zip(tests) {
                *s += t.eval(x);
            }
            match grid.cell_of(x) {
                Some((ci, cj)) => batch_counts[batch][grid.index(ci, cj)] += 1,
                None => outside += 1,
            }
            let rb = ((norm(x) / RADIAL_BIN) as usize).min(n_radial - 1);
            radial[rb] += 1;
        }
        batch_particles[batch] += n as u64;
        let h = hamiltonian_raw(&xs, charges, ell) / nf;
        if !(su.is_finite() && h.is_finite()) {
            return Err(Error::Discretization(format!(
                "non-finite energy in chain {chain} at sweep {sweep}"
            )));
        }
        series[0].push(su / nf);
        series[1].push(sm / nf);
        series[2].push(h);
        for (k, s) in st.into_iter().enumerate() {
            series[3 + k].push(s / nf);
        }
        record += 1;
    }
    Ok(ChainOutput {
        series,
        batch_counts,
        batch_particles,
        radial,
        outside,
        accepted,
        proposed,
        sigma,
    })
}

/// Batch means over the fixed batch layout of every chain.
fn batch_estimate(outputs: &[ChainOutput], obs: usize) -> ObservableEstimate {
    let mut means = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for o in outputs {
        let s = &o.series[obs];
        let nb = 2 * BATCHES_PER_HALF;
        for b in 0..nb {
            let lo = b * s.len() / nb;
            let hi = (b + 1) * s.len() / nb;
            let chunk = &s[lo..hi];
            means.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
        }
        total += s.iter().sum::<f64>();
        count += s.len();
    }
    let value = total / count as f64;
    let m = means.len() as f64;
    let mb = means.iter().sum::<f64>() / m;
    let var = means.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / (m - 1.0);
    ObservableEstimate {
        value,
        stderr: (var / m).sqrt(),
    }
}

/// Split-chain R-hat: each chain is cut in two halves.
fn split_r_hat(outputs: &[ChainOutput], obs: usize) -> f64 {
    let halves: Vec<&[f64]> = outputs
        .iter()
        .flat_map(|o| {
            let s = &o.series[obs];
            let mid = s.len() / 2;
            [&s[..mid], &s[mid..2 * mid]]
        })
        .collect();
    let n = halves[0].len() as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return 1.0;
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

fn pool(
    outputs: Vec<ChainOutput>,
    n: usize,
    grid: &Grid2D,
    n_tests: usize,
) -> Result<PlasmaEstimate> {
    let area = grid.cell_area();
    let cells = grid.len();
    let mut counts = vec![0u64; cells];
    let mut radial = vec![0u64; outputs[0].radial.len()];
    let (mut outside, mut accepted, mut proposed) = (0u64, 0u64, 0u64);
    let mut batch_densities: Vec<Vec<f64>> = Vec::new();
    for o in &outputs {
        for (bc, &np) in o.batch_counts.iter().zip(&o.batch_particles) {
            for (c, &b) in counts.iter_mut().zip(bc) {
                *c += b as u64;
            }
            batch_densities.push(
                bc.iter()
                    .map(|&b| b as f64 / (np.max(1) as f64 * area))
                    .collect(),
            );
        }
        for (r, &b) in radial.iter_mut().zip(&o.radial) {
            *r += b;
        }
        outside += o.outside;
        accepted += o.accepted;
        proposed += o.proposed;
    }
    let inside: u64 = counts.iter().sum();
    let total = inside + outside;
    let hist: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / (inside.max(1) as f64 * area))
        .collect();
    let nb = batch_densities.len() as f64;
    let stderr: Vec<f64> = (0..cells)
        .map(|k| {
            let m = batch_densities.iter().map(|d| d[k]).sum::<f64>() / nb;
            let v = batch_densities
                .iter()
                .map(|d| (d[k] - m).powi(2))
                .sum::<f64>()
                / (nb - 1.0);
            (v / nb).sqrt()
        })
        .collect();
    let acceptance_rate = accepted as f64 / proposed.max(1) as f64;
    let energy = batch_estimate(&outputs, 0);
    let r_hat = split_r_hat(&outputs, 0);
    let mut warnings = Vec::new();
    if !(0.05..=0.8).contains(&acceptance_rate) {
        warnings.push(format!(
            "acceptance rate {acceptance_rate:.3} outside [0.05, 0.8] after tuning"
        ));
    }
    if r_hat > 1.05 {
        warnings.push(format!("split R-hat {r_hat:.3} exceeds 1.05"));
    }
    let outside_fraction = outside as f64 / total.max(1) as f64;
    if outside_fraction > 1e-3 {
        warnings.push(format!(
            "{:.2}% of samples fall outside the histogram grid",
            100.0 * outside_fraction
        ));
    }
    let density = DensityEstimate {
        histogram: ScalarField2D::new(*grid, FieldKind::Density, hist)?,
        counts,
        stderr,
        acceptance_rate,
        n_samples: outputs.iter().map(|o| o.series[0].len()).sum(),
        outside_fraction,
        radial_counts: radial,
        radial_bin: RADIAL_BIN,
    };
    Ok(PlasmaEstimate {
        density,
        energy: EnergyEstimate {
            value: energy.value,
            stderr: energy.stderr,
            n_particles: n,
        },
        second_moment: batch_estimate(&outputs, 1),
        hamiltonian: batch_estimate(&outputs, 2),
        tests: (0..n_tests)
            .map(|k| batch_estimate(&outputs, 3 + k))
            .collect(),
        r_hat,
        proposal_sigma: outputs[0].sigma,
        warnings,
    })
}

/// Exact expectations of the finite-`N` Gibbs measure by midpoint quadrature.
#[derive(Clone, Debug)]
pub struct OracleResult {
    pub density: ScalarField2D,
    /// `int U mu^(1)`.
    pub energy: f64,
    pub second_moment: f64,
    /// Mean of `H_N / N`.
    pub hamiltonian: f64,
}

/// Integrates `exp(-N H_N)` over the `N`-fold product of the cell centers of
/// `grid`, for `N <= 3`. For `N = 3` the grid may have at most 64 cells per
/// axis.
pub fn quadrature_oracle(
    charges: &PointChargeSet,
    ell: u32,
    n: usize,
    grid: &Grid2D,
    u: &Potential,
) -> Result<OracleResult> {
    if !(1..=3).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "quadrature oracle supports N in 1..=3, got {n}"
        )));
    }
    if n == 3 && (grid.nx() > 64 || grid.ny() > 64) {
        return Err(Error::InvalidArgument(
            "N = 3 quadrature needs at most 64 cells per axis".into(),
        ));
    }
    let list = charge_list(charges);
    let nf = n as f64;
    let pts: Vec<Point> = grid.centers().collect();
    let cells = pts.len();
    let single: Vec<f64> = pts.iter().map(|&x| one_body(x, &list)).collect();
    let uv: Vec<f64> = pts.iter().map(|&x| u.eval(x)).collect();
    let r2: Vec<f64> = pts.iter().map(|x| x[0] * x[0] + x[1] * x[1]).collect();
    let pw = 2.0 * ell as f64 / nf;
    let pair = |a: usize, b: usize| -> f64 {
        let d2 = dist_sq(pts[a], pts[b]);
        if d2 < COINCIDENCE_SQ {
            f64::INFINITY
        } else {
            -0.5 * pw * d2.ln()
        }
    };
    let table: Option<Vec<f64>> = (n == 3).then(|| {
        (0..cells * cells)
            .map(|k| pair(k / cells, k % cells))
            .collect()
    });
    let pair_at = |a: usize, b: usize| -> f64 {
        match &table {
            Some(t) => t[a * cells + b],
            None => pair(a, b),
        }
    };

    // Visits every tuple with first index `a`; `f` gets (indices, H).
    let visit = |a: usize, f: &mut dyn FnMut(&[usize], f64)| match n {
        1 => f(&[a], single[a]),
        2 => {
            for b in 0..cells {
                f(&[a, b], single[a] + single[b] + pair_at(a, b));
            }
        }
        _ => {
            for b in 0..cells {
                let hab = single[a] + single[b] + pair_at(a, b);
                if !hab.is_finite() {
                    continue;
                }
                for c in 0..cells {
                    f(&[a, b, c], hab + single[c] + pair_at(a, c) + pair_at(b, c));
                }
            }
        }
    };

    let h_min = (0..cells)
        .into_par_iter()
        .map(|a| {
            let mut m = f64::INFINITY;
            visit(a, &mut |_, h| m = m.min(h));
            m
        })
        .reduce(|| f64::INFINITY, f64::min);
    if !h_min.is_finite() {
        return Err(Error::Discretization(
            "every quadrature node is singular".into(),
        ));
    }

    struct Acc {
        z: f64,
        marginal: Vec<f64>,
        u: f64,
        r2: f64,
        h: f64,
    }
    let chunk = cells.div_ceil(8);
    let partials: Vec<Acc> = (0..cells)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|firsts| {
            let mut acc = Acc {
                z: 0.0,
                marginal: vec![0.0; cells],
                u: 0.0,
                r2: 0.0,
                h: 0.0,
            };
            for &a in firsts {
                visit(a, &mut |idx, h| {
                    let w = (-nf * (h - h_min)).exp();
                    if w == 0.0 {
                        return;
                    }
                    acc.z += w;
                    acc.h += w * h;
                    for &i in idx {
                        acc.marginal[i] += w;
                        acc.u += w * uv[i];
                        acc.r2 += w * r2[i];
                    }
                });
            }
            acc
        })
        .collect();
    let mut total = Acc {
        z: 0.0,
        marginal: vec![0.0; cells],
        u: 0.0,
        r2: 0.0,
        h: 0.0,
    };
    for p in partials {
        total.z += p.z;
        total.u += p.u;
        total.r2 += p.r2;
        total.h += p.h;
        for (m, v) in total.marginal.iter_mut().zip(p.marginal) {
            *m += v;
        }
    }
    let scale = 1.0 / (total.z * nf);
    let area = grid.cell_area();
    let density: Vec<f64> = total.marginal.iter().map(|m| m * scale / area).collect();
    Ok(OracleResult {
        density: ScalarField2D::new(*grid, FieldKind::Density, density)?,
        energy: total.u * scale,
        second_moment: total.r2 * scale,
        hamiltonian: total.h / total.z / nf,
    })
}

/// Outcome of the coarse-grained density bound.
#[derive(Clone, Debug, Serialize)]
pub struct IncompressibilityReport {
    pub checked: bool,
    pub notice: Option<String>,
    /// Block side and edge band, in scaled units.
    pub block_side: f64,
    pub band: f64,
    pub bound: f64,
    pub max_block_mean: f64,
    pub blocks_checked: usize,
    /// `(block column, block row, mean)` of every offending block.
    pub violations: Vec<(usize, usize, f64)>,
    pub passed: bool,
}

/// Below this particle number the coarse-grained bound is not checked.
pub const INCOMPRESSIBILITY_MIN_N: usize = 10;

/// Averages the histogram over blocks of side `3/sqrt(N)` and compares the
/// block means with `1.1/(pi ell)`, skipping blocks whose center lies within
/// `3/sqrt(N)` of the edge of `{mu > 1/(2 pi ell)}`.
pub fn incompressibility_check(
    est: &DensityEstimate,
    ell: u32,
    n: usize,
) -> IncompressibilityReport {
    let cap = density_cap(ell);
    let bound = 1.1 * cap;
    let band = 3.0 / (n as f64).sqrt();
    let g = est.histogram.grid();
    let h = g.spacing();
    let side = ((band / h).round() as usize).max(1);
    let mut report = IncompressibilityReport {
        checked: false,
        notice: None,
        block_side: side as f64 * h,
        band,
        bound,
        max_block_mean: 0.0,
        blocks_checked: 0,
        violations: Vec::new(),
        passed: true,
    };
    if n < INCOMPRESSIBILITY_MIN_N {
        report.notice = Some(format!(
            "skipped: the bound is asymptotic and N = {n} is below {INCOMPRESSIBILITY_MIN_N}"
        ));
        return report;
    }
    report.checked = true;
    let v = est.histogram.values();
    let tau = 0.5 * cap;
    let inside = |i: usize, j: usize| v[g.index(i, j)] > tau;
    let mut edge: Vec<Point> = Vec::new();
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            if !inside(i, j) {
                continue;
            }
            let boundary = i == 0
                || j == 0
                || i + 1 == g.nx()
                || j + 1 == g.ny()
                || !inside(i - 1, j)
                || !inside(i + 1, j)
                || !inside(i, j - 1)
                || !inside(i, j + 1);
            if boundary {
                edge.push(g.center(i, j));
            }
        }
    }
    for bj in 0..g.ny() / side {
        for bi in 0..g.nx() / side {
            let (i0, j0) = (bi * side, bj * side);
            let lo = g.center(i0, j0);
            let hi = g.center(i0 + side - 1, j0 + side - 1);
            let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
            if edge.iter().any(|e| dist_sq(*e, c) < band * band) {
                continue;
            }
            let mut s = 0.0;
            for j in j0..j0 + side {
                for i in i0..i0 + side {
                    s += v[g.index(i, j)];
                }
            }
            let mean = s / (side * side) as f64;
            report.blocks_checked += 1;
            report.max_block_mean = report.max_block_mean.max(mean);
            if mean > bound {
                report.violations.push((bi, bj, mean));
            }
        }
    }
    report.passed = report.violations.is_empty();
    report
}

/// Tail of the radial distribution against the envelope
/// `exp(-N C (|x|^2 - log N))`.
#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub r0: f64,
    pub samples_beyond: u64,
    pub tail_fraction: f64,
    /// Least-squares `C` from the areal density beyond `r0`; `None` when
    /// fewer than three radial shells hold samples.
    pub fitted_c: Option<f64>,
    /// Set when the fitted `C` is not positive.
    pub flagged: bool,
}

/// Shell width for the tail fit.
const DECAY_SHELL: f64 = 0.05;

pub fn decay_check(est: &DensityEstimate, n: usize) -> DecayReport {
    let nf = n as f64;
    let r0 = nf.ln().max(0.0).sqrt() + 1.0;
    let total: u64 = est.radial_counts.iter().sum();
    let last = est.radial_counts.len() - 1;
    let first_bin = (r0 / est.radial_bin).ceil() as usize;
    let beyond: u64 = est.radial_counts[first_bin.min(last + 1)..].iter().sum();
    // Group the fine bins into shells and fit log(areal density) against r^2.
    let per_shell = ((DECAY_SHELL / est.radial_bin).round() as usize).max(1);
    let mut pts = Vec::new();
    let mut b = first_bin;
    while b + per_shell <= last {
        let c: u64 = est.radial_counts[b..b + per_shell].iter().sum();
        if c > 0 {
            let (ra, rb) = (
                b as f64 * est.radial_bin,
                (b + per_shell) as f64 * est.radial_bin,
            );
            let rho = c as f64 / total as f64 / (std::f64::consts::PI * (rb * rb - ra * ra));
            let rm = 0.5 * (ra + rb);
            pts.push((rm * rm, rho.ln()));
        }
        b += per_shell;
    }
    let fitted_c = (pts.len() >= 3).then(|| {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        -sxy / sxx / nf
    });
    DecayReport {
        r0,
        samples_beyond: beyond,
        tail_fraction: beyond as f64 / total.max(1) as f64,
        flagged: fitted_c.is_some_and(|c| c <= 0.0),
        fitted_c,
    }
}

/// One row of [`mf_vs_mc`].
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mc: f64,
    pub mc_stderr: f64,
    pub reference: f64,
    pub difference: f64,
    pub sup_norm: f64,
    pub grad_l2: f64,
    pub grad_sup: f64,
    /// `(log N / N)^{1/2} |grad chi|_2 + N^{-1/2} |grad chi|_inf`.
    pub rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Smallest `K` with `|difference| <= K * rate` on every row with a
    /// nonzero rate.
    pub fitted_constant: f64,
}

/// Compares Monte Carlo test-function integrals with the same integrals of a
/// reference density. Norms of `chi` are taken on the reference grid.
pub fn mf_vs_mc(
    estimate: &PlasmaEstimate,
    reference: &ScalarField2D,
    tests: &[TestFunction],
    n: usize,
) -> Result<ComparisonReport> {
    if estimate.tests.len() != tests.len() {
        return Err(Error::InvalidArgument(format!(
            "{} test functions were sampled, {} given",
            estimate.tests.len(),
            tests.len()
        )));
    }
    let g = reference.grid();
    let area = g.cell_area();
    let nf = n as f64;
    let mut rows = Vec::with_capacity(tests.len());
    let mut fitted: f64 = 0.0;
    for (t, mc) in tests.iter().zip(&estimate.tests) {
        let r = reference.integrate(|x| t.eval(x));
        let (mut g2, mut gs, mut sup) = (0.0, 0.0f64, 0.0f64);
        for x in g.centers() {
            let d = t.grad(x);
            let m2 = d[0] * d[0] + d[1] * d[1];
            g2 += m2 * area;
            gs = gs.max(m2.sqrt());
            sup = sup.max(t.eval(x).abs());
        }
        let rate = (nf.ln() / nf).sqrt() * g2.sqrt() + gs / nf.sqrt();
        let difference = mc.value - r;
        if rate > 0.0 {
            fitted = fitted.max(difference.abs() / rate);
        }
        rows.push(ComparisonRow {
            name: t.name(),
            mc: mc.value,
            mc_stderr: mc.stderr,
            reference: r,
            difference,
            sup_norm: sup,
            grad_l2: g2.sqrt(),
            grad_sup: gs,
            rate,
        });
    }
    Ok(ComparisonReport {
        rows,
        fitted_constant: fitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    fn state(xs: Vec<Point>, q: &PointChargeSet) -> PlasmaState {
        PlasmaState::new(xs, q).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let none = PointChargeSet::empty();
        assert_eq!(hamiltonian(&state(vec![[1.0, 0.0]], &none), &none, 2), 1.0);
        let two = state(vec![[0.0, 0.0], [1.0, 0.0]], &none);
        assert!((hamiltonian(&two, &none, 2) - 1.0).abs() < 1e-15);
        let q = PointChargeSet::single([0.0, 0.0], 2.0).unwrap();
        let h = hamiltonian(&state(vec![[E, 0.0]], &q), &q, 2);
        assert!((h - (E * E - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn coincidences_are_rejected() {
        let q = PointChargeSet::single([0.5, 0.0], 1.0).unwrap();
        assert!(PlasmaState::new(vec![[0.5, 0.0]], &q).is_err());
        assert!(PlasmaState::new(vec![[0.1, 0.0], [0.1, 0.0]], &q).is_err());
        assert_eq!(
            hamiltonian_raw(&[[0.5, 0.0]], &charge_list(&q), 2),
            f64::INFINITY
        );
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        c.n_chains = 1;
        assert!(c.validate().is_err());
        let c = SamplerConfig {
            steps: 10,
            burn_in: 10,
            ..SamplerConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn small_run(n: usize, seed: u64) -> PlasmaEstimate {
        let g = Grid2D::centered(3.0, 30).unwrap();
        let cfg = SamplerConfig {
            steps: 3_000,
            burn_in: 500,
            seed,
            n_chains: 2,
            ..SamplerConfig::default()
        };
        run_chains(
            &PointChargeSet::empty(),
            2,
            n,
            &cfg,
            &g,
            &Potential::radial_power(2.0),
            &TestFunction::standard_set(),
        )
        .unwrap()
    }

    #[test]
    fn chains_are_deterministic() {
        let a = small_run(4, 11);
        let b = small_run(4, 11);
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.density.counts, b.density.counts);
        let c = small_run(4, 12);
        assert_ne!(a.density.counts, c.density.counts);
    }

    #[test]
    fn histogram_is_normalized() {
        let e = small_run(3, 5);
        assert!((e.density.histogram.mass() - 1.0).abs() < 1e-12);
        assert!(e.density.stderr.iter().all(|s| s.is_finite()));
        assert!(e.energy.stderr > 0.0);
        assert!((0.05..=0.8).contains(&e.density.acceptance_rate));
    }

    #[test]
    fn gaussian_oracle_is_exact() {
        let g = Grid2D::centered(4.0, 64).unwrap();
        let o = quadrature_oracle(
            &PointChargeSet::empty(),
            2,
            1,
            &g,
            &Potential::radial_power(2.0),
        )
        .unwrap();
        assert!((o.second_moment - 1.0).abs() < 1e-6);
        assert!((o.energy - 1.0).abs() < 1e-6);
        for (k, &v) in o.density.values().iter().enumerate() {
            let x = g.center_of(k);
            assert!((v - (-(x[0] * x[0] + x[1] * x[1])).exp() / PI).abs() < 1e-6);
        }
        assert!(quadrature_oracle(
            &PointChargeSet::empty(),
            2,
            4,
            &g,
            &Potential::radial_power(2.0)
        )
        .is_err());
    }

    #[test]
    fn two_particle_oracle_is_isotropic_and_depleted_by_a_charge() {
        let g = Grid2D::centered(2.5, 40).unwrap();
        let u = Potential::radial_power(2.0);
        let free = quadrature_oracle(&PointChargeSet::empty(), 2, 2, &g, &u).unwrap();
        // Compare the density on a ring at 0.6 along different directions.
        let ring: Vec<f64> = (0..16)
            .map(|k| {
                let t = k as f64 * PI / 8.0;
                free.density.interpolate([0.6 * t.cos(), 0.6 * t.sin()])
            })
            .collect();
        let mean = ring.iter().sum::<f64>() / ring.len() as f64;
        let spread = ring.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        assert!(spread / mean < 0.01, "{}", spread / mean);
        let q = PointChargeSet::single([0.0, 0.0], 2.0).unwrap();
        let holed = quadrature_oracle(&q, 2, 2, &g, &u).unwrap();
        let c = |o: &OracleResult| o.density.interpolate([0.0, 0.0]);
        assert!(c(&holed) < 0.5 * c(&free));
    }

    #[test]
    fn n1_chain_matches_gaussian() {
        let g = Grid2D::centered(4.0, 40).unwrap();
        let cfg = SamplerConfig {
            steps: 100_000,
            burn_in: 1_000,
            seed: 3,
            n_chains: 2,
            ..SamplerConfig::default()
        };
        let e = run_chains(
            &PointChargeSet::empty(),
            2,
            1,
            &cfg,
            &g,
            &Potential::radial_power(2.0),
            &[],
        )
        .unwrap();
        let ks = e.density.radial_ks(|r| 1.0 - (-r * r).exp());
        assert!(ks < 0.02, "{ks}");
        let d = decay_check(&e.density, 1);
        let c = d.fitted_c.unwrap();
        assert!((c - 1.0).abs() < 0.2, "{c}");
        assert!(!d.flagged);
    }

    #[test]
    fn incompressibility_detects_rescaled_histogram() {
        let g = Grid2D::centered(2.5, 100).unwrap();
        let cap = density_cap(2);
        let disk = ScalarField2D::from_fn(g, FieldKind::Density, |x| {
            if norm(x) < 2f64.sqrt() {
                cap
            } else {
                0.0
            }
        });
        let mut est = DensityEstimate {
            histogram: disk.clone(),
            counts: vec![0; g.len()],
            stderr: vec![0.0; g.len()],
            acceptance_rate: 0.3,
            n_samples: 1,
            outside_fraction: 0.0,
            radial_counts: vec![0; 10],
            radial_bin: 0.1,
        };
        let ok = incompressibility_check(&est, 2, 64);
        assert!(ok.checked && ok.passed && ok.blocks_checked > 0, "{ok:?}");
        est.histogram = disk.scaled(1.5);
        let bad = incompressibility_check(&est, 2, 64);
        assert!(!bad.passed && !bad.violations.is_empty());
        let small = incompressibility_check(&est, 2, 2);
        assert!(!small.checked && small.passed && small.notice.is_some());
    }

    #[test]
    fn heavy_tail_is_flagged() {
        let bin = 0.01;
        // Areal density growing with r beyond r0 = 1.
        let radial_counts: Vec<u64> = (0..400)
            .map(|b| {
                let r = (b as f64 + 0.5) * bin;
                (1e4 * r * (1.0 + r * r)) as u64
            })
            .collect();
        let g = Grid2D::centered(1.0, 4).unwrap();
        let est = DensityEstimate {
            histogram: ScalarField2D::zeros(g, FieldKind::Density),
            counts: vec![0; g.len()],
            stderr: vec![0.0; g.len()],
            acceptance_rate: 0.3,
            n_samples: 1,
            outside_fraction: 0.0,
            radial_counts,
            radial_bin: bin,
        };
        let d = decay_check(&est, 1);
        assert!(d.flagged, "{d:?}");
    }

    #[test]
    fn constant_test_function_difference_vanishes() {
        let e = small_run(2, 9);
        let g = Grid2D::centered(3.0, 30).unwrap();
        let rho = ScalarField2D::from_fn(g, FieldKind::Density, |x| {
            (-(x[0] * x[0] + x[1] * x[1])).exp()
        });
        let rho = rho.scaled(1.0 / rho.mass());
        let mut est = e.clone();
        est.tests = vec![ObservableEstimate {
            value: 2.5,
            stderr: 0.0,
        }];
        let rep = mf_vs_mc(&est, &rho, &[TestFunction::Constant { value: 2.5 }], 2).unwrap();
        assert!(rep.rows[0].difference.abs() < 1e-12);
        assert_eq!(rep.rows[0].rate, 0.0);
    }
}
