//! Confining potentials `U`, optional mesoscopic disorder, and the checks
//! that a potential is a sensible trap.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{self, gradient, norm, FieldKind, Grid2D, Point, ScalarField2D};

/// Largest value of `t (1 - t^2)^2` on `[0, 1]`, at `t = 1/sqrt(5)`.
const BUMP_SLOPE: f64 = 0.286_216_701_119_973_1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialFamily {
    /// `|x|^s`.
    RadialPower { s: f64 },
    /// `a x^2 + b y^2`.
    Quadratic { a: f64, b: f64 },
    /// `c4 r^4 - c2 r^2 + c2^2 / (4 c4)`, minimal on the circle `r^2 = c2 / (2 c4)`.
    MexicanHat { c4: f64, c2: f64 },
    /// `(x^2 - d^2)^2 / (4 d^2) + y^2`: two unit-curvature wells at `(+-d, 0)`.
    DoubleWell { separation: f64 },
    /// Bilinear interpolation of a field stored as CSV.
    CustomTable { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderSpec {
    pub seed: u64,
    pub n_bumps: usize,
    /// Bump height. Defaults to half the largest value compatible with
    /// `||grad U_dis|| <= C N^(1/2 - alpha)`.
    #[serde(default)]
    pub amplitude: Option<f64>,
    /// Bump radius. Defaults to `N^(alpha - 1/2)`.
    #[serde(default)]
    pub width: Option<f64>,
    pub alpha: f64,
    /// Bump centers are drawn uniformly in `D(0, radius)`.
    pub radius: f64,
    #[serde(default = "one")]
    pub gradient_constant: f64,
}

fn one() -> f64 {
    1.0
}

impl DisorderSpec {
    pub fn width_for(&self, n_particles: usize) -> f64 {
        self.width
            .unwrap_or_else(|| (n_particles as f64).powf(self.alpha - 0.5))
    }

    pub fn amplitude_for(&self, n_particles: usize) -> f64 {
        self.amplitude.unwrap_or_else(|| {
            let w = self.width_for(n_particles);
            let bound = self.gradient_constant * (n_particles as f64).powf(0.5 - self.alpha);
            0.5 * bound * w / (6.0 * BUMP_SLOPE)
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::Config(format!(
                "disorder alpha must lie in (0, 1/2), got {}",
                self.alpha
            )));
        }
        if !(self.radius > 0.0 && self.gradient_constant > 0.0) {
            return Err(Error::Config(
                "disorder radius and gradient constant must be positive".into(),
            ));
        }
        if matches!(self.width, Some(w) if !(w > 0.0)) {
            return Err(Error::Config("disorder width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub family: PotentialFamily,
    #[serde(default)]
    pub disorder: Option<DisorderSpec>,
    /// Added to the raw potential. When absent, tables and disordered
    /// potentials are shifted so that their grid minimum is zero.
    #[serde(default)]
    pub offset: Option<f64>,
}

impl PotentialSpec {
    pub fn new(family: PotentialFamily) -> Self {
        Self {
            family,
            disorder: None,
            offset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Trap {
    Power(f64),
    Quadratic(f64, f64),
    MexicanHat(f64, f64),
    DoubleWell(f64),
    Table(ScalarField2D),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bump {
    pub center: Point,
    pub amplitude: f64,
    pub width: f64,
}

impl Bump {
    #[inline]
    fn eval(&self, x: Point) -> f64 {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        let t = (dx * dx + dy * dy) / (self.width * self.width);
        if t >= 1.0 {
            0.0
        } else {
            let s = 1.0 - t;
            self.amplitude * s * s * s
        }
    }
}

/// A realized potential: trap, disorder bumps and offset are fixed, so
/// evaluation is a pure function of the point.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    trap: Trap,
    bumps: Vec<Bump>,
    offset: f64,
}

impl Potential {
    /// Realizes `spec` for `n_particles` (which sets the disorder scale).
    /// Table paths are resolved against `base_dir`. When the spec has no
    /// explicit offset and carries a table or disorder, the result is shifted
    /// so that its minimum over `grid` is zero.
    pub fn from_spec(
        spec: &PotentialSpec,
        n_particles: usize,
        grid: &Grid2D,
        base_dir: Option<&Path>,
    ) -> Result<Self> {
        let trap = match &spec.family {
            PotentialFamily::RadialPower { s } => {
                if !(*s > 0.0) {
                    return Err(Error::Config(format!(
                        "radial power must be positive, got {s}"
                    )));
                }
                Trap::Power(*s)
            }
            PotentialFamily::Quadratic { a, b } => {
                if !(*a > 0.0 && *b > 0.0) {
                    return Err(Error::Config(
                        "quadratic coefficients must be positive".into(),
                    ));
                }
                Trap::Quadratic(*a, *b)
            }
            PotentialFamily::MexicanHat { c4, c2 } => {
                if !(*c4 > 0.0 && *c2 >= 0.0) {
                    return Err(Error::Config("mexican hat needs c4 > 0 and c2 >= 0".into()));
                }
                Trap::MexicanHat(*c4, *c2)
            }
            PotentialFamily::DoubleWell { separation } => {
                if !(*separation > 0.0) {
                    return Err(Error::Config(
                        "double well separation must be positive".into(),
                    ));
                }
                Trap::DoubleWell(*separation)
            }
            PotentialFamily::CustomTable { path } => {
                let full = match base_dir {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                let table = fields::read_csv_file(&full)?;
                table.check_finite()?;
                Trap::Table(table)
            }
        };
        let bumps = match &spec.disorder {
            Some(d) => realize_disorder(d, n_particles)?,
            None => Vec::new(),
        };
        let mut pot = Self {
            trap,
            bumps,
            offset: 0.0,
        };
        pot.offset = match spec.offset {
            Some(o) => o,
            None if !pot.bumps.is_empty() || matches!(pot.trap, Trap::Table(_)) => {
                -pot.raw_min_on(grid)
            }
            None => 0.0,
        };
        Ok(pot)
    }

    /// A disorder-free analytic potential with zero offset.
    pub fn analytic(family: PotentialFamily) -> Result<Self> {
        if matches!(family, PotentialFamily::CustomTable { .. }) {
            return Err(Error::InvalidArgument("tables need a grid".into()));
        }
        let g = Grid2D::centered(1.0, 2)?;
        Self::from_spec(&PotentialSpec::new(family), 1, &g, None)
    }

    pub fn radial_power(s: f64) -> Self {
        Self::analytic(PotentialFamily::RadialPower { s }).expect("valid power")
    }

    pub fn quadratic(a: f64, b: f64) -> Self {
        Self::analytic(PotentialFamily::Quadratic { a, b }).expect("valid coefficients")
    }

    pub fn mexican_hat(c4: f64, c2: f64) -> Self {
        Self::analytic(PotentialFamily::MexicanHat { c4, c2 }).expect("valid coefficients")
    }

    /// Potential given directly by a table (no disorder), shifted to a zero minimum.
    pub fn from_table(table: ScalarField2D) -> Result<Self> {
        table.check_finite()?;
        let offset = -table.min();
        Ok(Self {
            trap: Trap::Table(table),
            bumps: Vec::new(),
            offset,
        })
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn bumps(&self) -> &[Bump] {
        &self.bumps
    }

    fn trap_eval(&self, x: Point) -> f64 {
        match &self.trap {
            Trap::Power(s) => norm(x).powf(*s),
            Trap::Quadratic(a, b) => a * x[0] * x[0] + b * x[1] * x[1],
            Trap::MexicanHat(c4, c2) => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let u = r2 - c2 / (2.0 * c4);
                c4 * u * u
            }
            Trap::DoubleWell(d) => {
                let u = x[0] * x[0] - d * d;
                u * u / (4.0 * d * d) + x[1] * x[1]
            }
            Trap::Table(t) => {
                let (lo, hi) = t.grid().extent();
                let h = 0.5 * t.grid().spacing();
                let ox = (lo[0] + h - x[0]).max(x[0] - (hi[0] - h)).max(0.0);
                let oy = (lo[1] + h - x[1]).max(x[1] - (hi[1] - h)).max(0.0);
                t.interpolate(x) + ox * ox + oy * oy
            }
        }
    }

    /// Disorder part `U_dis(x)`.
    pub fn disorder_eval(&self, x: Point) -> f64 {
        self.bumps.iter().map(|b| b.eval(x)).sum()
    }

    fn raw(&self, x: Point) -> f64 {
        self.trap_eval(x) + self.disorder_eval(x)
    }

    fn raw_min_on(&self, grid: &Grid2D) -> f64 {
        (0..grid.len())
            .into_par_iter()
            .map(|k| self.raw(grid.center_of(k)))
            .reduce(|| f64::INFINITY, f64::min)
    }

    /// `U(x) >= 0`.
    pub fn eval(&self, x: Point) -> f64 {
        (self.raw(x) + self.offset).max(0.0)
    }

    /// `U` at every cell center.
    pub fn sample(&self, grid: &Grid2D) -> ScalarField2D {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|k| self.eval(grid.center_of(k)))
            .collect();
        ScalarField2D::new(*grid, FieldKind::Potential, values).expect("length matches grid")
    }

    pub fn sample_disorder(&self, grid: &Grid2D) -> ScalarField2D {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|k| self.disorder_eval(grid.center_of(k)))
            .collect();
        ScalarField2D::new(*grid, FieldKind::Potential, values).expect("length matches grid")
    }

    /// `U` as a function of `|x|` when it is rotation invariant by construction.
    pub fn radial_profile(&self) -> Option<impl Fn(f64) -> f64 + '_> {
        let radial = self.bumps.is_empty()
            && match self.trap {
                Trap::Power(_) | Trap::MexicanHat(..) => true,
                Trap::Quadratic(a, b) => a == b,
                _ => false,
            };
        radial.then(move || move |r: f64| self.eval([r, 0.0]))
    }

    /// Numerical radial symmetry test: on 64 rings up to `r_max`, the angular
    /// spread of `U` stays within `rel_tol` of the ring mean (plus a tiny
    /// absolute floor).
    pub fn is_numerically_radial(&self, r_max: f64, rel_tol: f64) -> bool {
        (1..=64).all(|k| {
            let r = r_max * k as f64 / 64.0;
            let vals: Vec<f64> = (0..72)
                .map(|a| {
                    let t = a as f64 * std::f64::consts::TAU / 72.0;
                    self.eval([r * t.cos(), r * t.sin()])
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let spread = vals.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
            spread <= rel_tol * mean.abs() + 1e-12
        })
    }

    /// Checks of the trap assumptions on `grid` for `n_particles` and filling `1/ell`.
    pub fn validate(&self, grid: &Grid2D, n_particles: usize, ell: u32) -> ValidationReport {
        validate(self, grid, n_particles, ell)
    }
}

fn realize_disorder(d: &DisorderSpec, n_particles: usize) -> Result<Vec<Bump>> {
    d.validate()?;
    let w = d.width_for(n_particles);
    let amp = d.amplitude_for(n_particles);
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let mut bumps: Vec<Bump> = Vec::with_capacity(d.n_bumps);
    let max_tries = 1000 * d.n_bumps.max(1);
    let mut tries = 0;
    while bumps.len() < d.n_bumps {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Config(format!(
                "could only place {} of {} disjoint bumps of width {w} in radius {}",
                bumps.len(),
                d.n_bumps,
                d.radius
            )));
        }
        let r = d.radius * rng.gen::<f64>().sqrt();
        let t = rng.gen::<f64>() * std::f64::consts::TAU;
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let c = [r * t.cos(), r * t.sin()];
        if bumps.iter().all(|b| fields::dist(b.center, c) >= 2.0 * w) {
            bumps.push(Bump {
                center: c,
                amplitude: sign * amp,
                width: w,
            });
        }
    }
    Ok(bumps)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub nonnegative: bool,
    /// `min` of `U` on the outer ring of the grid exceeds its max on the
    /// disk enclosing the sublevel set of area `pi ell`.
    pub confining: bool,
    pub growth_exponent: f64,
    /// Largest fraction of cells sharing one value (up to `1e-12` relative).
    pub max_level_fraction: f64,
    pub flat_piece: bool,
    pub boundary_length: f64,
    pub boundary_length_ratio: f64,
    pub disorder_gradient_max: Option<f64>,
    /// `max |grad U_dis| / N^(1/2 - alpha)`, to compare with the configured constant.
    pub disorder_gradient_ratio: Option<f64>,
    pub warnings: Vec<String>,
}

fn validate(pot: &Potential, grid: &Grid2D, n_particles: usize, ell: u32) -> ValidationReport {
    let u = pot.sample(grid);
    let vals = u.values();
    let mut warnings = Vec::new();
    let nonnegative = vals.iter().all(|&v| v >= 0.0);

    // Sublevel set of area pi*ell on the grid.
    let mut sorted: Vec<f64> = vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let need = ((std::f64::consts::PI * ell as f64) / grid.cell_area()).ceil() as usize;
    let e0 = sorted[need.min(sorted.len() - 1)];
    let r_in = grid
        .centers()
        .zip(vals)
        .filter(|(_, &v)| v <= e0)
        .map(|(x, _)| norm(x))
        .fold(0.0f64, f64::max);

    let half = grid.inset([0.0, 0.0]);
    let ring_lo = 0.9 * half;
    let mut ring_min = f64::INFINITY;
    let mut inner_max = 0.0f64;
    for (x, &v) in grid.centers().zip(vals) {
        if grid.inset(x) < 0.1 * half {
            ring_min = ring_min.min(v);
        }
        if norm(x) <= r_in + 0.5 {
            inner_max = inner_max.max(v);
        }
    }
    let confining = ring_min > inner_max;
    if !confining {
        warnings.push(format!(
            "potential on the outer ring (min {ring_min:.4}) does not exceed its maximum near the support ({inner_max:.4})"
        ));
    }

    let ring_mean = |r: f64| {
        (0..256)
            .map(|a| {
                let t = a as f64 * std::f64::consts::TAU / 256.0;
                pot.eval([r * t.cos(), r * t.sin()])
            })
            .sum::<f64>()
            / 256.0
    };
    let (r1, r2) = (0.6 * ring_lo, ring_lo);
    let growth_exponent = (ring_mean(r2) / ring_mean(r1)).ln() / (r2 / r1).ln();

    let scale = sorted.last().copied().unwrap_or(0.0).abs().max(1e-300);
    let mut longest = 1usize;
    let mut run = 1usize;
    for w in sorted.windows(2) {
        if (w[1] - w[0]).abs() <= 1e-12 * scale {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 1;
        }
    }
    let max_level_fraction = longest as f64 / sorted.len() as f64;
    let flat_piece = max_level_fraction > 0.005;
    if flat_piece {
        warnings.push(format!(
            "flat piece: {:.2}% of cells share one value of U",
            100.0 * max_level_fraction
        ));
    }

    let boundary_length = fields::level_set_length(&u, e0);
    let boundary_length_ratio = boundary_length / (n_particles as f64).sqrt();

    let (disorder_gradient_max, disorder_gradient_ratio) = if pot.bumps.is_empty() {
        (None, None)
    } else {
        (Some(gradient(&pot.sample_disorder(grid)).max_norm()), None)
    };

    ValidationReport {
        nonnegative,
        confining,
        growth_exponent,
        max_level_fraction,
        flat_piece,
        boundary_length,
        boundary_length_ratio,
        disorder_gradient_max,
        disorder_gradient_ratio,
        warnings,
    }
}

/// Full validation of a spec, including the disorder gradient ratio.
pub fn validate_assumption(
    spec: &PotentialSpec,
    grid: &Grid2D,
    n_particles: usize,
    ell: u32,
    base_dir: Option<&Path>,
) -> Result<ValidationReport> {
    let pot = Potential::from_spec(spec, n_particles, grid, base_dir)?;
    let mut report = pot.validate(grid, n_particles, ell);
    if let (Some(d), Some(g)) = (&spec.disorder, report.disorder_gradient_max) {
        let ratio = g / (n_particles as f64).powf(0.5 - d.alpha);
        report.disorder_gradient_ratio = Some(ratio);
        if ratio > d.gradient_constant {
            report.warnings.push(format!(
                "disorder gradient ratio {ratio:.3} exceeds the configured constant {}",
                d.gradient_constant
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disorder(alpha: f64) -> DisorderSpec {
        DisorderSpec {
            seed: 11,
            n_bumps: 40,
            amplitude: None,
            width: None,
            alpha,
            radius: 1.5,
            gradient_constant: 1.0,
        }
    }

    #[test]
    fn analytic_examples() {
        assert_eq!(Potential::quadratic(1.0, 1.0).eval([0.0, 0.0]), 0.0);
        assert!((Potential::radial_power(2.0).eval([2.0, 0.0]) - 4.0).abs() < 1e-14);
        let hat = Potential::mexican_hat(1.0, 4.0);
        assert!(hat.eval([2f64.sqrt(), 0.0]).abs() < 1e-14);
        assert!((hat.eval([0.0, 0.0]) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn bump_slope_constant() {
        let t = 1.0 / 5f64.sqrt();
        assert!((t * (1.0 - t * t).powi(2) - BUMP_SLOPE).abs() < 1e-15);
    }

    #[test]
    fn disorder_is_deterministic_and_nonnegative() {
        let g = Grid2D::centered(3.0, 128).unwrap();
        let spec = PotentialSpec {
            family: PotentialFamily::Quadratic { a: 1.0, b: 1.0 },
            disorder: Some(disorder(0.25)),
            offset: None,
        };
        let a = Potential::from_spec(&spec, 10_000, &g, None).unwrap();
        let b = Potential::from_spec(&spec, 10_000, &g, None).unwrap();
        let x = [0.31, -0.2];
        assert_eq!(a.eval(x).to_bits(), b.eval(x).to_bits());
        assert_eq!(a.sample(&g), b.sample(&g));
        assert!(a.sample(&g).min() >= 0.0);
        assert!(a.sample(&g).min() < 1e-12);
        for (p, q) in a.bumps().iter().zip(a.bumps().iter().skip(1)) {
            assert!(fields::dist(p.center, q.center) >= 2.0 * p.width - 1e-12);
        }
    }

    #[test]
    fn disorder_gradient_within_bound() {
        let g = Grid2D::centered(2.5, 512).unwrap();
        let spec = PotentialSpec {
            family: PotentialFamily::Quadratic { a: 1.0, b: 1.0 },
            disorder: Some(disorder(0.25)),
            offset: None,
        };
        let rep = validate_assumption(&spec, &g, 10_000, 2, None).unwrap();
        let ratio = rep.disorder_gradient_ratio.unwrap();
        assert!(ratio <= 1.0 && ratio > 0.3, "{ratio}");
    }

    #[test]
    fn growth_exponent_of_quadratic() {
        let g = Grid2D::centered(4.0, 200).unwrap();
        let rep = Potential::radial_power(2.0).validate(&g, 100, 2);
        assert!((rep.growth_exponent - 2.0).abs() < 1e-9);
        assert!(!rep.flat_piece && rep.confining && rep.nonnegative);
        // Circle of radius sqrt(2).
        assert!((rep.boundary_length - 2.0 * std::f64::consts::PI * 2f64.sqrt()).abs() < 0.02);
    }

    #[test]
    fn flat_patch_is_flagged() {
        let g = Grid2D::centered(3.0, 100).unwrap();
        let t = ScalarField2D::from_fn(g, FieldKind::Potential, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            if r2 < 0.25 {
                0.0
            } else {
                r2 - 0.25
            }
        });
        let rep = Potential::from_table(t).unwrap().validate(&g, 100, 2);
        assert!(rep.flat_piece);
        assert!(!rep.warnings.is_empty());
    }

    #[test]
    fn table_extends_outside() {
        let g = Grid2D::centered(1.0, 10).unwrap();
        let t = ScalarField2D::from_fn(g, FieldKind::Potential, |x| x[0] * x[0] + x[1] * x[1]);
        let p = Potential::from_table(t).unwrap();
        assert!(p.eval([3.0, 0.0]) > p.eval([0.95, 0.0]));
    }

    #[test]
    fn spec_parses_from_toml() {
        let text = r#"
            family = { kind = "mexican_hat", c4 = 1.0, c2 = 4.0 }
            [disorder]
            seed = 3
            n_bumps = 5
            alpha = 0.25
            radius = 1.0
        "#;
        let spec: PotentialSpec = toml::from_str(text).unwrap();
        assert_eq!(
            spec.family,
            PotentialFamily::MexicanHat { c4: 1.0, c2: 4.0 }
        );
        assert_eq!(spec.disorder.unwrap().gradient_constant, 1.0);
    }

    #[test]
    fn radial_detection() {
        assert!(Potential::mexican_hat(1.0, 4.0).radial_profile().is_some());
        assert!(Potential::quadratic(1.0, 2.0).radial_profile().is_none());
        assert!(Potential::quadratic(1.0, 1.0).is_numerically_radial(3.0, 0.01));
        assert!(!Potential::quadratic(1.0, 2.0).is_numerically_radial(3.0, 0.01));
    }
}
