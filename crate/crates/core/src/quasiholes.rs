//! Quasi-hole layouts: the continuous charge `Q0 = 2/pi` on `D(0,R) \ Omega0`
//! and its discretizations into point charges with multiplicities.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bathtub::BathtubSolution;
use crate::error::{Error, Result};
use crate::fields::{
    level_set_length, norm, FieldKind, Grid2D, Point, PointCharge, PointChargeSet, ScalarField2D,
};
use crate::potentials::Potential;

/// Charge density of the continuous quasi-hole distribution.
pub const Q0_DENSITY: f64 = 2.0 / PI;

/// Margin added to the support radius in [`enclosing_radius`].
pub const RADIUS_MARGIN: f64 = 0.5;

/// A bounded planar set.
pub trait Region {
    /// Distance from `x` to the complement; zero outside.
    fn clearance(&self, x: Point) -> f64;
    /// Whether the closed square of side `side` centered at `center` lies inside.
    fn contains_square(&self, center: Point, side: f64) -> bool;
    fn area(&self) -> f64;
    fn boundary_length(&self) -> f64;
    /// Radius of a centered disk containing the set.
    fn bounding_radius(&self) -> f64;
}

fn square_corners(c: Point, side: f64) -> [Point; 4] {
    let s = 0.5 * side;
    [
        [c[0] - s, c[1] - s],
        [c[0] + s, c[1] - s],
        [c[0] + s, c[1] + s],
        [c[0] - s, c[1] + s],
    ]
}

/// Distance from `x` to the closed square.
fn dist_to_square(x: Point, c: Point, side: f64) -> f64 {
    let s = 0.5 * side;
    let dx = ((x[0] - c[0]).abs() - s).max(0.0);
    let dy = ((x[1] - c[1]).abs() - s).max(0.0);
    dx.hypot(dy)
}

/// `{inner <= |x| <= outer}`; a disk when `inner == 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annulus {
    pub inner: f64,
    pub outer: f64,
}

impl Region for Annulus {
    fn clearance(&self, x: Point) -> f64 {
        let r = norm(x);
        let c = if self.inner > 0.0 {
            (r - self.inner).min(self.outer - r)
        } else {
            self.outer - r
        };
        c.max(0.0)
    }

    fn contains_square(&self, center: Point, side: f64) -> bool {
        let far = square_corners(center, side)
            .iter()
            .fold(0.0f64, |m, &p| m.max(norm(p)));
        far <= self.outer && dist_to_square([0.0, 0.0], center, side) >= self.inner
    }

    fn area(&self) -> f64 {
        PI * (self.outer * self.outer - self.inner * self.inner)
    }

    fn boundary_length(&self) -> f64 {
        2.0 * PI * (self.outer + self.inner)
    }

    fn bounding_radius(&self) -> f64 {
        self.outer
    }
}

/// `Omega0' = D(0, R) \ Omega0` with `Omega0` the cells of positive bathtub occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct Complement {
    grid: Grid2D,
    occupancy: Vec<f64>,
    radius: f64,
    /// Occupied cells with an unoccupied neighbour.
    edge_cells: Vec<usize>,
    area: f64,
    boundary_length: f64,
}

/// Area of `D(0, r) ∩ [x0, x1] x [y0, y1]`.
pub fn disk_rect_area(r: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let a = x0.max(-r);
    let b = x1.min(r);
    if a >= b || y0 >= y1 {
        return 0.0;
    }
    let prim = |x: f64| {
        let x = x.clamp(-r, r);
        0.5 * (x * (r * r - x * x).max(0.0).sqrt() + r * r * (x / r).asin())
    };
    let s = |x: f64| (r * r - x * x).max(0.0).sqrt();
    let mut cuts = vec![a, b];
    for y in [y0, y1] {
        if y.abs() < r {
            let x = (r * r - y * y).sqrt();
            for c in [-x, x] {
                if c > a && c < b {
                    cuts.push(c);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (u, v) = (w[0], w[1]);
        if v <= u {
            continue;
        }
        let m = 0.5 * (u + v);
        let sm = s(m);
        let top = if sm <= y1 {
            prim(v) - prim(u)
        } else {
            y1 * (v - u)
        };
        let bottom = if -sm >= y0 {
            -(prim(v) - prim(u))
        } else {
            y0 * (v - u)
        };
        if sm.min(y1) > (-sm).max(y0) {
            area += top - bottom;
        }
    }
    area.max(0.0)
}

impl Complement {
    pub fn new(grid: &Grid2D, occupancy: &[f64], radius: f64) -> Result<Self> {
        if occupancy.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if !occupancy.iter().any(|&o| o > 0.0) {
            return Err(Error::InvalidArgument("Omega0 is empty".into()));
        }
        if !grid.covers_disk(radius) {
            return Err(Error::Domain(format!(
                "grid does not contain D(0, {radius})"
            )));
        }
        let h = grid.spacing();
        let mut area = 0.0;
        for (k, &o) in occupancy.iter().enumerate() {
            let c = grid.center_of(k);
            let frac = disk_rect_area(
                radius,
                c[0] - 0.5 * h,
                c[0] + 0.5 * h,
                c[1] - 0.5 * h,
                c[1] + 0.5 * h,
            ) / (h * h);
            if o > frac + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "D(0, {radius}) does not contain the occupied cell {:?}",
                    grid.coords(k)
                )));
            }
            area += (frac - o).max(0.0) * h * h;
        }
        let (nx, ny) = (grid.nx(), grid.ny());
        let edge_cells = (0..grid.len())
            .filter(|&k| {
                if occupancy[k] <= 0.0 {
                    return false;
                }
                let (i, j) = grid.coords(k);
                let free = |ii: usize, jj: usize| occupancy[grid.index(ii, jj)] <= 0.0;
                i == 0
                    || j == 0
                    || i == nx - 1
                    || j == ny - 1
                    || free(i - 1, j)
                    || free(i + 1, j)
                    || free(i, j - 1)
                    || free(i, j + 1)
            })
            .collect();
        let mask = ScalarField2D::new(
            *grid,
            FieldKind::Density,
            occupancy
                .iter()
                .map(|&o| if o > 0.0 { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let boundary_length = 2.0 * PI * radius + level_set_length(&mask, 0.5);
        Ok(Self {
            grid: *grid,
            occupancy: occupancy.to_vec(),
            radius,
            edge_cells,
            area,
            boundary_length,
        })
    }

    pub fn from_bathtub(bt: &BathtubSolution, radius: f64) -> Result<Self> {
        Self::new(bt.grid(), &bt.occupancy, radius)
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }
}

impl Region for Complement {
    fn clearance(&self, x: Point) -> f64 {
        let h = self.grid.spacing();
        let mut c = self.radius - norm(x);
        if c <= 0.0 {
            return 0.0;
        }
        if let Some((i, j)) = self.grid.cell_of(x) {
            if self.occupancy[self.grid.index(i, j)] > 0.0 {
                return 0.0;
            }
        }
        for &k in &self.edge_cells {
            c = c.min(dist_to_square(x, self.grid.center_of(k), h));
        }
        c
    }

    fn contains_square(&self, center: Point, side: f64) -> bool {
        let far = square_corners(center, side)
            .iter()
            .fold(0.0f64, |m, &p| m.max(norm(p)));
        if far > self.radius {
            return false;
        }
        let g = &self.grid;
        let h = g.spacing();
        let o = g.origin();
        // Cells meeting the open square.
        let eps = 1e-12 * h;
        let lo_i = ((center[0] - 0.5 * side + eps - o[0]) / h).floor();
        let hi_i = ((center[0] + 0.5 * side - eps - o[0]) / h).floor();
        let lo_j = ((center[1] - 0.5 * side + eps - o[1]) / h).floor();
        let hi_j = ((center[1] + 0.5 * side - eps - o[1]) / h).floor();
        if lo_i < 0.0 || lo_j < 0.0 || hi_i >= g.nx() as f64 || hi_j >= g.ny() as f64 {
            return false;
        }
        for j in lo_j as usize..=hi_j as usize {
            for i in lo_i as usize..=hi_i as usize {
                if self.occupancy[g.index(i, j)] > 0.0 {
                    return false;
                }
            }
        }
        true
    }

    fn area(&self) -> f64 {
        self.area
    }

    fn boundary_length(&self) -> f64 {
        self.boundary_length
    }

    fn bounding_radius(&self) -> f64 {
        self.radius
    }
}

/// A region with disjoint closed disks removed.
struct Excluding<'a> {
    base: &'a dyn Region,
    disks: &'a [(Point, f64)],
}

impl Region for Excluding<'_> {
    fn clearance(&self, x: Point) -> f64 {
        self.disks.iter().fold(self.base.clearance(x), |m, (c, r)| {
            m.min((crate::fields::dist(x, *c) - r).max(0.0))
        })
    }

    fn contains_square(&self, center: Point, side: f64) -> bool {
        self.base.contains_square(center, side)
            && self
                .disks
                .iter()
                .all(|(c, r)| dist_to_square(*c, center, side) >= *r)
    }

    fn area(&self) -> f64 {
        self.base.area() - self.disks.iter().map(|(_, r)| PI * r * r).sum::<f64>()
    }

    fn boundary_length(&self) -> f64 {
        self.base.boundary_length() + self.disks.iter().map(|(_, r)| 2.0 * PI * r).sum::<f64>()
    }

    fn bounding_radius(&self) -> f64 {
        self.base.bounding_radius()
    }
}

/// `max |x|` over the cells of `Omega0`, plus [`RADIUS_MARGIN`].
pub fn enclosing_radius(grid: &Grid2D, occupancy: &[f64]) -> Result<f64> {
    if occupancy.len() != grid.len() {
        return Err(Error::GridMismatch);
    }
    let r = occupancy
        .iter()
        .enumerate()
        .filter(|(_, &o)| o > 0.0)
        .map(|(k, _)| norm(grid.center_of(k)))
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    r.map(|r| r + RADIUS_MARGIN)
        .ok_or_else(|| Error::InvalidArgument("Omega0 is empty".into()))
}

/// `Q0 = 2/pi` on `D(0,R) \ Omega0`: per cell `(2/pi)(|cell ∩ D(0,R)| / h^2 - occupancy)`.
pub fn build_continuous(grid: &Grid2D, occupancy: &[f64], radius: f64) -> Result<ScalarField2D> {
    let region = Complement::new(grid, occupancy, radius)?;
    let h = grid.spacing();
    let values = (0..grid.len())
        .map(|k| {
            let c = grid.center_of(k);
            let frac = disk_rect_area(
                radius,
                c[0] - 0.5 * h,
                c[0] + 0.5 * h,
                c[1] - 0.5 * h,
                c[1] + 0.5 * h,
            ) / (h * h);
            Q0_DENSITY * (frac - region.occupancy[k]).max(0.0)
        })
        .collect();
    ScalarField2D::new(*grid, FieldKind::Charge, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Lattice,
    Annular,
    Cheese,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lattice" => Ok(Self::Lattice),
            "annular" => Ok(Self::Annular),
            "cheese" => Ok(Self::Cheese),
            other => Err(Error::Config(format!("unknown layout scheme '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiholeLayout {
    pub scheme: Scheme,
    #[serde(rename = "N")]
    pub n_particles: usize,
    /// Lattice spacing `sqrt(pi/N)` (also used for the residual lattice of the cheese scheme).
    pub delta: f64,
    #[serde(with = "charge_triples")]
    pub charges: PointChargeSet,
    /// Area of the region the layout discretizes.
    pub region_area: f64,
    /// Region area minus the area of the lattice squares (lattice part only).
    pub deficit: f64,
    /// `(2/pi) * region_area - total_charge`.
    pub shortfall: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

mod charge_triples {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        set: &PointChargeSet,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<[f64; 3]> = set
            .entries()
            .iter()
            .map(|e| [e.position[0], e.position[1], e.charge])
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<PointChargeSet, D::Error> {
        let v = Vec::<[f64; 3]>::deserialize(d)?;
        PointChargeSet::new(
            v.into_iter()
                .map(|[x, y, q]| PointCharge {
                    position: [x, y],
                    charge: q,
                })
                .collect(),
        )
        .map_err(serde::de::Error::custom)
    }
}

impl QuasiholeLayout {
    pub fn total_charge(&self) -> f64 {
        self.charges.total_charge()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(source, e.to_string()))
    }
}

/// `sqrt(pi / N)`.
pub fn lattice_spacing(n_particles: usize) -> f64 {
    (PI / n_particles as f64).sqrt()
}

/// Midpoints of the `delta`-squares of the lattice `delta Z^2` lying fully in `region`.
fn lattice_points(region: &dyn Region, delta: f64) -> Vec<Point> {
    let m = (region.bounding_radius() / delta).ceil() as i64 + 1;
    let mut out = Vec::new();
    for b in -m..m {
        for a in -m..m {
            let c = [(a as f64 + 0.5) * delta, (b as f64 + 0.5) * delta];
            if region.contains_square(c, delta) {
                out.push(c);
            }
        }
    }
    out
}

/// Charges `2/N` at the midpoints of the `delta`-squares fully inside `region`.
pub fn discretize_lattice(region: &dyn Region, n_particles: usize) -> Result<QuasiholeLayout> {
    if n_particles == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let delta = lattice_spacing(n_particles);
    let q = 2.0 / n_particles as f64;
    let points = lattice_points(region, delta);
    if points.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no lattice square of side {delta:.4} fits in the region"
        )));
    }
    let mut warnings = Vec::new();
    let area = region.area();
    let deficit = area - points.len() as f64 * delta * delta;
    if deficit > 0.5 * area {
        warnings.push(format!(
            "lattice spacing {delta:.4} leaves {:.0}% of the region uncovered",
            100.0 * deficit / area
        ));
    }
    let charges = PointChargeSet::new(
        points
            .into_iter()
            .map(|position| PointCharge {
                position,
                charge: q,
            })
            .collect(),
    )?;
    let shortfall = Q0_DENSITY * area - charges.total_charge();
    Ok(QuasiholeLayout {
        scheme: Scheme::Lattice,
        n_particles,
        delta,
        charges,
        region_area: area,
        deficit,
        shortfall,
        warnings,
    })
}

/// Radii `[a_k, b_k]` of `{U < mu}` for a radial `U` filled at `1/(pi ell)`
/// with unit mass, from a fine radial table up to `r_max`.
pub fn radial_bathtub(
    profile: impl Fn(f64) -> f64,
    ell: u32,
    r_max: f64,
) -> Result<Vec<(f64, f64)>> {
    const SAMPLES: usize = 100_000;
    let dr = r_max / SAMPLES as f64;
    let u: Vec<f64> = (0..=SAMPLES).map(|k| profile(k as f64 * dr)).collect();
    let target = PI * ell as f64;
    let intervals = |mu: f64| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut start = if u[0] < mu { Some(0.0) } else { None };
        for k in 0..SAMPLES {
            let (a, b) = (u[k] - mu, u[k + 1] - mu);
            if (a < 0.0) != (b < 0.0) {
                let r = (k as f64 + a / (a - b)) * dr;
                match start.take() {
                    Some(s) => out.push((s, r)),
                    None => start = Some(r),
                }
            }
        }
        if let Some(s) = start {
            out.push((s, r_max));
        }
        out
    };
    let area = |iv: &[(f64, f64)]| iv.iter().map(|(a, b)| PI * (b * b - a * a)).sum::<f64>();
    let (mut lo, mut hi) = (
        u.iter().copied().fold(f64::INFINITY, f64::min),
        u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    if area(&intervals(hi)) < target {
        return Err(Error::Domain(format!(
            "sublevel sets of U inside radius {r_max} cannot hold unit mass"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if area(&intervals(mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let iv = intervals(hi);
    if iv.last().is_some_and(|&(_, b)| b >= r_max) {
        return Err(Error::Domain(format!("radial support reaches {r_max}")));
    }
    Ok(iv)
}

/// Places the charge of each complement annulus `B_k` of `Omega0` inside
/// `D(0, R)` on its mid-circle, as equally spaced charges `2/N`; an innermost
/// complement disk shrinks to one charge at the origin. Counts round down.
pub fn annular_layout(
    u: &Potential,
    ell: u32,
    radius: f64,
    n_particles: usize,
) -> Result<QuasiholeLayout> {
    if n_particles == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    if !u.is_numerically_radial(radius, 0.01) {
        return Err(Error::InvalidArgument(
            "annular layout needs a radially symmetric U".into(),
        ));
    }
    let omega = radial_bathtub(|r| u.eval([r, 0.0]), ell, radius)?;
    let mut gaps = Vec::new();
    let mut prev = 0.0;
    for &(a, b) in &omega {
        if a > prev {
            gaps.push((prev, a));
        }
        prev = b;
    }
    if radius > prev {
        gaps.push((prev, radius));
    }
    let nf = n_particles as f64;
    let q = 2.0 / nf;
    let mut entries = Vec::new();
    let mut region_area = 0.0;
    for &(c, d) in &gaps {
        region_area += PI * (d * d - c * c);
        // (2/pi) * pi (d^2 - c^2) in units of 2/N.
        let count = (nf * (d * d - c * c) + 1e-6).floor() as usize;
        if count == 0 {
            continue;
        }
        if c == 0.0 {
            entries.push(PointCharge {
                position: [0.0, 0.0],
                charge: count as f64 * q,
            });
        } else {
            let mid = 0.5 * (c + d);
            for k in 0..count {
                let t = std::f64::consts::TAU * k as f64 / count as f64;
                entries.push(PointCharge {
                    position: [mid * t.cos(), mid * t.sin()],
                    charge: q,
                });
            }
        }
    }
    let charges = PointChargeSet::new(entries)?;
    let shortfall = Q0_DENSITY * region_area - charges.total_charge();
    Ok(QuasiholeLayout {
        scheme: Scheme::Annular,
        n_particles,
        delta: lattice_spacing(n_particles),
        charges,
        region_area,
        deficit: 0.0,
        shortfall,
        warnings: Vec::new(),
    })
}

/// Greedy packing of up to `disk_budget` disjoint disks into `region`, largest
/// inscribed disk first among the `candidates`, each replaced by a central
/// charge `(2/pi)|D_j|` rounded down to a multiple of `2/N`; the rest of the
/// region is filled by the lattice scheme.
pub fn cheese_layout(
    region: &dyn Region,
    candidates: &Grid2D,
    n_particles: usize,
    disk_budget: usize,
) -> Result<QuasiholeLayout> {
    if n_particles == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let nf = n_particles as f64;
    let delta = lattice_spacing(n_particles);
    // The origin joins the candidates so that holes of radial profiles are
    // centered exactly.
    let centers: Vec<Point> = std::iter::once([0.0, 0.0])
        .chain(candidates.centers())
        .collect();
    let mut clearance: Vec<f64> = centers.iter().map(|&x| region.clearance(x)).collect();
    let mut disks: Vec<(Point, f64)> = Vec::new();
    let mut entries = Vec::new();
    while disks.len() < disk_budget {
        let Some((best, &r)) = clearance
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        else {
            break;
        };
        let count = (nf * r * r + 1e-6).floor();
        if r < delta || count < 1.0 {
            break;
        }
        let c = centers[best];
        disks.push((c, r));
        entries.push(PointCharge {
            position: c,
            charge: count * 2.0 / nf,
        });
        for (k, x) in centers.iter().enumerate() {
            clearance[k] = clearance[k].min((crate::fields::dist(*x, c) - r).max(0.0));
        }
    }
    let rest = Excluding {
        base: region,
        disks: &disks,
    };
    let points = lattice_points(&rest, delta);
    let lattice_area = points.len() as f64 * delta * delta;
    entries.extend(points.into_iter().map(|position| PointCharge {
        position,
        charge: 2.0 / nf,
    }));
    if entries.is_empty() {
        return Err(Error::InvalidArgument(
            "no disk or lattice square fits in the region".into(),
        ));
    }
    let charges = PointChargeSet::new(entries)?;
    let region_area = region.area();
    Ok(QuasiholeLayout {
        scheme: Scheme::Cheese,
        n_particles,
        delta,
        shortfall: Q0_DENSITY * region_area - charges.total_charge(),
        charges,
        region_area,
        deficit: rest.area() - lattice_area,
        warnings: Vec::new(),
    })
}

/// Roots `sqrt(N) a_j` with multiplicities `N q_j / 2` in physical coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialSpec {
    pub roots: Vec<(f64, f64, u64)>,
}

impl PolynomialSpec {
    pub fn degree(&self) -> u64 {
        self.roots.iter().map(|r| r.2).sum()
    }
}

pub fn to_polynomial(layout: &QuasiholeLayout) -> Result<PolynomialSpec> {
    let nf = layout.n_particles as f64;
    let scale = nf.sqrt();
    let roots = layout
        .charges
        .entries()
        .iter()
        .map(|e| {
            let m = nf * e.charge / 2.0;
            let r = m.round();
            if (m - r).abs() > 1e-6 || r < 1.0 {
                return Err(Error::InvalidCharge(format!(
                    "charge {} at {:?} has non-integral multiplicity {m}",
                    e.charge, e.position
                )));
            }
            Ok((scale * e.position[0], scale * e.position[1], r as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolynomialSpec { roots })
}

/// `|int (Q0 - Q_delta) g|` with `Q0` integrated by the midpoint rule and `g`
/// interpolated at the layout points.
pub fn riemann_gap(g: &ScalarField2D, layout: &QuasiholeLayout, q0: &ScalarField2D) -> Result<f64> {
    g.check_same_grid(q0)?;
    let continuous = q0.dot(g)?;
    let discrete: f64 = layout
        .charges
        .entries()
        .iter()
        .map(|e| e.charge * g.interpolate(e.position))
        .sum();
    Ok((continuous - discrete).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bathtub::solve_bathtub;
    use proptest::prelude::*;

    fn quadratic_bathtub() -> BathtubSolution {
        let g = Grid2D::centered(2.5, 200).unwrap();
        solve_bathtub(&Potential::radial_power(2.0), 2, &g).unwrap()
    }

    #[test]
    fn disk_rect_area_cases() {
        let r = 1.3;
        assert!((disk_rect_area(r, -2.0, 2.0, -2.0, 2.0) - PI * r * r).abs() < 1e-12);
        assert!((disk_rect_area(r, 0.0, 2.0, 0.0, 2.0) - PI * r * r / 4.0).abs() < 1e-12);
        assert!((disk_rect_area(r, -0.1, 0.1, -0.1, 0.1) - 0.04).abs() < 1e-15);
        assert_eq!(disk_rect_area(r, 1.0, 2.0, 1.0, 2.0), 0.0);
        // Half-plane slice x > 0.5: area of the circular segment.
        let h = 0.5f64;
        let seg = r * r * (h / r).acos() - h * (r * r - h * h).sqrt();
        assert!((disk_rect_area(r, 0.5, 3.0, -3.0, 3.0) - seg).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn disk_rect_area_matches_sampling(x0 in -1.5f64..1.0, y0 in -1.5f64..1.0, w in 0.05f64..1.0, hgt in 0.05f64..1.0) {
            let r = 1.0;
            let exact = disk_rect_area(r, x0, x0 + w, y0, y0 + hgt);
            let n = 400;
            let mut inside = 0;
            for a in 0..n {
                for b in 0..n {
                    let x = x0 + (a as f64 + 0.5) * w / n as f64;
                    let y = y0 + (b as f64 + 0.5) * hgt / n as f64;
                    if x.hypot(y) < r { inside += 1; }
                }
            }
            let approx = inside as f64 / (n * n) as f64 * w * hgt;
            prop_assert!((exact - approx).abs() < 5e-3 * w * hgt + 1e-6);
        }
    }

    #[test]
    fn enclosing_radius_of_disk() {
        let bt = quadratic_bathtub();
        let r = enclosing_radius(bt.grid(), &bt.occupancy).unwrap();
        assert!((r - (2f64.sqrt() + 0.5)).abs() < bt.grid().spacing());
        let empty = vec![0.0; bt.grid().len()];
        assert!(enclosing_radius(bt.grid(), &empty).is_err());
    }

    #[test]
    fn continuous_charge_mass() {
        let bt = quadratic_bathtub();
        let r = 2f64.sqrt() + 0.5;
        let q = build_continuous(bt.grid(), &bt.occupancy, r).unwrap();
        let expected = 2.0 * (r * r - 2.0);
        assert!(
            (q.mass() - expected).abs() < 1e-9,
            "{} vs {expected}",
            q.mass()
        );
        // Q0 + 2 ell rho_bt is (2/pi) times the disk indicator.
        let two_ell = 4.0;
        for (k, (a, b)) in q.values().iter().zip(bt.density.values()).enumerate() {
            let c = q.grid().center_of(k);
            if norm(c) < r - 0.1 {
                assert!((a + two_ell * b - Q0_DENSITY).abs() < 1e-12);
            }
        }
        assert!(build_continuous(bt.grid(), &bt.occupancy, 1.0).is_err());
    }

    #[test]
    fn full_disk_gives_zero_charge() {
        let g = Grid2D::centered(2.0, 40).unwrap();
        let h = g.spacing();
        let occ: Vec<f64> = (0..g.len())
            .map(|k| {
                let c = g.center_of(k);
                disk_rect_area(
                    1.0,
                    c[0] - h / 2.0,
                    c[0] + h / 2.0,
                    c[1] - h / 2.0,
                    c[1] + h / 2.0,
                ) / (h * h)
            })
            .collect();
        let q = build_continuous(&g, &occ, 1.0).unwrap();
        assert!(q.max_abs() < 1e-12);
    }

    #[test]
    fn lattice_spacing_example() {
        assert!((lattice_spacing(400) - 0.08862).abs() < 1e-5);
    }

    #[test]
    fn lattice_on_annulus_counts() {
        // Annulus of area 2 pi.
        let region = Annulus {
            inner: 1.0,
            outer: 3f64.sqrt(),
        };
        let layout = discretize_lattice(&region, 100).unwrap();
        let m = layout.charges.len() as f64;
        assert!(layout
            .charges
            .entries()
            .iter()
            .all(|e| (e.charge - 0.02).abs() < 1e-15));
        assert!(m <= 200.0 && m > 100.0, "{m}");
        assert!(layout.deficit >= 0.0);
        let big = discretize_lattice(&region, 100_000).unwrap();
        let ratio = big.charges.len() as f64 / 200_000.0;
        assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn lattice_deficit_scales_like_delta() {
        let bt = quadratic_bathtub();
        let region = Complement::from_bathtub(&bt, 2f64.sqrt() + 0.5).unwrap();
        let mut scaled = Vec::new();
        for n in [1_000usize, 10_000, 100_000] {
            let l = discretize_lattice(&region, n).unwrap();
            assert!(l.deficit >= 0.0);
            assert!(l.deficit <= region.boundary_length() * l.delta * 2.0);
            assert!(l.charges.positions().all(|x| region.clearance(x) > 0.0));
            scaled.push(l.deficit * (n as f64).sqrt());
        }
        let (lo, hi) = scaled
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 3.0, "{scaled:?}");
    }

    #[test]
    fn lattice_points_avoid_support() {
        let bt = quadratic_bathtub();
        let region = Complement::from_bathtub(&bt, 2f64.sqrt() + 0.5).unwrap();
        let layout = discretize_lattice(&region, 4_000).unwrap();
        let g = bt.grid();
        for x in layout.charges.positions() {
            let (i, j) = g.cell_of(x).unwrap();
            assert_eq!(bt.occupancy[g.index(i, j)], 0.0);
        }
        let tiny = Annulus {
            inner: 1.0,
            outer: 1.01,
        };
        assert!(discretize_lattice(&tiny, 100).is_err());
    }

    #[test]
    fn annular_quadratic_single_ring() {
        let r = 2f64.sqrt() + 0.5;
        let layout = annular_layout(&Potential::radial_power(2.0), 2, r, 1_000).unwrap();
        let mid = 0.5 * (2f64.sqrt() + r);
        assert!(layout
            .charges
            .positions()
            .all(|x| (norm(x) - mid).abs() < 1e-3));
        assert!(layout.shortfall >= 0.0 && layout.shortfall < 2e-3 + 1e-9);
        assert!(annular_layout(&Potential::quadratic(1.0, 2.0), 2, 3.0, 100).is_err());
    }

    #[test]
    fn annular_mexican_hat_has_central_charge() {
        let u = Potential::mexican_hat(1.0, 4.0);
        let r = 3f64.sqrt() + 0.5;
        let layout = annular_layout(&u, 2, r, 1_000).unwrap();
        let center: Vec<_> = layout
            .charges
            .entries()
            .iter()
            .filter(|e| norm(e.position) == 0.0)
            .collect();
        assert_eq!(center.len(), 1);
        // Inner complement is the unit disk: charge (2/pi) pi = 2.
        assert!((center[0].charge - 2.0).abs() <= 2e-3 + 1e-9);
        let poly = to_polynomial(&layout).unwrap();
        assert!(poly.roots.iter().any(|r| r.2 == 1_000));
    }

    #[test]
    fn cheese_degenerate_and_single_disk() {
        let ring = Annulus {
            inner: 1.0,
            outer: 1.8,
        };
        let cand = Grid2D::centered(2.0, 81).unwrap();
        let a = cheese_layout(&ring, &cand, 2_000, 0).unwrap();
        let b = discretize_lattice(&ring, 2_000).unwrap();
        assert_eq!(a.charges, b.charges);

        let disk = Annulus {
            inner: 0.0,
            outer: 1.0,
        };
        // No grid center sits at the origin here; the origin candidate does.
        let even = Grid2D::centered(2.0, 80).unwrap();
        let c = cheese_layout(&disk, &even, 1_000, 1).unwrap();
        assert_eq!(c.charges.len(), 1);
        let e = c.charges.entries()[0];
        assert_eq!(e.position, [0.0, 0.0]);
        assert!((e.charge - Q0_DENSITY * disk.area()).abs() <= 2.0 / 1_000.0);
    }

    #[test]
    fn polynomial_multiplicities() {
        let ring = Annulus {
            inner: 1.0,
            outer: 1.5,
        };
        let l = discretize_lattice(&ring, 500).unwrap();
        let p = to_polynomial(&l).unwrap();
        assert!(p.roots.iter().all(|r| r.2 == 1));
        assert_eq!(p.degree() as usize, l.charges.len());
        let s = (500f64).sqrt();
        let first = l.charges.entries()[0].position;
        assert!((p.roots[0].0 - s * first[0]).abs() < 1e-12);

        let mut odd = l.clone();
        odd.charges = PointChargeSet::single([1.2, 0.0], 10.0 / 500.0).unwrap();
        assert_eq!(to_polynomial(&odd).unwrap().roots[0].2, 5);
        odd.charges = PointChargeSet::single([1.2, 0.0], 3.0 / 500.0).unwrap();
        assert!(to_polynomial(&odd).is_err());
        odd.charges = PointChargeSet::empty();
        assert_eq!(to_polynomial(&odd).unwrap().degree(), 0);
    }

    #[test]
    fn layout_json_round_trip() {
        let ring = Annulus {
            inner: 1.0,
            outer: 1.5,
        };
        let l = discretize_lattice(&ring, 300).unwrap();
        let text = l.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["scheme"], "lattice");
        assert_eq!(v["N"], 300);
        assert_eq!(v["charges"][0].as_array().unwrap().len(), 3);
        assert_eq!(QuasiholeLayout::from_json(&text, "mem").unwrap(), l);
    }

    #[test]
    fn riemann_gap_examples() {
        let bt = quadratic_bathtub();
        let r = 2f64.sqrt() + 0.5;
        let q0 = build_continuous(bt.grid(), &bt.occupancy, r).unwrap();
        let region = Complement::from_bathtub(&bt, r).unwrap();
        let layout = discretize_lattice(&region, 10_000).unwrap();
        let one = ScalarField2D::from_fn(*bt.grid(), FieldKind::Potential, |_| 1.0);
        let gap = riemann_gap(&one, &layout, &q0).unwrap();
        assert!((gap - layout.shortfall).abs() < 1e-9);
        let odd = ScalarField2D::from_fn(*bt.grid(), FieldKind::Potential, |x| x[0]);
        // Only the single partially filled bathtub cell breaks the mirror symmetry.
        assert!(riemann_gap(&odd, &layout, &q0).unwrap() < 2e-3);
    }
}
