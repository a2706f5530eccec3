//! Uniform 2D grids, grid-sampled scalar fields and the logarithmic kernel.
//!
//! Every continuous object of the model (densities, potentials, smeared
//! charge distributions) lives on a [`Grid2D`] as a [`ScalarField2D`] holding
//! one value per cell, sampled at the cell center. Integrals use the
//! midpoint rule, reductions run in row-major order.

mod contour;
mod io;
mod kernel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contour::{level_set_length, level_set_segments};
pub use io::{read_csv, read_csv_file, write_csv, write_csv_file};
pub(crate) use kernel::metric_from_energy;
pub use kernel::{
    coulomb_energy, coulomb_metric, log_potential_field, log_potential_field_direct,
    log_potential_points, points_potential_on_grid, points_potential_on_grid_direct,
    regularized_point_potential, self_cell_coefficient, LogConvolver,
};

pub type Point = [f64; 2];

#[inline]
pub fn norm(p: Point) -> f64 {
    p[0].hypot(p[1])
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Uniform lattice of square cells. Cell `(i, j)` has its center at
/// `origin + ((i + 1/2) h, (j + 1/2) h)`; storage is row-major with `i`
/// running fastest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    origin: Point,
    h: f64,
    nx: usize,
    ny: usize,
}

impl Grid2D {
    pub fn new(origin: Point, h: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {h}"
            )));
        }
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2x2 cells, got {nx}x{ny}"
            )));
        }
        if !(origin[0].is_finite() && origin[1].is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self { origin, h, nx, ny })
    }

    /// Square `[-half_width, half_width]^2` split into `n x n` cells.
    pub fn centered(half_width: f64, n: usize) -> Result<Self> {
        if !(half_width > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "half width must be positive, got {half_width}"
            )));
        }
        Self::new(
            [-half_width, -half_width],
            2.0 * half_width / n as f64,
            n,
            n,
        )
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> Point {
        [
            self.origin[0] + (i as f64 + 0.5) * self.h,
            self.origin[1] + (j as f64 + 0.5) * self.h,
        ]
    }

    #[inline]
    pub fn center_of(&self, idx: usize) -> Point {
        let (i, j) = self.coords(idx);
        self.center(i, j)
    }

    pub fn centers(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |k| self.center_of(k))
    }

    /// Lower-left and upper-right corners of the covered rectangle.
    pub fn extent(&self) -> (Point, Point) {
        (
            self.origin,
            [
                self.origin[0] + self.nx as f64 * self.h,
                self.origin[1] + self.ny as f64 * self.h,
            ],
        )
    }

    /// Cell containing `x`, if any.
    pub fn cell_of(&self, x: Point) -> Option<(usize, usize)> {
        let u = (x[0] - self.origin[0]) / self.h;
        let v = (x[1] - self.origin[1]) / self.h;
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    /// Same extent with every cell split into `k x k` sub-cells.
    pub fn refine(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidGrid(
                "refinement factor must be positive".into(),
            ));
        }
        Self::new(self.origin, self.h / k as f64, self.nx * k, self.ny * k)
    }

    /// Distance from `x` to the grid boundary (negative outside).
    pub fn inset(&self, x: Point) -> f64 {
        let (lo, hi) = self.extent();
        (x[0] - lo[0])
            .min(hi[0] - x[0])
            .min(x[1] - lo[1])
            .min(hi[1] - x[1])
    }

    /// Whether the largest centered disk fully inside the grid has radius at least `r`.
    pub fn covers_disk(&self, r: f64) -> bool {
        self.inset([0.0, 0.0]) >= r
    }

    /// Fraction of cell `idx` inside the disk `D(0, r)`, by `s x s` supersampling.
    pub fn disk_fraction(&self, idx: usize, r: f64, s: usize) -> f64 {
        let c = self.center_of(idx);
        let half = 0.5 * self.h;
        let corner_far = (c[0].abs() + half).hypot(c[1].abs() + half);
        if corner_far <= r {
            return 1.0;
        }
        let corner_near = (c[0].abs() - half)
            .max(0.0)
            .hypot((c[1].abs() - half).max(0.0));
        if corner_near >= r {
            return 0.0;
        }
        let mut inside = 0usize;
        for a in 0..s {
            for b in 0..s {
                let x = c[0] - half + (a as f64 + 0.5) * self.h / s as f64;
                let y = c[1] - half + (b as f64 + 0.5) * self.h / s as f64;
                if x.hypot(y) < r {
                    inside += 1;
                }
            }
        }
        inside as f64 / (s * s) as f64
    }
}

/// What a field's values mean. Densities carry the nonnegativity and
/// finite-mass contract; potentials carry none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Density,
    Potential,
    Charge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField2D {
    grid: Grid2D,
    kind: FieldKind,
    values: Vec<f64>,
}

impl ScalarField2D {
    pub fn new(grid: Grid2D, kind: FieldKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, kind, values })
    }

    pub fn zeros(grid: Grid2D, kind: FieldKind) -> Self {
        Self {
            grid,
            kind,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid2D, kind: FieldKind, mut f: impl FnMut(Point) -> f64) -> Self {
        let values = (0..grid.len()).map(|k| f(grid.center_of(k))).collect();
        Self { grid, kind, values }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    /// `sum(values) * h^2`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    /// `sum(|values|) * h^2`.
    pub fn total_variation(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn integrate(&self, mut g: impl FnMut(Point) -> f64) -> f64 {
        let mut acc = 0.0;
        for (k, v) in self.values.iter().enumerate() {
            if *v != 0.0 {
                acc += v * g(self.grid.center_of(k));
            }
        }
        acc * self.grid.cell_area()
    }

    /// `sum(self * other) * h^2`.
    pub fn dot(&self, other: &ScalarField2D) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.grid.cell_area())
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn check_same_grid(&self, other: &ScalarField2D) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            kind: self.kind,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self - other`, tagged as a charge field.
    pub fn difference(&self, other: &ScalarField2D) -> Result<Self> {
        self.check_same_grid(other)?;
        Ok(Self {
            grid: self.grid,
            kind: FieldKind::Charge,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// `self + s * other`, keeping `self`'s tag.
    pub fn add_scaled(&self, s: f64, other: &ScalarField2D) -> Result<Self> {
        self.check_same_grid(other)?;
        Ok(Self {
            grid: self.grid,
            kind: self.kind,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }

    /// Sum `k x k` blocks of cells into one cell of the coarser grid
    /// (values averaged, mass preserved).
    pub fn coarsen(&self, k: usize) -> Result<Self> {
        if k == 0 || self.grid.nx % k != 0 || self.grid.ny % k != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {}x{} by {k}",
                self.grid.nx, self.grid.ny
            )));
        }
        let coarse = Grid2D::new(
            self.grid.origin,
            self.grid.h * k as f64,
            self.grid.nx / k,
            self.grid.ny / k,
        )?;
        let mut values = vec![0.0; coarse.len()];
        for j in 0..self.grid.ny {
            for i in 0..self.grid.nx {
                values[coarse.index(i / k, j / k)] += self.values[self.grid.index(i, j)];
            }
        }
        let inv = 1.0 / (k * k) as f64;
        values.iter_mut().for_each(|v| *v *= inv);
        Self::new(coarse, self.kind, values)
    }

    /// Bilinear interpolation between cell centers; clamps to the nearest
    /// edge value outside the center lattice.
    pub fn interpolate(&self, x: Point) -> f64 {
        let g = &self.grid;
        let u = ((x[0] - g.origin[0]) / g.h - 0.5).clamp(0.0, (g.nx - 1) as f64);
        let v = ((x[1] - g.origin[1]) / g.h - 0.5).clamp(0.0, (g.ny - 1) as f64);
        let i0 = (u.floor() as usize).min(g.nx - 2);
        let j0 = (v.floor() as usize).min(g.ny - 2);
        let (fx, fy) = (u - i0 as f64, v - j0 as f64);
        let at = |i, j| self.values[g.index(i, j)];
        (1.0 - fx) * (1.0 - fy) * at(i0, j0)
            + fx * (1.0 - fy) * at(i0 + 1, j0)
            + (1.0 - fx) * fy * at(i0, j0 + 1)
            + fx * fy * at(i0 + 1, j0 + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField2D {
    grid: Grid2D,
    values: Vec<[f64; 2]>,
}

impl VectorField2D {
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    pub fn magnitude(&self) -> ScalarField2D {
        ScalarField2D {
            grid: self.grid,
            kind: FieldKind::Potential,
            values: self.values.iter().map(|v| v[0].hypot(v[1])).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v[0].hypot(v[1])))
    }

    /// `(sum |v|^2 h^2)^(1/2)`.
    pub fn l2_norm(&self) -> f64 {
        (self
            .values
            .iter()
            .map(|v| v[0] * v[0] + v[1] * v[1])
            .sum::<f64>()
            * self.grid.cell_area())
        .sqrt()
    }
}

/// Centered differences in the interior, one-sided on the boundary.
pub fn gradient(field: &ScalarField2D) -> VectorField2D {
    let g = field.grid;
    let h = g.h;
    let at = |i: usize, j: usize| field.values[g.index(i, j)];
    let mut values = Vec::with_capacity(g.len());
    for j in 0..g.ny {
        for i in 0..g.nx {
            let dx = if i == 0 {
                (at(1, j) - at(0, j)) / h
            } else if i == g.nx - 1 {
                (at(i, j) - at(i - 1, j)) / h
            } else {
                (at(i + 1, j) - at(i - 1, j)) / (2.0 * h)
            };
            let dy = if j == 0 {
                (at(i, 1) - at(i, 0)) / h
            } else if j == g.ny - 1 {
                (at(i, j) - at(i, j - 1)) / h
            } else {
                (at(i, j + 1) - at(i, j - 1)) / (2.0 * h)
            };
            values.push([dx, dy]);
        }
    }
    VectorField2D { grid: g, values }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCharge {
    pub position: Point,
    pub charge: f64,
}

/// Positive point charges `sum_j q_j delta(x - a_j)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointChargeSet {
    entries: Vec<PointCharge>,
}

impl PointChargeSet {
    pub fn new(entries: Vec<PointCharge>) -> Result<Self> {
        for (k, e) in entries.iter().enumerate() {
            if !(e.charge > 0.0 && e.charge.is_finite()) {
                return Err(Error::InvalidCharge(format!(
                    "charge {k} must be positive and finite, got {}",
                    e.charge
                )));
            }
            if !(e.position[0].is_finite() && e.position[1].is_finite()) {
                return Err(Error::InvalidCharge(format!(
                    "charge {k} has a non-finite position"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(position: Point, charge: f64) -> Result<Self> {
        Self::new(vec![PointCharge { position, charge }])
    }

    pub fn entries(&self) -> &[PointCharge] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_charge(&self) -> f64 {
        self.entries.iter().map(|e| e.charge).sum()
    }

    pub fn positions(&self) -> impl Iterator<Item = Point> + '_ {
        self.entries.iter().map(|e| e.position)
    }

    pub fn extend(&mut self, other: PointChargeSet) {
        self.entries.extend(other.entries);
    }

    /// Bilinear (cloud-in-cell) deposit of the charges onto cell centers,
    /// returned as a charge density. Charges whose stencil leaves the grid are
    /// assigned to the nearest cell.
    pub fn deposit(&self, grid: &Grid2D) -> ScalarField2D {
        let mut values = vec![0.0; grid.len()];
        let inv_area = 1.0 / grid.cell_area();
        for e in &self.entries {
            match kernel::cic_weights(grid, e.position) {
                Some(nodes) => {
                    for (idx, w) in nodes {
                        values[idx] += w * e.charge * inv_area;
                    }
                }
                None => {
                    let i = (((e.position[0] - grid.origin[0]) / grid.h).floor().max(0.0) as usize)
                        .min(grid.nx - 1);
                    let j = (((e.position[1] - grid.origin[1]) / grid.h).floor().max(0.0) as usize)
                        .min(grid.ny - 1);
                    values[grid.index(i, j)] += e.charge * inv_area;
                }
            }
        }
        ScalarField2D {
            grid: *grid,
            kind: FieldKind::Charge,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid2D::new([0.0, 0.0], 0.0, 4, 4).is_err());
        assert!(Grid2D::new([0.0, 0.0], 0.1, 1, 4).is_err());
        assert!(Grid2D::new([f64::NAN, 0.0], 0.1, 4, 4).is_err());
    }

    #[test]
    fn cell_centers_and_lookup() {
        let g = Grid2D::new([-1.0, -2.0], 0.5, 4, 8).unwrap();
        assert_eq!(g.center(0, 0), [-0.75, -1.75]);
        assert_eq!(g.cell_of([-0.75, -1.75]), Some((0, 0)));
        assert_eq!(g.cell_of([0.99, 1.99]), Some((3, 7)));
        assert_eq!(g.cell_of([1.01, 0.0]), None);
        let k = g.index(2, 5);
        assert_eq!(g.coords(k), (2, 5));
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = Grid2D::centered(1.0, 16).unwrap();
        let f = ScalarField2D::from_fn(g, FieldKind::Potential, |_| 3.0);
        assert_eq!(gradient(&f).max_norm(), 0.0);
    }

    #[test]
    fn gradient_of_linear_field() {
        let g = Grid2D::centered(1.0, 16).unwrap();
        let f = ScalarField2D::from_fn(g, FieldKind::Potential, |x| x[0]);
        for v in gradient(&f).values() {
            assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_quadratic_is_exact_inside() {
        let g = Grid2D::centered(1.0, 20).unwrap();
        let f = ScalarField2D::from_fn(g, FieldKind::Potential, |x| x[0] * x[0] + x[1] * x[1]);
        let grad = gradient(&f);
        for j in 1..19 {
            for i in 1..19 {
                let x = g.center(i, j);
                let v = grad.values()[g.index(i, j)];
                assert!((v[0] - 2.0 * x[0]).abs() < 1e-12);
                assert!((v[1] - 2.0 * x[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn charges_must_be_positive() {
        assert!(PointChargeSet::single([0.0, 0.0], 0.0).is_err());
        assert!(PointChargeSet::single([0.0, 0.0], -1.0).is_err());
        assert!(PointChargeSet::single([f64::INFINITY, 0.0], 1.0).is_err());
    }

    #[test]
    fn deposit_preserves_charge() {
        let g = Grid2D::centered(2.0, 32).unwrap();
        let set = PointChargeSet::new(vec![
            PointCharge {
                position: [0.123, -0.7],
                charge: 0.5,
            },
            PointCharge {
                position: [1.99, 1.99],
                charge: 2.0,
            },
        ])
        .unwrap();
        assert!((set.deposit(&g).mass() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn coarsen_preserves_mass() {
        let g = Grid2D::centered(1.0, 12).unwrap();
        let f = ScalarField2D::from_fn(g, FieldKind::Density, |x| (x[0] + 2.0) * (x[1] + 3.0));
        let c = f.coarsen(3).unwrap();
        assert_eq!(c.grid().nx(), 4);
        assert!((c.mass() - f.mass()).abs() < 1e-12);
        assert!(f.coarsen(5).is_err());
    }

    #[test]
    fn disk_fraction_sums_to_area() {
        let g = Grid2D::centered(1.5, 60).unwrap();
        let area: f64 = (0..g.len())
            .map(|k| g.disk_fraction(k, 1.0, 16))
            .sum::<f64>()
            * g.cell_area();
        assert!((area - std::f64::consts::PI).abs() < 2e-3);
    }
}
