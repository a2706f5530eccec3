//! Bathtub minimizer: fill the sublevel sets of `U` at density `1/(pi ell)`
//! until the mass reaches one.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{norm, FieldKind, Grid2D, ScalarField2D};
use crate::potentials::Potential;

/// `1 / (pi ell)`.
pub fn density_cap(ell: u32) -> f64 {
    1.0 / (std::f64::consts::PI * ell as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BathtubSolution {
    /// `U` at the marginal (last, partially filled) cell.
    pub fermi_level: f64,
    /// Fraction of each cell filled at the cap.
    pub occupancy: Vec<f64>,
    pub density: ScalarField2D,
    pub energy: f64,
    /// Area of the cells with positive occupancy.
    pub area: f64,
    pub ell: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BathtubSummary {
    pub e0: f64,
    pub energy: f64,
    pub area: f64,
    pub l: u32,
}

impl BathtubSolution {
    pub fn summary(&self) -> BathtubSummary {
        BathtubSummary {
            e0: self.fermi_level,
            energy: self.energy,
            area: self.area,
            l: self.ell,
        }
    }

    pub fn grid(&self) -> &Grid2D {
        self.density.grid()
    }

    /// Largest `|x|` over occupied cell centers.
    pub fn support_radius(&self) -> f64 {
        let g = self.grid();
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, &o)| o > 0.0)
            .map(|(k, _)| norm(g.center_of(k)))
            .fold(0.0, f64::max)
    }
}

/// Cell indices in filling order: by value, ties by row-major index.
fn fill_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// Greedy fill of `mass` at density `cap`; returns occupancies and the
/// marginal cell.
pub(crate) fn fill(
    values: &[f64],
    cap: f64,
    cell_area: f64,
    mass: f64,
) -> Result<(Vec<f64>, usize)> {
    let cell_mass = cap * cell_area;
    let full = (mass / cell_mass).floor() as usize;
    let rest = mass / cell_mass - full as f64;
    let needed = full + usize::from(rest > 0.0);
    if needed > values.len() {
        return Err(Error::Domain(format!(
            "grid holds {} cells but the fill needs {needed}",
            values.len()
        )));
    }
    let order = fill_order(values);
    let mut occ = vec![0.0; values.len()];
    for &k in &order[..full] {
        occ[k] = 1.0;
    }
    let marginal = if rest > 0.0 {
        occ[order[full]] = rest;
        order[full]
    } else {
        order[full - 1]
    };
    Ok((occ, marginal))
}

/// Solves the bathtub problem for `U` sampled on `grid`.
pub fn solve_bathtub(u: &Potential, ell: u32, grid: &Grid2D) -> Result<BathtubSolution> {
    solve_bathtub_field(&u.sample(grid), ell)
}

/// Solves the bathtub problem for a potential already sampled on a grid.
pub fn solve_bathtub_field(u: &ScalarField2D, ell: u32) -> Result<BathtubSolution> {
    if ell == 0 {
        return Err(Error::InvalidArgument("ell must be at least 1".into()));
    }
    u.check_finite()?;
    let grid = *u.grid();
    let cap = density_cap(ell);
    let (occupancy, marginal) = fill(u.values(), cap, grid.cell_area(), 1.0)?;

    let (lo, hi) = grid.extent();
    let mx = 0.1 * (hi[0] - lo[0]);
    let my = 0.1 * (hi[1] - lo[1]);
    for (k, &o) in occupancy.iter().enumerate() {
        if o > 0.0 {
            let x = grid.center_of(k);
            if x[0] - lo[0] < mx || hi[0] - x[0] < mx || x[1] - lo[1] < my || hi[1] - x[1] < my {
                return Err(Error::Domain(format!(
                    "bathtub support reaches the outer margin at {x:?}; enlarge the grid"
                )));
            }
        }
    }

    let density = ScalarField2D::new(
        grid,
        FieldKind::Density,
        occupancy.iter().map(|o| o * cap).collect(),
    )?;
    let energy = density.dot(u)?;
    let area = occupancy.iter().filter(|&&o| o > 0.0).count() as f64 * grid.cell_area();
    Ok(BathtubSolution {
        fermi_level: u.values()[marginal],
        occupancy,
        density,
        energy,
        area,
        ell,
    })
}

/// Checks `0 <= rho <= 1/(pi ell)` and unit mass, naming the violated constraint.
pub fn check_feasible(rho: &ScalarField2D, ell: u32) -> Result<()> {
    rho.check_finite()?;
    let cap = density_cap(ell);
    if let Some(k) = rho.values().iter().position(|&v| v < 0.0) {
        return Err(Error::Infeasible {
            constraint: format!("density is negative at cell {:?}", rho.grid().coords(k)),
        });
    }
    if let Some(k) = rho
        .values()
        .iter()
        .position(|&v| v > cap * (1.0 + 1e-9) + 1e-12)
    {
        return Err(Error::Infeasible {
            constraint: format!(
                "density exceeds the cap 1/(pi ell) at cell {:?}",
                rho.grid().coords(k)
            ),
        });
    }
    let m = rho.mass();
    if (m - 1.0).abs() > 1e-9 {
        return Err(Error::Infeasible {
            constraint: format!("mass is {m}, expected 1"),
        });
    }
    Ok(())
}

/// `int rho U` for a feasible `rho`.
pub fn bathtub_energy(rho: &ScalarField2D, u: &ScalarField2D, ell: u32) -> Result<f64> {
    check_feasible(rho, ell)?;
    rho.dot(u)
}
