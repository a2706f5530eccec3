//! Shared fixtures for the benchmarks.

use laughlin_core::bathtub::{solve_bathtub, BathtubSolution};
use laughlin_core::fields::{FieldKind, Grid2D, ScalarField2D};
use laughlin_core::potentials::Potential;

/// Normalized uniform density on the disk of radius `sqrt(2)`.
pub fn disk_density(grid: Grid2D) -> ScalarField2D {
    let mut f = ScalarField2D::from_fn(grid, FieldKind::Density, |x| {
        if x[0] * x[0] + x[1] * x[1] < 2.0 {
            1.0
        } else {
            0.0
        }
    });
    let m = f.mass();
    f.values_mut().iter_mut().for_each(|v| *v /= m);
    f
}

/// Bathtub for `|x|^2` at `ell = 2` on `[-half_width, half_width]^2`.
pub fn quadratic_bathtub(half_width: f64, n: usize) -> BathtubSolution {
    let g = Grid2D::centered(half_width, n).expect("valid grid");
    solve_bathtub(&Potential::radial_power(2.0), 2, &g).expect("bathtub solves")
}
