//! The kernel `log(1/|x|)` on grids and point sets.
//!
//! A cell of area `h^2` acting on its own center is replaced by the disk of
//! equal area, radius `h / sqrt(pi)`, whose central potential per unit
//! density is `h^2 (log(sqrt(pi)/h) + 1/2)`. All other cell pairs use the
//! midpoint value `h^2 log(1/|x_i - x_j|)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{dist, FieldKind, Grid2D, Point, PointChargeSet, ScalarField2D};
use crate::error::{Error, Result};

/// `log(sqrt(pi)/h) + 1/2`.
pub fn self_cell_coefficient(h: f64) -> f64 {
    (PI.sqrt() / h).ln() + 0.5
}

/// Potential at distance `d` of a charge `q` smeared on the equal-area disk of
/// a cell of side `h`; equals `q log(1/d)` once `d` exceeds the disk radius.
#[inline]
pub fn regularized_point_potential(q: f64, d: f64, h: f64) -> f64 {
    let a = h / PI.sqrt();
    if d >= a {
        -q * d.ln()
    } else {
        q * (-a.ln() + 0.5 * (1.0 - d * d / (a * a)))
    }
}

/// Unit-mass kernel value for a cell offset, without the `h^2` factor.
#[inline]
fn offset_kernel(h: f64, di: i64, dj: i64) -> f64 {
    if di == 0 && dj == 0 {
        self_cell_coefficient(h)
    } else {
        -(h * ((di * di + dj * dj) as f64).sqrt()).ln()
    }
}

/// Zero-padded FFT convolution with the logarithmic kernel on a fixed grid.
///
/// Linear (not circular) convolution: the padded lattice is twice the grid
/// in each direction, so the result agrees with direct summation up to
/// rounding.
pub struct LogConvolver {
    grid: Grid2D,
    px: usize,
    py: usize,
    // Stored column-major (transposed) to match the second FFT pass.
    kernel_hat: Vec<Complex<f64>>,
    fwd_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogConvolver")
            .field("grid", &self.grid)
            .field("padded", &(self.px, self.py))
            .finish()
    }
}

impl LogConvolver {
    pub fn new(grid: &Grid2D) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let (px, py) = (2 * nx, 2 * ny);
        let h = grid.spacing();
        let mut planner = FftPlanner::new();
        let fwd_x = planner.plan_fft_forward(px);
        let fwd_y = planner.plan_fft_forward(py);
        let inv_x = planner.plan_fft_inverse(px);
        let inv_y = planner.plan_fft_inverse(py);

        let wrap = |k: usize, n: usize, p: usize| -> Option<i64> {
            if k < n {
                Some(k as i64)
            } else if k > p - n {
                Some(k as i64 - p as i64)
            } else {
                None
            }
        };
        let area = grid.cell_area();
        let mut rows = vec![Complex::new(0.0, 0.0); px * py];
        for j in 0..py {
            let Some(dj) = wrap(j, ny, py) else { continue };
            for i in 0..px {
                let Some(di) = wrap(i, nx, px) else { continue };
                rows[j * px + i] = Complex::new(area * offset_kernel(h, di, dj), 0.0);
            }
        }
        fwd_x.process(&mut rows);
        let mut cols = transpose(&rows, px, py);
        fwd_y.process(&mut cols);
        Self {
            grid: *grid,
            px,
            py,
            kernel_hat: cols,
            fwd_x,
            fwd_y,
            inv_x,
            inv_y,
        }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    /// `Phi_i = sum_j K(x_i - x_j) rho_j` for a density given per cell.
    pub fn potential_values(&self, rho: &[f64]) -> Vec<f64> {
        self.convolve(rho, None).0
    }

    /// Two convolutions for the price of one, packing the inputs as the real
    /// and imaginary parts of a single complex transform.
    pub fn potential_pair(&self, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (pa, pb) = self.convolve(a, Some(b));
        (pa, pb.expect("pair requested"))
    }

    fn convolve(&self, a: &[f64], b: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        let (nx, ny, px, py) = (self.grid.nx(), self.grid.ny(), self.px, self.py);
        assert_eq!(a.len(), nx * ny, "field does not match convolver grid");
        let mut rows = vec![Complex::new(0.0, 0.0); px * ny];
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                let im = b.map_or(0.0, |b| b[k]);
                rows[j * px + i] = Complex::new(a[k], im);
            }
        }
        self.fwd_x.process(&mut rows);
        let mut cols = vec![Complex::new(0.0, 0.0); px * py];
        for j in 0..ny {
            for i in 0..px {
                cols[i * py + j] = rows[j * px + i];
            }
        }
        self.fwd_y.process(&mut cols);
        for (c, k) in cols.iter_mut().zip(&self.kernel_hat) {
            *c *= k;
        }
        self.inv_y.process(&mut cols);
        for j in 0..ny {
            for i in 0..px {
                rows[j * px + i] = cols[i * py + j];
            }
        }
        self.inv_x.process(&mut rows);
        let scale = 1.0 / (px * py) as f64;
        let mut out_a = Vec::with_capacity(nx * ny);
        let mut out_b = b.map(|_| Vec::with_capacity(nx * ny));
        for j in 0..ny {
            for i in 0..nx {
                let c = rows[j * px + i];
                out_a.push(c.re * scale);
                if let Some(ob) = out_b.as_mut() {
                    ob.push(c.im * scale);
                }
            }
        }
        (out_a, out_b)
    }

    pub fn potential(&self, rho: &ScalarField2D) -> Result<ScalarField2D> {
        if rho.grid() != &self.grid {
            return Err(Error::GridMismatch);
        }
        rho.check_finite()?;
        ScalarField2D::new(
            self.grid,
            FieldKind::Potential,
            self.potential_values(rho.values()),
        )
    }

    /// `D(sigma, sigma) = 1/2 sum_i sigma_i Phi_sigma(x_i) h^2`.
    pub fn energy(&self, sigma: &ScalarField2D) -> Result<f64> {
        let phi = self.potential(sigma)?;
        Ok(0.5 * sigma.dot(&phi)?)
    }
}

fn transpose(a: &[Complex<f64>], px: usize, py: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); px * py];
    for j in 0..py {
        for i in 0..px {
            out[i * py + j] = a[j * px + i];
        }
    }
    out
}

fn check_source(rho: &ScalarField2D) -> Result<()> {
    rho.check_finite()?;
    if rho.kind() == FieldKind::Potential {
        return Err(Error::InvalidArgument(
            "log potential needs a density or charge field".into(),
        ));
    }
    Ok(())
}

/// `Phi_rho(x) = int rho(y) log(1/|x-y|) dy` at every cell center (spectral path).
pub fn log_potential_field(rho: &ScalarField2D) -> Result<ScalarField2D> {
    check_source(rho)?;
    LogConvolver::new(rho.grid()).potential(rho)
}

/// Reference O(n^2) summation in row-major order.
pub fn log_potential_field_direct(rho: &ScalarField2D) -> Result<ScalarField2D> {
    check_source(rho)?;
    let g = *rho.grid();
    let (nx, ny, h) = (g.nx(), g.ny(), g.spacing());
    let area = g.cell_area();
    let mut table = vec![0.0; nx * ny];
    for dj in 0..ny {
        for di in 0..nx {
            table[dj * nx + di] = area * offset_kernel(h, di as i64, dj as i64);
        }
    }
    let src = rho.values();
    let values = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = g.coords(k);
            let mut acc = 0.0;
            for sj in 0..ny {
                let row = sj.abs_diff(j) * nx;
                for si in 0..nx {
                    let v = src[sj * nx + si];
                    if v != 0.0 {
                        acc += table[row + si.abs_diff(i)] * v;
                    }
                }
            }
            acc
        })
        .collect();
    ScalarField2D::new(g, FieldKind::Potential, values)
}

/// `sum_j q_j log(1/|x - a_j|)` at each evaluation point.
pub fn log_potential_points(charges: &PointChargeSet, at: &[Point]) -> Result<Vec<f64>> {
    at.iter()
        .map(|&x| {
            let mut acc = 0.0;
            for c in charges.entries() {
                let d = dist(x, c.position);
                if d < 1e-14 {
                    return Err(Error::Singularity {
                        point: x,
                        charge: c.position,
                    });
                }
                acc -= c.charge * d.ln();
            }
            Ok(acc)
        })
        .collect()
}

/// Potential of point charges at every cell center, direct summation with
/// the equal-area-disk regularization inside a charge's own disk.
pub fn points_potential_on_grid_direct(charges: &PointChargeSet, grid: &Grid2D) -> Vec<f64> {
    let h = grid.spacing();
    (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let x = grid.center_of(k);
            charges
                .entries()
                .iter()
                .map(|c| regularized_point_potential(c.charge, dist(x, c.position), h))
                .sum()
        })
        .collect()
}

pub(crate) fn cic_weights(grid: &Grid2D, a: Point) -> Option<[(usize, f64); 4]> {
    let h = grid.spacing();
    let o = grid.origin();
    let u = (a[0] - o[0]) / h - 0.5;
    let v = (a[1] - o[1]) / h - 0.5;
    if !(u >= 0.0 && v >= 0.0) {
        return None;
    }
    let (i0, j0) = (u.floor() as usize, v.floor() as usize);
    if i0 + 1 >= grid.nx() || j0 + 1 >= grid.ny() {
        return None;
    }
    let (fx, fy) = (u - i0 as f64, v - j0 as f64);
    Some([
        (grid.index(i0, j0), (1.0 - fx) * (1.0 - fy)),
        (grid.index(i0 + 1, j0), fx * (1.0 - fy)),
        (grid.index(i0, j0 + 1), (1.0 - fx) * fy),
        (grid.index(i0 + 1, j0 + 1), fx * fy),
    ])
}

/// Half-width (in cells) of the exact near-field window around each charge.
const NEAR_FIELD: usize = 8;

/// Potential of point charges at every cell center, accelerated.
///
/// Charges are deposited bilinearly on the cell centers and convolved
/// spectrally; within `NEAR_FIELD` cells of each charge the grid contribution
/// is swapped for the exact (regularized) point potential. The residual far
/// field error is the quadrupole of the bilinear stencil.
pub fn points_potential_on_grid(charges: &PointChargeSet, conv: &LogConvolver) -> Vec<f64> {
    let grid = *conv.grid();
    let (nx, ny, h) = (grid.nx(), grid.ny(), grid.spacing());
    let inv_area = 1.0 / grid.cell_area();
    let mut deposit = vec![0.0; grid.len()];
    let mut near = Vec::with_capacity(charges.len());
    let mut stray = Vec::new();
    for c in charges.entries() {
        match cic_weights(&grid, c.position) {
            Some(nodes) => {
                for (idx, w) in nodes {
                    deposit[idx] += w * c.charge * inv_area;
                }
                near.push((c, nodes));
            }
            None => stray.push(*c),
        }
    }
    let mut phi = if near.is_empty() {
        vec![0.0; grid.len()]
    } else {
        conv.potential_values(&deposit)
    };

    let reach = NEAR_FIELD as i64 + 2;
    let span = (2 * reach + 1) as usize;
    let mut table = vec![0.0; span * span];
    for dj in -reach..=reach {
        for di in -reach..=reach {
            table[((dj + reach) as usize) * span + (di + reach) as usize] =
                offset_kernel(h, di, dj);
        }
    }
    let kern = |di: i64, dj: i64| table[((dj + reach) as usize) * span + (di + reach) as usize];

    for (c, nodes) in near {
        let (i0, j0) = grid.coords(nodes[0].0);
        let lo_i = i0.saturating_sub(NEAR_FIELD);
        let lo_j = j0.saturating_sub(NEAR_FIELD);
        let hi_i = (i0 + 1 + NEAR_FIELD).min(nx - 1);
        let hi_j = (j0 + 1 + NEAR_FIELD).min(ny - 1);
        for j in lo_j..=hi_j {
            for i in lo_i..=hi_i {
                let mut grid_part = 0.0;
                for &(idx, w) in &nodes {
                    let (ni, nj) = grid.coords(idx);
                    grid_part += w * kern(i as i64 - ni as i64, j as i64 - nj as i64);
                }
                let x = grid.center(i, j);
                let exact = regularized_point_potential(c.charge, dist(x, c.position), h);
                phi[grid.index(i, j)] += exact - c.charge * grid_part;
            }
        }
    }
    if !stray.is_empty() {
        let stray = PointChargeSet::new(stray).expect("validated charges");
        for (p, s) in phi
            .iter_mut()
            .zip(points_potential_on_grid_direct(&stray, &grid))
        {
            *p += s;
        }
    }
    phi
}

/// `D(sigma, sigma) = 1/2 iint sigma(x) log(1/|x-y|) sigma(y)`.
pub fn coulomb_energy(sigma: &ScalarField2D) -> Result<f64> {
    check_source(sigma)?;
    LogConvolver::new(sigma.grid()).energy(sigma)
}

/// `d(rho1, rho2) = D(rho1 - rho2, rho1 - rho2)^(1/2)`.
pub fn coulomb_metric(rho1: &ScalarField2D, rho2: &ScalarField2D) -> Result<f64> {
    let sigma = rho1.difference(rho2)?;
    let conv = LogConvolver::new(sigma.grid());
    metric_from_energy(conv.energy(&sigma)?, sigma.total_variation())
}

pub(crate) fn metric_from_energy(d: f64, total_variation: f64) -> Result<f64> {
    let floor = -1e-10 * total_variation * total_variation;
    if d < floor {
        return Err(Error::Discretization(format!(
            "Coulomb energy of a difference is negative ({d:e})"
        )));
    }
    Ok(d.max(0.0).sqrt())
}
