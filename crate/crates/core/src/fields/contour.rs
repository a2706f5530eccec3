//! Marching squares on the lattice of cell centers.

use super::{dist, Point, ScalarField2D};

/// Line segments approximating `{f = level}`, with linear interpolation along
/// the edges of each square of four neighbouring cell centers. Saddle squares
/// are split according to the value at the square's center.
pub fn level_set_segments(field: &ScalarField2D, level: f64) -> Vec<[Point; 2]> {
    let g = field.grid();
    let v = field.values();
    let mut out = Vec::new();
    for j in 0..g.ny() - 1 {
        for i in 0..g.nx() - 1 {
            // Corners counter-clockwise from lower-left.
            let idx = [
                g.index(i, j),
                g.index(i + 1, j),
                g.index(i + 1, j + 1),
                g.index(i, j + 1),
            ];
            let f = idx.map(|k| v[k] - level);
            let p = idx.map(|k| g.center_of(k));
            let mask = f
                .iter()
                .enumerate()
                .fold(0u8, |m, (b, &x)| if x < 0.0 { m | (1 << b) } else { m });
            if mask == 0 || mask == 15 {
                continue;
            }
            let cross = |e: usize| -> Point {
                let (a, b) = (e, (e + 1) % 4);
                let t = f[a] / (f[a] - f[b]);
                [
                    p[a][0] + t * (p[b][0] - p[a][0]),
                    p[a][1] + t * (p[b][1] - p[a][1]),
                ]
            };
            // Edges crossed: edge e joins corner e and e+1.
            let crossed: Vec<usize> = (0..4)
                .filter(|&e| ((mask >> e) & 1) != ((mask >> ((e + 1) % 4)) & 1))
                .collect();
            if crossed.len() == 2 {
                out.push([cross(crossed[0]), cross(crossed[1])]);
            } else {
                let center_below = f.iter().sum::<f64>() < 0.0;
                let corner0_below = mask & 1 == 1;
                if center_below == corner0_below {
                    // Corner 0 and 2 regions connect through the center.
                    out.push([cross(0), cross(1)]);
                    out.push([cross(2), cross(3)]);
                } else {
                    out.push([cross(3), cross(0)]);
                    out.push([cross(1), cross(2)]);
                }
            }
        }
    }
    out
}

/// Total length of [`level_set_segments`].
pub fn level_set_length(field: &ScalarField2D, level: f64) -> f64 {
    level_set_segments(field, level)
        .iter()
        .map(|s| dist(s[0], s[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldKind, Grid2D};
    use std::f64::consts::PI;

    #[test]
    fn circle_perimeter() {
        let g = Grid2D::centered(2.0, 200).unwrap();
        let f = ScalarField2D::from_fn(g, FieldKind::Potential, |x| x[0] * x[0] + x[1] * x[1]);
        let len = level_set_length(&f, 1.0);
        assert!((len - 2.0 * PI).abs() < 1e-3 * 2.0 * PI, "{len}");
    }

    #[test]
    fn two_circles_add() {
        let g = Grid2D::new([-3.0, -1.5], 0.02, 300, 150).unwrap();
        let f = ScalarField2D::from_fn(g, FieldKind::Potential, |x| {
            let a = (x[0] - 1.5).hypot(x[1]);
            let b = (x[0] + 1.5).hypot(x[1]);
            a.min(b)
        });
        let len = level_set_length(&f, 0.5);
        assert!((len - 2.0 * PI).abs() < 2e-2, "{len}");
    }

    #[test]
    fn no_crossing_gives_nothing() {
        let g = Grid2D::centered(1.0, 10).unwrap();
        let f = ScalarField2D::from_fn(g, FieldKind::Potential, |_| 2.0);
        assert!(level_set_segments(&f, 1.0).is_empty());
    }
}
