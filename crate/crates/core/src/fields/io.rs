//! CSV form of a scalar field.
//!
//! ```text
//! # origin x0 y0
//! # spacing h
//! # shape nx ny
//! # kind density
//! i,j,value
//! ```
//! Floats are written in Rust's shortest round-trip representation, so a
//! write/read cycle is bit-exact. The `kind` line is optional on input.

use std::fmt::Write as _;
use std::path::Path;

use super::{FieldKind, Grid2D, ScalarField2D};
use crate::error::{Error, Result};

pub fn write_csv(field: &ScalarField2D) -> String {
    let g = field.grid();
    let o = g.origin();
    let mut s = String::with_capacity(24 * g.len() + 96);
    let _ = writeln!(s, "# origin {:?} {:?}", o[0], o[1]);
    let _ = writeln!(s, "# spacing {:?}", g.spacing());
    let _ = writeln!(s, "# shape {} {}", g.nx(), g.ny());
    let kind = match field.kind() {
        FieldKind::Density => "density",
        FieldKind::Potential => "potential",
        FieldKind::Charge => "charge",
    };
    let _ = writeln!(s, "# kind {kind}");
    for (k, v) in field.values().iter().enumerate() {
        let (i, j) = g.coords(k);
        let _ = writeln!(s, "{i},{j},{v:?}");
    }
    s
}

/// Parses [`write_csv`] output. `source` names the input in error messages.
pub fn read_csv(text: &str, source: &str) -> Result<ScalarField2D> {
    let err = |msg: String| Error::parse(source, msg);
    let mut origin = None;
    let mut spacing = None;
    let mut shape = None;
    let mut kind = FieldKind::Density;
    let mut values: Option<Vec<f64>> = None;
    let mut seen: Vec<bool> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ln = lineno + 1;
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            let key = parts.next().unwrap_or("");
            let nums: Vec<&str> = parts.collect();
            let float = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("line {ln}: bad number '{s}'")))
            };
            match key {
                "origin" if nums.len() == 2 => origin = Some([float(nums[0])?, float(nums[1])?]),
                "spacing" if nums.len() == 1 => spacing = Some(float(nums[0])?),
                "shape" if nums.len() == 2 => {
                    let nx = nums[0]
                        .parse::<usize>()
                        .map_err(|_| err(format!("line {ln}: bad shape")))?;
                    let ny = nums[1]
                        .parse::<usize>()
                        .map_err(|_| err(format!("line {ln}: bad shape")))?;
                    shape = Some((nx, ny));
                }
                "kind" if nums.len() == 1 => {
                    kind = match nums[0] {
                        "density" => FieldKind::Density,
                        "potential" => FieldKind::Potential,
                        "charge" => FieldKind::Charge,
                        other => return Err(err(format!("line {ln}: unknown kind '{other}'"))),
                    }
                }
                _ => return Err(err(format!("line {ln}: unrecognized header '{line}'"))),
            }
            continue;
        }
        if values.is_none() {
            let (Some(o), Some(h), Some((nx, ny))) = (origin, spacing, shape) else {
                return Err(err("data before complete header".into()));
            };
            let g = Grid2D::new(o, h, nx, ny).map_err(|e| err(e.to_string()))?;
            values = Some(vec![0.0; g.len()]);
            seen = vec![false; g.len()];
        }
        let (nx, ny) = shape.expect("checked above");
        let mut cols = line.split(',');
        let (Some(i), Some(j), Some(v), None) =
            (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(err(format!("line {ln}: expected i,j,value")));
        };
        let i: usize = i
            .trim()
            .parse()
            .map_err(|_| err(format!("line {ln}: bad index")))?;
        let j: usize = j
            .trim()
            .parse()
            .map_err(|_| err(format!("line {ln}: bad index")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| err(format!("line {ln}: bad value")))?;
        if i >= nx || j >= ny {
            return Err(err(format!("line {ln}: cell ({i},{j}) outside {nx}x{ny}")));
        }
        let k = j * nx + i;
        if std::mem::replace(&mut seen[k], true) {
            return Err(err(format!("line {ln}: duplicate cell ({i},{j})")));
        }
        values.as_mut().expect("allocated")[k] = v;
    }
    let (Some(o), Some(h), Some((nx, ny))) = (origin, spacing, shape) else {
        return Err(err("missing header".into()));
    };
    let grid = Grid2D::new(o, h, nx, ny).map_err(|e| err(e.to_string()))?;
    let Some(values) = values else {
        return Err(err("no data rows".into()));
    };
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(err(format!("missing cell {:?}", grid.coords(missing))));
    }
    ScalarField2D::new(grid, kind, values)
}

pub fn write_csv_file(field: &ScalarField2D, path: &Path) -> Result<()> {
    std::fs::write(path, write_csv(field)).map_err(|e| Error::io(path, e))
}

pub fn read_csv_file(path: &Path) -> Result<ScalarField2D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_csv(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let g = Grid2D::new([-1.0 / 3.0, 0.1 + 0.2], 0.07, 5, 3).unwrap();
        let f = ScalarField2D::from_fn(g, FieldKind::Potential, |x| {
            (x[0] * 7.1).exp() / 3.0 - 1e-300
        });
        let back = read_csv(&write_csv(&f), "mem").unwrap();
        assert_eq!(back.grid(), f.grid());
        assert_eq!(back.kind(), FieldKind::Potential);
        for (a, b) in f.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_truncated_input() {
        let g = Grid2D::centered(1.0, 3).unwrap();
        let f = ScalarField2D::zeros(g, FieldKind::Density);
        let text = write_csv(&f);
        let cut: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_csv(&cut, "cut"), Err(Error::Parse { .. })));
        assert!(read_csv("1,2,3\n", "bad").is_err());
    }
}
