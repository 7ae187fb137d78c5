//! CSV ingestion and emission of chart points.
//!
//! Lines starting with `#` are comments. A first row that does not parse as
//! numbers is taken as a header. Column counts: circle 1, torus 2, SO(3) 9
//! (row-major rotation matrix).

use std::io::{BufRead, Write};
use std::path::Path;

use mksd::manifold::{self, rotation_defect};
use mksd::{ChartPoint, Manifold, RotationMatrix};
use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{CliError, Result};

/// Largest rotation defect accepted on input; accepted rows are projected
/// onto SO(3).
pub const DEFAULT_ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub degrees: bool,
    /// Integer directions `m` mapped to `2πm/N`.
    pub directions: Option<u32>,
    pub rotation_tol: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { degrees: false, directions: None, rotation_tol: DEFAULT_ROTATION_TOL }
    }
}

pub fn ingest(path: &Path, manifold: Manifold, opts: &IngestOptions) -> Result<Vec<ChartPoint>> {
    let f = std::fs::File::open(path)?;
    ingest_reader(std::io::BufReader::new(f), manifold, opts)
}

pub fn ingest_reader<R: BufRead>(reader: R, manifold: Manifold, opts: &IngestOptions) -> Result<Vec<ChartPoint>> {
    let width = match manifold {
        Manifold::Circle => 1,
        Manifold::Torus2 => 2,
        Manifold::So3 => 9,
    };
    let mut out = Vec::new();
    let mut seen_row = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if !seen_row => {
                seen_row = true;
                continue;
            }
            Err(e) => return Err(CliError::Parse { line: lineno, msg: e.to_string() }),
        };
        seen_row = true;
        if values.len() != width {
            return Err(CliError::Parse {
                line: lineno,
                msg: format!("expected {width} columns for {}, found {}", manifold.name(), values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Parse { line: lineno, msg: "non-finite value".into() });
        }
        let point = match manifold {
            Manifold::So3 => rotation_row(&values, lineno, opts.rotation_tol)?,
            _ => {
                let angles: Vec<f64> = values
                    .iter()
                    .map(|&v| match opts.directions {
                        Some(n) => std::f64::consts::TAU * v / n as f64,
                        None if opts.degrees => v.to_radians(),
                        None => v,
                    })
                    .collect();
                ChartPoint::new(manifold, &angles)?
            }
        };
        out.push(point);
    }
    Ok(out)
}

fn rotation_row(values: &[f64], line: usize, tol: f64) -> Result<ChartPoint> {
    let m = Matrix3::from_row_slice(values);
    let defect = rotation_defect(&m);
    if defect > tol {
        return Err(CliError::InvalidRotation { line, defect });
    }
    let r = RotationMatrix::nearest(&m)?;
    match manifold::matrix_to_euler(&r) {
        Ok(p) => Ok(p),
        Err(mksd::MksdError::GimbalLock { .. }) => jitter_out_of_gimbal_lock(r.matrix(), line),
        Err(e) => Err(e.into()),
    }
}

// Tilts the rotation about the x axis by 1e-8, doubling the angle until the
// chart accepts it.
fn jitter_out_of_gimbal_lock(m: &Matrix3<f64>, line: usize) -> Result<ChartPoint> {
    let mut angle = 1e-8;
    while angle < 1e-2 {
        let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), angle);
        let r = RotationMatrix::nearest(&(m * tilt.matrix()))?;
        if let Ok(p) = manifold::matrix_to_euler(&r) {
            log::info!("line {line}: rotation in gimbal lock, tilted by {angle:e} rad");
            return Ok(p);
        }
        angle *= 2.0;
    }
    Err(CliError::Parse { line, msg: "could not move rotation out of gimbal lock".into() })
}

/// Writes points as CSV rows in the format [`ingest`] reads (radians; SO(3)
/// as row-major matrices). `header` lines are written as `#` comments.
pub fn emit<W: Write>(mut w: W, points: &[ChartPoint], header: &[String]) -> Result<()> {
    for h in header {
        writeln!(w, "# {h}")?;
    }
    for p in points {
        let row: Vec<String> = match p.manifold() {
            Manifold::So3 => {
                let m = manifold::euler_to_matrix(p).into_inner();
                (0..9).map(|i| format!("{:.17e}", m[(i / 3, i % 3)])).collect()
            }
            _ => p.coords().iter().map(|c| format!("{c:.17e}")).collect(),
        };
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
