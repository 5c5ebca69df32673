//! Run artifacts: long-format field CSVs, tables, JSON and text files.
//!
//! Field files have one row per time node and cell (or face), with header
//! `t,x,value` in 1D and `t,x,y,value` in 2D. Numbers are written in their
//! shortest round-trip form, so reading a file back reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{FaceField, Grid, ScalarField};

/// Shortest decimal form that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn header(g: &Grid) -> &'static str {
    if g.dim() == 1 {
        "t,x,value"
    } else {
        "t,x,y,value"
    }
}

fn push_row(out: &mut String, g: &Grid, t: f64, at: [f64; 2], v: f64) {
    let _ = write!(out, "{},{}", format_float(t), format_float(at[0]));
    if g.dim() == 2 {
        let _ = write!(out, ",{}", format_float(at[1]));
    }
    let _ = writeln!(out, ",{}", format_float(v));
}

/// Component suffix of face files.
pub fn axis_suffix(a: usize) -> &'static str {
    ["x", "y"][a]
}

pub struct ArtifactWriter {
    root: PathBuf,
}

impl ArtifactWriter {
    /// Creates `root` and `root/fields`.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("fields"))?;
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `fields/<name>.csv` from cell frames at the given times.
    pub fn cells<'a>(&self, name: &str, times: &[f64], frames: impl IntoIterator<Item = &'a ScalarField>) -> Result<()> {
        let mut out = String::new();
        let mut grid = None;
        for (t, f) in times.iter().zip(frames) {
            let g = *f.grid();
            if grid.is_none() {
                out.push_str(header(&g));
                out.push('\n');
                grid = Some(g);
            }
            for (i, &v) in f.values().iter().enumerate() {
                push_row(&mut out, &g, *t, g.center(i), v);
            }
        }
        fs::write(self.root.join("fields").join(format!("{name}.csv")), out)?;
        Ok(())
    }

    /// `fields/<name>_x.csv` (and `_y`) from face frames, boundary faces included.
    pub fn faces<'a>(&self, name: &str, times: &[f64], frames: impl IntoIterator<Item = &'a FaceField> + Clone) -> Result<()> {
        let Some(first) = frames.clone().into_iter().next() else {
            return Ok(());
        };
        let g = *first.grid();
        for a in 0..g.dim() {
            let mut out = String::from(header(&g));
            out.push('\n');
            for (t, f) in times.iter().zip(frames.clone()) {
                for (face, &v) in f.component(a).iter().enumerate() {
                    push_row(&mut out, &g, *t, g.face_center(a, face), v);
                }
            }
            let file = format!("{name}_{}.csv", axis_suffix(a));
            fs::write(self.root.join("fields").join(file), out)?;
        }
        Ok(())
    }

    /// Plain CSV table at `root/<file>`.
    pub fn table(&self, file: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let mut out = columns.join(",");
        out.push('\n');
        for row in rows {
            let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        fs::write(self.root.join(file), out)?;
        Ok(())
    }

    pub fn json(&self, file: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.root.join(file), text)?;
        Ok(())
    }

    pub fn text(&self, file: &str, text: &str) -> Result<()> {
        fs::write(self.root.join(file), text)?;
        Ok(())
    }
}

fn format_error(file: &Path, message: impl Into<String>) -> Error {
    Error::FieldFormat {
        file: file.display().to_string(),
        message: message.into(),
    }
}

/// Parses a CSV with a header into numeric rows of the expected width.
pub fn read_table(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| format_error(path, "empty file"))?;
    if head.split(',').count() != width {
        return Err(format_error(path, format!("expected {width} columns, header is {head:?}")));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            match row {
                Ok(r) if r.len() == width => Ok(r),
                Ok(r) => Err(format_error(path, format!("line {}: {} columns", n + 2, r.len()))),
                Err(e) => Err(format_error(path, format!("line {}: {e}", n + 2))),
            }
        })
        .collect()
}

/// Splits long-format rows into `frames` blocks of `per_frame` values,
/// checking the coordinates against `at`.
fn split_frames(path: &Path, g: &Grid, rows: Vec<Vec<f64>>, frames: usize, at: impl Fn(usize) -> [f64; 2]) -> Result<Vec<Vec<f64>>> {
    if frames == 0 || rows.len() % frames != 0 {
        return Err(format_error(path, format!("{} rows do not split into {frames} frames", rows.len())));
    }
    let per = rows.len() / frames;
    let tol = 1e-9 * g.diameter().max(1.0);
    let mut out = Vec::with_capacity(frames);
    for chunk in rows.chunks(per) {
        let mut values = Vec::with_capacity(per);
        for (i, row) in chunk.iter().enumerate() {
            let p = at(i);
            let bad = (row[1] - p[0]).abs() > tol || (g.dim() == 2 && (row[2] - p[1]).abs() > tol);
            if bad {
                return Err(format_error(path, format!("row {i} of a frame is not at {p:?}")));
            }
            values.push(*row.last().expect("nonempty row"));
        }
        out.push(values);
    }
    Ok(out)
}

/// Reads `fields/<name>.csv` back into cell frames.
pub fn read_cells(root: &Path, name: &str, g: &Grid, frames: usize) -> Result<Vec<ScalarField>> {
    let path = root.join("fields").join(format!("{name}.csv"));
    let rows = read_table(&path, g.dim() + 2)?;
    if rows.len() != frames * g.len() {
        return Err(format_error(&path, format!("expected {} rows, found {}", frames * g.len(), rows.len())));
    }
    split_frames(&path, g, rows, frames, |i| g.center(i))?
        .into_iter()
        .map(|v| ScalarField::new(*g, v))
        .collect()
}

/// Reads `fields/<name>_x.csv` (and `_y`) back into face frames.
pub fn read_faces(root: &Path, name: &str, g: &Grid, frames: usize) -> Result<Vec<FaceField>> {
    let mut comps: Vec<Vec<Vec<f64>>> = Vec::new();
    for a in 0..g.dim() {
        let path = root.join("fields").join(format!("{name}_{}.csv", axis_suffix(a)));
        let rows = read_table(&path, g.dim() + 2)?;
        if rows.len() != frames * g.face_count(a) {
            return Err(format_error(&path, format!("expected {} rows, found {}", frames * g.face_count(a), rows.len())));
        }
        comps.push(split_frames(&path, g, rows, frames, |f| g.face_center(a, f))?);
    }
    (0..frames)
        .map(|k| FaceField::new(*g, comps.iter().map(|c| c[k].clone()).collect()))
        .collect()
}
