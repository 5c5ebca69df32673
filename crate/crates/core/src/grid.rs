//! Uniform rectangular grids, field containers and the staggered discrete
//! calculus shared by every solver.
//!
//! Scalars and densities live at cell centers, vector fields live on cell
//! faces (marker-and-cell layout). Faces on the domain boundary always carry
//! zero normal component, which encodes the no-flux condition. With that
//! convention `divergence` is exactly the negative adjoint of `gradient`
//! under the cell-volume weighted inner products:
//!
//! ```text
//! <grad f, v>_faces + <f, div v>_cells = 0
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold defining the discrete saturated set `{rho >= 1 - SATURATION_EPS}`.
pub const SATURATION_EPS: f64 = 1e-6;
/// Admissible overshoot of the density constraint `rho <= 1`.
pub const K_EPS: f64 = 1e-8;
/// Mass normalization tolerance.
pub const MASS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub cells: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) {
            return Err(Error::InvalidGrid("non-finite axis bounds".into()));
        }
        if upper <= lower {
            return Err(Error::InvalidGrid(format!(
                "axis upper bound {upper} must exceed lower bound {lower}"
            )));
        }
        if cells < 2 {
            return Err(Error::InvalidGrid(format!(
                "axis needs at least 2 cells, got {cells}"
            )));
        }
        Ok(Axis {
            lower,
            upper,
            cells,
        })
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn h(&self) -> f64 {
        self.length() / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 0.5) * self.h()
    }

    /// Position of face `i`, `0 <= i <= cells`.
    pub fn face(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.h()
    }
}

/// A 1D or 2D uniform grid. Cells are numbered `i + nx * j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    axes: [Axis; 2],
}

const UNIT_AXIS: Axis = Axis {
    lower: 0.0,
    upper: 1.0,
    cells: 1,
};

impl Grid {
    pub fn build(bounds: &[(f64, f64)], cells: &[usize]) -> Result<Grid> {
        if bounds.is_empty() || bounds.len() > 2 || bounds.len() != cells.len() {
            return Err(Error::InvalidGrid(format!(
                "expected 1 or 2 axes with matching cell counts, got {} bounds and {} counts",
                bounds.len(),
                cells.len()
            )));
        }
        let mut axes = [UNIT_AXIS; 2];
        for (a, (&(lo, hi), &n)) in bounds.iter().zip(cells).enumerate() {
            axes[a] = Axis::new(lo, hi, n)?;
        }
        Ok(Grid {
            dim: bounds.len(),
            axes,
        })
    }

    pub fn line(lower: f64, upper: f64, cells: usize) -> Result<Grid> {
        Grid::build(&[(lower, upper)], &[cells])
    }

    pub fn rect(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> Result<Grid> {
        Grid::build(&[x, y], &[nx, ny])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn axis(&self, a: usize) -> &Axis {
        &self.axes[a]
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes[..self.dim]
    }

    pub fn h(&self, a: usize) -> f64 {
        self.axes[a].h()
    }

    /// Smallest cell size over all axes.
    pub fn h_min(&self) -> f64 {
        self.axes().iter().map(Axis::h).fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes().iter().map(Axis::h).product()
    }

    /// Lebesgue measure of the domain.
    pub fn measure(&self) -> f64 {
        self.axes().iter().map(Axis::length).product()
    }

    pub fn nx(&self) -> usize {
        self.axes[0].cells
    }

    /// Cell count along y; 1 for a 1D grid.
    pub fn ny(&self) -> usize {
        if self.dim == 2 {
            self.axes[1].cells
        } else {
            1
        }
    }

    pub fn len(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.nx() * j
    }

    pub fn unravel(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx(), idx / self.nx())
    }

    /// Cell center; the second coordinate is 0 on a 1D grid.
    pub fn center(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.unravel(idx);
        let y = if self.dim == 2 {
            self.axes[1].center(j)
        } else {
            0.0
        };
        [self.axes[0].center(i), y]
    }

    pub fn centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(move |idx| self.center(idx))
    }

    /// Number of faces (boundary included) normal to axis `a`.
    pub fn face_count(&self, a: usize) -> usize {
        match a {
            0 => (self.nx() + 1) * self.ny(),
            1 if self.dim == 2 => self.nx() * (self.ny() + 1),
            _ => 0,
        }
    }

    /// Faces of cell `idx` normal to axis `a`: (lower face, upper face).
    pub fn cell_faces(&self, a: usize, idx: usize) -> (usize, usize) {
        let (i, j) = self.unravel(idx);
        let nx = self.nx();
        if a == 0 {
            let f = i + (nx + 1) * j;
            (f, f + 1)
        } else {
            let f = i + nx * j;
            (f, f + nx)
        }
    }

    /// Center of face `f` normal to axis `a`.
    pub fn face_center(&self, a: usize, f: usize) -> [f64; 2] {
        let nx = self.nx();
        if a == 0 {
            let (i, j) = (f % (nx + 1), f / (nx + 1));
            let y = if self.dim == 2 {
                self.axes[1].center(j)
            } else {
                0.0
            };
            [self.axes[0].face(i), y]
        } else {
            let (i, j) = (f % nx, f / nx);
            [self.axes[0].center(i), self.axes[1].face(j)]
        }
    }

    /// Whether face `f` normal to axis `a` lies on the domain boundary.
    pub fn is_boundary_face(&self, a: usize, f: usize) -> bool {
        let nx = self.nx();
        if a == 0 {
            let i = f % (nx + 1);
            i == 0 || i == nx
        } else {
            let j = f / nx;
            j == 0 || j == self.ny()
        }
    }

    /// Interior faces normal to axis `a` as `(face, lower cell, upper cell)`.
    pub fn interior_faces(&self, a: usize) -> InteriorFaces {
        InteriorFaces {
            nx: self.nx(),
            ny: self.ny(),
            axis: a,
            i: if a == 0 { 1 } else { 0 },
            j: if a == 0 { 0 } else { 1 },
            active: a < self.dim,
        }
    }

    /// Cells sharing a face with `idx`.
    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> {
        let (i, j) = self.unravel(idx);
        let (nx, ny) = (self.nx(), self.ny());
        let mut out = [usize::MAX; 4];
        if i > 0 {
            out[0] = idx - 1;
        }
        if i + 1 < nx {
            out[1] = idx + 1;
        }
        if self.dim == 2 {
            if j > 0 {
                out[2] = idx - nx;
            }
            if j + 1 < ny {
                out[3] = idx + nx;
            }
        }
        out.into_iter().filter(|&n| n != usize::MAX)
    }

    /// Cell containing `point`, clamped to the domain.
    pub fn locate(&self, point: [f64; 2]) -> usize {
        let mut ij = [0usize; 2];
        for (a, ax) in self.axes().iter().enumerate() {
            let s = ((point[a] - ax.lower) / ax.h()).floor();
            ij[a] = s.clamp(0.0, (ax.cells - 1) as f64) as usize;
        }
        self.index(ij[0], ij[1])
    }

    pub fn contains(&self, point: [f64; 2]) -> bool {
        self.axes()
            .iter()
            .enumerate()
            .all(|(a, ax)| point[a] >= ax.lower && point[a] <= ax.upper)
    }

    pub fn clamp(&self, point: [f64; 2]) -> [f64; 2] {
        let mut p = point;
        for (a, ax) in self.axes().iter().enumerate() {
            p[a] = p[a].clamp(ax.lower, ax.upper);
        }
        p
    }

    /// Diameter of the domain.
    pub fn diameter(&self) -> f64 {
        self.axes()
            .iter()
            .map(|ax| ax.length() * ax.length())
            .sum::<f64>()
            .sqrt()
    }
}

pub struct InteriorFaces {
    nx: usize,
    ny: usize,
    axis: usize,
    i: usize,
    j: usize,
    active: bool,
}

impl Iterator for InteriorFaces {
    type Item = (usize, usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        if !self.active {
            return None;
        }
        let (nx, ny) = (self.nx, self.ny);
        if self.axis == 0 {
            if nx < 2 || self.j >= ny {
                return None;
            }
            let (i, j) = (self.i, self.j);
            self.i += 1;
            if self.i >= nx {
                self.i = 1;
                self.j += 1;
            }
            Some((i + (nx + 1) * j, (i - 1) + nx * j, i + nx * j))
        } else {
            if self.j >= ny {
                return None;
            }
            let (i, j) = (self.i, self.j);
            self.i += 1;
            if self.i >= nx {
                self.i = 0;
                self.j += 1;
            }
            Some((i + nx * j, i + nx * (j - 1), i + nx * j))
        }
    }
}

/// Uniform time grid `t_k = k * dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("horizon", format!("must be positive, got {horizon}")));
        }
        if steps < 1 {
            return Err(Error::param("steps", "need at least one time step"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Cell-centered scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "scalar field has {} values for {} cells",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values, "scalar field")?;
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl FnMut([f64; 2]) -> f64) -> Self {
        ScalarField {
            grid,
            values: grid.centers().map(f).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
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

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        debug_assert_eq!(self.grid, other.grid);
        ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `sup |self - other|`.
    pub fn linf_distance(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Piecewise-linear interpolation between cell centers, constant beyond
    /// the outermost centers.
    pub fn sample(&self, point: [f64; 2]) -> f64 {
        let (ix, wx) = center_weights(self.grid.axis(0), point[0]);
        if self.grid.dim() == 1 {
            return self.values[ix] * (1.0 - wx) + self.values[ix + 1] * wx;
        }
        let (iy, wy) = center_weights(self.grid.axis(1), point[1]);
        let g = &self.grid;
        let v = |i: usize, j: usize| self.values[g.index(i, j)];
        (1.0 - wy) * ((1.0 - wx) * v(ix, iy) + wx * v(ix + 1, iy))
            + wy * ((1.0 - wx) * v(ix, iy + 1) + wx * v(ix + 1, iy + 1))
    }
}

/// Lower interpolation node and weight for center-based linear interpolation.
fn center_weights(ax: &Axis, x: f64) -> (usize, f64) {
    let s = ((x - ax.lower) / ax.h() - 0.5).clamp(0.0, (ax.cells - 1) as f64);
    let i = (s.floor() as usize).min(ax.cells - 2);
    (i, s - i as f64)
}

/// Cell-centered nonnegative density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid,
    values: Vec<f64>,
}

impl DensityField {
    /// Wraps nonnegative finite values without renormalizing.
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "density has {} values for {} cells",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values, "density")?;
        if let Some(v) = values.iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidDensity(format!("negative value {v}")));
        }
        Ok(DensityField { grid, values })
    }

    /// Rescales nonnegative values to unit mass.
    pub fn normalized(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let mut rho = Self::new(grid, values)?;
        let mass = rho.mass();
        if mass <= 0.0 {
            return Err(Error::InvalidDensity("zero total mass".into()));
        }
        rho.values.iter_mut().for_each(|v| *v /= mass);
        Ok(rho)
    }

    pub fn from_fn(grid: Grid, f: impl FnMut([f64; 2]) -> f64) -> Result<Self> {
        Self::normalized(grid, grid.centers().map(f).collect())
    }

    pub fn uniform(grid: Grid) -> Self {
        DensityField {
            grid,
            values: vec![1.0 / grid.measure(); grid.len()],
        }
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        DensityField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Whether `rho <= 1 + K_EPS` everywhere.
    pub fn in_k(&self) -> bool {
        self.max() <= 1.0 + K_EPS
    }

    /// Cells with `rho >= 1 - eps`.
    pub fn saturated(&self, eps: f64) -> Vec<bool> {
        self.values.iter().map(|&r| r >= 1.0 - eps).collect()
    }

    /// `sum |self - other| * cellvol`.
    pub fn l1_distance(&self, other: &DensityField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    pub fn as_scalar(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.clone(),
        }
    }

    /// Convex combination `(1 - w) * self + w * other`.
    pub fn blend(&self, other: &DensityField, w: f64) -> DensityField {
        DensityField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect(),
        }
    }
}

/// Face-centered vector field; component `a` holds the normal component on
/// faces normal to axis `a`. Boundary faces are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    grid: Grid,
    comps: [Vec<f64>; 2],
}

impl FaceField {
    pub fn zeros(grid: Grid) -> Self {
        FaceField {
            grid,
            comps: [vec![0.0; grid.face_count(0)], vec![0.0; grid.face_count(1)]],
        }
    }

    /// Builds a field from per-axis face values; boundary entries must be zero.
    pub fn new(grid: Grid, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.dim() {
            return Err(Error::InvalidGrid(format!(
                "expected {} face components, got {}",
                grid.dim(),
                comps.len()
            )));
        }
        let mut out = FaceField::zeros(grid);
        for (a, c) in comps.into_iter().enumerate() {
            if c.len() != grid.face_count(a) {
                return Err(Error::InvalidGrid(format!(
                    "axis {a} has {} face values, expected {}",
                    c.len(),
                    grid.face_count(a)
                )));
            }
            check_finite(&c, "face field")?;
            for (f, v) in c.iter().enumerate() {
                if grid.is_boundary_face(a, f) && *v != 0.0 {
                    return Err(Error::InvalidGrid(format!(
                        "boundary face {f} on axis {a} carries nonzero flux {v}"
                    )));
                }
            }
            out.comps[a] = c;
        }
        Ok(out)
    }

    /// Samples `f` at interior face centers, taking the component normal to
    /// each face.
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 2]) -> [f64; 2]) -> Self {
        let mut out = FaceField::zeros(grid);
        for a in 0..grid.dim() {
            for (face, _, _) in grid.interior_faces(a) {
                out.comps[a][face] = f(grid.face_center(a, face))[a];
            }
        }
        out
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn component(&self, a: usize) -> &[f64] {
        &self.comps[a]
    }

    pub(crate) fn component_mut(&mut self, a: usize) -> &mut [f64] {
        &mut self.comps[a]
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().flatten().all(|v| v.is_finite())
    }

    /// Largest |value| on boundary faces; zero for valid fields.
    pub fn boundary_max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for a in 0..self.grid.dim() {
            for (f, v) in self.comps[a].iter().enumerate() {
                if self.grid.is_boundary_face(a, f) {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }

    /// Weighted inner product `sum_faces a * b * cellvol`.
    pub fn dot(&self, other: &FaceField) -> f64 {
        let vol = self.grid.cell_volume();
        self.comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum::<f64>()
            * vol
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn axis_max_abs(&self, a: usize) -> f64 {
        self.comps[a].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn zip_map(&self, other: &FaceField, f: impl Fn(f64, f64) -> f64) -> FaceField {
        debug_assert_eq!(self.grid, other.grid);
        let mut out = FaceField::zeros(self.grid);
        for a in 0..2 {
            out.comps[a] = self.comps[a]
                .iter()
                .zip(&other.comps[a])
                .map(|(&x, &y)| f(x, y))
                .collect();
        }
        out
    }

    pub fn sub(&self, other: &FaceField) -> FaceField {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &FaceField) -> FaceField {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> FaceField {
        self.zip_map(self, |a, _| s * a)
    }

    /// `sup |self - other|` over all faces.
    pub fn linf_distance(&self, other: &FaceField) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .flat_map(|(a, b)| a.iter().zip(b))
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    /// Component `a` averaged from the two faces of each cell.
    pub fn cell_component(&self, a: usize) -> Vec<f64> {
        (0..self.grid.len())
            .map(|idx| {
                let (lo, hi) = self.grid.cell_faces(a, idx);
                0.5 * (self.comps[a][lo] + self.comps[a][hi])
            })
            .collect()
    }

    /// Euclidean magnitude of the cell-averaged vector.
    pub fn cell_magnitude(&self) -> ScalarField {
        let mut sq = vec![0.0; self.grid.len()];
        for a in 0..self.grid.dim() {
            for (s, c) in sq.iter_mut().zip(self.cell_component(a)) {
                *s += c * c;
            }
        }
        ScalarField {
            grid: self.grid,
            values: sq.into_iter().map(f64::sqrt).collect(),
        }
    }

    /// Vector at an arbitrary point: each component is interpolated linearly
    /// between its faces along its own axis and between cell rows across.
    pub fn sample(&self, point: [f64; 2]) -> [f64; 2] {
        let g = &self.grid;
        let mut out = [0.0; 2];
        for (a, slot) in out.iter_mut().enumerate().take(g.dim()) {
            let along = g.axis(a);
            let s = ((point[a] - along.lower) / along.h()).clamp(0.0, along.cells as f64);
            let i = (s.floor() as usize).min(along.cells - 1);
            let w = s - i as f64;
            let value_at = |cross: usize| -> f64 {
                let (lo, hi) = if a == 0 {
                    (i + (g.nx() + 1) * cross, i + 1 + (g.nx() + 1) * cross)
                } else {
                    (cross + g.nx() * i, cross + g.nx() * (i + 1))
                };
                (1.0 - w) * self.comps[a][lo] + w * self.comps[a][hi]
            };
            *slot = if g.dim() == 1 {
                value_at(0)
            } else {
                let b = 1 - a;
                let (ic, wc) = center_weights(g.axis(b), point[b]);
                (1.0 - wc) * value_at(ic) + wc * value_at(ic + 1)
            };
        }
        out
    }
}

/// One field per time node of a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    time: TimeGrid,
    frames: Vec<T>,
}

impl<T> Trajectory<T> {
    pub fn new(time: TimeGrid, frames: Vec<T>) -> Result<Self> {
        if frames.len() != time.nodes() {
            return Err(Error::TimeGridMismatch {
                expected: time.nodes(),
                found: frames.len(),
            });
        }
        Ok(Trajectory { time, frames })
    }

    pub fn constant(time: TimeGrid, frame: T) -> Self
    where
        T: Clone,
    {
        Trajectory {
            time,
            frames: vec![frame; time.nodes()],
        }
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn frames(&self) -> &[T] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [T] {
        &mut self.frames
    }

    pub fn frame(&self, k: usize) -> &T {
        &self.frames[k]
    }

    pub fn last(&self) -> &T {
        self.frames.last().expect("trajectory has at least two nodes")
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Trajectory<U> {
        Trajectory {
            time: self.time,
            frames: self.frames.iter().map(f).collect(),
        }
    }

    pub fn into_frames(self) -> Vec<T> {
        self.frames
    }
}

pub type DensityTrajectory = Trajectory<DensityField>;
pub type ScalarTrajectory = Trajectory<ScalarField>;
pub type FaceTrajectory = Trajectory<FaceField>;

/// Face differences `(f_upper - f_lower) / h`; zero on boundary faces.
pub fn gradient(f: &ScalarField) -> FaceField {
    let g = *f.grid();
    let mut out = FaceField::zeros(g);
    for a in 0..g.dim() {
        let inv_h = 1.0 / g.h(a);
        for (face, lo, hi) in g.interior_faces(a) {
            out.comps[a][face] = (f.values[hi] - f.values[lo]) * inv_h;
        }
    }
    out
}

/// Cell divergence `sum_a (v_upper - v_lower) / h_a`.
pub fn divergence(v: &FaceField) -> ScalarField {
    let g = *v.grid();
    let mut out = vec![0.0; g.len()];
    for a in 0..g.dim() {
        let inv_h = 1.0 / g.h(a);
        for (idx, slot) in out.iter_mut().enumerate() {
            let (lo, hi) = g.cell_faces(a, idx);
            *slot += (v.comps[a][hi] - v.comps[a][lo]) * inv_h;
        }
    }
    ScalarField {
        grid: g,
        values: out,
    }
}

/// Neumann Laplacian `divergence(gradient(f))`.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    divergence(&gradient(f))
}

/// `sum f_i rho_i cellvol`, or `sum f_i cellvol` without a density.
pub fn integrate(f: &ScalarField, rho: Option<&DensityField>) -> Result<f64> {
    let vol = f.grid().cell_volume();
    match rho {
        None => Ok(f.values.iter().sum::<f64>() * vol),
        Some(r) => {
            if r.grid() != f.grid() {
                return Err(Error::GridMismatch);
            }
            Ok(f.values
                .iter()
                .zip(r.values())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * vol)
        }
    }
}

/// Weighted cell inner product `sum a_i b_i cellvol`.
pub fn cell_dot(a: &ScalarField, b: &ScalarField) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        * a.grid().cell_volume()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn build_grid_derived_quantities() {
        let g = Grid::line(0.0, 2.0, 4).unwrap();
        assert_eq!(g.h(0), 0.5);
        let centers: Vec<f64> = g.centers().map(|c| c[0]).collect();
        assert_eq!(centers, vec![0.25, 0.75, 1.25, 1.75]);

        let g2 = Grid::rect((0.0, 1.0), (0.0, 1.0), 2, 2).unwrap();
        assert_eq!(g2.cell_volume(), 0.25);
        assert_eq!(g2.len(), 4);
    }

    #[test]
    fn build_grid_rejects_bad_input() {
        assert!(Grid::line(0.0, -1.0, 4).is_err());
        assert!(Grid::line(0.0, 1.0, 1).is_err());
        assert!(Grid::line(0.0, 0.0, 4).is_err());
        assert!(Grid::build(&[(0.0, 1.0)], &[4, 4]).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
    }

    #[test]
    fn time_grid_endpoints() {
        let tg = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(tg.t(0), 0.0);
        assert_eq!(tg.t(3), 1.0);
        assert_eq!(tg.nodes(), 4);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = Grid::rect((0.0, 1.0), (0.0, 2.0), 5, 4).unwrap();
        let f = ScalarField::constant(g, 3.7);
        assert_eq!(gradient(&f).max_abs(), 0.0);
        assert_eq!(divergence(&FaceField::zeros(g)).max_abs(), 0.0);
    }

    #[test]
    fn gradient_of_linear_is_exact() {
        let g = Grid::line(0.0, 1.0, 4).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0]);
        let grad = gradient(&f);
        let c = grad.component(0);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[4], 0.0);
        for v in &c[1..4] {
            assert!(close(*v, 1.0, 1e-14));
        }
    }

    #[test]
    fn gradient_of_square_is_second_order_on_interior_faces() {
        // f = x^2: the centered face difference is exact for quadratics, so the
        // refinement sequence stays at rounding level.
        for n in [16, 32, 64] {
            let g = Grid::line(0.0, 1.0, n).unwrap();
            let f = ScalarField::from_fn(g, |x| x[0] * x[0]);
            let grad = gradient(&f);
            for (face, _, _) in g.interior_faces(0) {
                let x = g.face_center(0, face)[0];
                assert!(close(grad.component(0)[face], 2.0 * x, 1e-10));
            }
        }
    }

    #[test]
    fn divergence_matches_hand_computation() {
        let g = Grid::line(0.0, 2.0, 4).unwrap();
        let v = FaceField::new(g, vec![vec![0.0, 0.0, 1.0, 0.0, 0.0]]).unwrap();
        let d = divergence(&v);
        assert_eq!(d.values(), &[0.0, 2.0, -2.0, 0.0]);
    }

    #[test]
    fn face_field_rejects_boundary_flux() {
        let g = Grid::line(0.0, 2.0, 4).unwrap();
        assert!(FaceField::new(g, vec![vec![1.0, 0.0, 1.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn interior_face_enumeration_2d() {
        let g = Grid::rect((0.0, 1.0), (0.0, 1.0), 3, 2).unwrap();
        let x: Vec<_> = g.interior_faces(0).collect();
        assert_eq!(x.len(), 2 * 2);
        for (f, lo, hi) in x {
            assert!(!g.is_boundary_face(0, f));
            assert_eq!(hi, lo + 1);
        }
        let y: Vec<_> = g.interior_faces(1).collect();
        assert_eq!(y.len(), 3);
        for (f, lo, hi) in y {
            assert!(!g.is_boundary_face(1, f));
            assert_eq!(hi, lo + 3);
        }
    }

    #[test]
    fn integrate_examples() {
        let g = Grid::line(0.0, 2.0, 200).unwrap();
        let uniform = DensityField::uniform(g);
        let one = ScalarField::constant(g, 1.0);
        assert!(close(integrate(&one, Some(&uniform)).unwrap(), 1.0, 1e-12));
        let x = ScalarField::from_fn(g, |p| p[0]);
        assert!(close(integrate(&x, Some(&uniform)).unwrap(), 1.0, 1e-12));

        let boxed = DensityField::from_fn(g, |p| if p[0] < 1.0 { 1.0 } else { 0.0 }).unwrap();
        let x2 = ScalarField::from_fn(g, |p| p[0] * p[0]);
        // Midpoint rule on [0,1]: error h^2/12.
        let h: f64 = 0.01;
        assert!(close(integrate(&x2, Some(&boxed)).unwrap(), 1.0 / 3.0, h * h / 12.0 + 1e-12));

        let other = Grid::line(0.0, 1.0, 200).unwrap();
        assert!(matches!(
            integrate(&ScalarField::zeros(other), Some(&uniform)),
            Err(Error::GridMismatch)
        ));
    }

    #[test]
    fn normalized_density_has_unit_mass() {
        let g = Grid::rect((0.0, 2.0), (0.0, 1.0), 7, 5).unwrap();
        let rho = DensityField::from_fn(g, |p| 1.0 + p[0] * p[1]).unwrap();
        assert!(close(rho.mass(), 1.0, MASS_TOL));
        assert!(DensityField::new(g, vec![-1.0; 35]).is_err());
    }

    #[test]
    fn sampling_reproduces_linear_fields() {
        let g = Grid::rect((0.0, 2.0), (0.0, 1.0), 8, 6).unwrap();
        let f = ScalarField::from_fn(g, |p| 2.0 * p[0] - p[1]);
        let v = f.sample([0.9, 0.4]);
        assert!(close(v, 1.4, 1e-12));
        let w = FaceField::from_fn(g, |p| [p[1], p[0]]);
        let s = w.sample([0.9, 0.4]);
        assert!(close(s[0], 0.4, 1e-12));
        assert!(close(s[1], 0.9, 1e-12));
    }
}
