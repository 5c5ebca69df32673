//! Projection of velocities onto the admissible cone
//! `adm(rho) = { v : div v >= 0 on {rho = 1} }` and the associated pressure.
//!
//! On the saturated set `S` the pressure solves the complementarity problem
//!
//! ```text
//! p >= 0,   w = div u - lap p >= 0,   p w = 0   on S,      p = 0 off S
//! ```
//!
//! and the projection is `v = u - grad p`. Projected Gauss–Seidel sweeps
//! locate the active set; a primal-dual active-set step then solves the
//! equality system on it exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient_flow::{isotonic_regression, QuantileFunction};
use crate::grid::{divergence, gradient, DensityField, FaceField, ScalarField, SATURATION_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionOptions {
    /// Bound on the natural residual `max |min(p, w / M_ii)|`.
    pub tol: f64,
    /// Budget of Gauss–Seidel sweeps.
    pub max_iter: usize,
    /// Over-relaxation factor.
    pub omega: f64,
    /// Saturation threshold: cells with `rho >= 1 - sat_eps` are saturated.
    pub sat_eps: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            tol: 1e-9,
            max_iter: 20_000,
            omega: 1.5,
            sat_eps: SATURATION_EPS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    /// Realized velocity `u - grad p`.
    pub v: FaceField,
    pub p: ScalarField,
    /// `sum_S |p_i w_i| cellvol`.
    pub complementarity: f64,
    /// `|<v, grad p>|`.
    pub orthogonality: f64,
    /// `max(0, -min_S div v)`.
    pub cone_violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Sweeps between attempts at an exact active-set solve.
const SWEEPS_PER_POLISH: usize = 20;
const ACTIVE_SET_STEPS: usize = 12;
const FULL_SET_STEPS: usize = 30;

/// Discrete complementarity problem `w = q + M p` on the saturated set.
struct Lcp {
    sat: Vec<bool>,
    q: Vec<f64>,
    diag: Vec<f64>,
    /// Up to four `(neighbor, coupling)` pairs per cell.
    nbrs: Vec<Vec<(usize, f64)>>,
}

impl Lcp {
    fn new(sat: Vec<bool>, u: &FaceField) -> Self {
        let g = *u.grid();
        let q = divergence(u).into_values();
        let mut nbrs = vec![Vec::with_capacity(4); g.len()];
        let mut diag = vec![0.0; g.len()];
        for a in 0..g.dim() {
            let c = 1.0 / (g.h(a) * g.h(a));
            for (_, lo, hi) in g.interior_faces(a) {
                nbrs[lo].push((hi, c));
                nbrs[hi].push((lo, c));
                diag[lo] += c;
                diag[hi] += c;
            }
        }
        Lcp { sat, q, diag, nbrs }
    }

    fn w(&self, p: &[f64], i: usize) -> f64 {
        let off: f64 = self.nbrs[i].iter().map(|&(j, c)| c * p[j]).sum();
        self.q[i] + self.diag[i] * p[i] - off
    }

    fn sweep(&self, p: &mut [f64], omega: f64) {
        for i in 0..p.len() {
            if self.sat[i] {
                let w = self.w(p, i);
                p[i] = (p[i] - omega * w / self.diag[i]).max(0.0);
            }
        }
    }

    fn natural_residual(&self, p: &[f64]) -> f64 {
        (0..p.len())
            .filter(|&i| self.sat[i])
            .map(|i| p[i].min(self.w(p, i) / self.diag[i]).abs())
            .fold(0.0, f64::max)
    }

    fn apply_restricted(&self, x: &[f64], mask: &[bool], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = if mask[i] {
                let off: f64 = self.nbrs[i]
                    .iter()
                    .filter(|&&(j, _)| mask[j])
                    .map(|&(j, c)| c * x[j])
                    .sum();
                self.diag[i] * x[i] - off
            } else {
                0.0
            };
        }
    }

    /// Solves `M_AA x_A = -q_A`, `x = 0` off `A`, by conjugate gradients.
    fn solve_on(&self, mask: &[bool]) -> Vec<f64> {
        let n = mask.len();
        let active = mask.iter().filter(|&&m| m).count();
        let mut b: Vec<f64> = (0..n).map(|i| if mask[i] { -self.q[i] } else { 0.0 }).collect();
        if active == n {
            // Pure Neumann block: remove the compatibility defect.
            let mean = b.iter().sum::<f64>() / n as f64;
            b.iter_mut().for_each(|v| *v -= mean);
        }
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return x;
        }
        let mut r = b;
        let mut d = r.clone();
        let mut md = vec![0.0; n];
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        for _ in 0..(5 * active + 100) {
            self.apply_restricted(&d, mask, &mut md);
            let dmd: f64 = d.iter().zip(&md).map(|(a, b)| a * b).sum();
            if dmd <= 0.0 {
                break;
            }
            let alpha = rr / dmd;
            for i in 0..n {
                x[i] += alpha * d[i];
                r[i] -= alpha * md[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            if rr_new.sqrt() <= 1e-15 * bnorm {
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                d[i] = r[i] + beta * d[i];
            }
        }
        x
    }

    /// Primal-dual active-set iterations started from `p`. Returns the final
    /// iterate when it meets `tol`.
    fn polish(&self, p: &[f64], tol: f64) -> Option<Vec<f64>> {
        let mask: Vec<bool> = (0..p.len())
            .map(|i| self.sat[i] && p[i] - self.w(p, i) / self.diag[i] > 0.0)
            .collect();
        self.active_set(mask, tol, ACTIVE_SET_STEPS)
    }

    fn active_set(&self, mut mask: Vec<bool>, tol: f64, steps: usize) -> Option<Vec<f64>> {
        let n = mask.len();
        for _ in 0..steps {
            let x = self.solve_on(&mask);
            let clipped: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            // Degenerate cells (p = w = 0) may flip on rounding; accept any
            // iterate that already meets the tolerance.
            if self.natural_residual(&clipped) <= tol {
                return Some(clipped);
            }
            let next: Vec<bool> = (0..n)
                .map(|i| self.sat[i] && x[i] - self.w(&x, i) / self.diag[i] > 0.0)
                .collect();
            if next == mask {
                return None;
            }
            mask = next;
        }
        None
    }
}

/// Projects `u` onto `adm(rho)` with default options.
pub fn project_velocity(rho: &DensityField, u: &FaceField, tol: f64, max_iter: usize) -> Result<ProjectionResult> {
    let opts = ProjectionOptions {
        tol,
        max_iter,
        ..ProjectionOptions::default()
    };
    project_velocity_with(rho, u, &opts, None)
}

/// Projects `u` onto `adm(rho)`, optionally warm-starting from a previous
/// pressure.
pub fn project_velocity_with(
    rho: &DensityField,
    u: &FaceField,
    opts: &ProjectionOptions,
    warm: Option<&ScalarField>,
) -> Result<ProjectionResult> {
    let g = *rho.grid();
    if u.grid() != &g || warm.is_some_and(|w| w.grid() != &g) {
        return Err(Error::GridMismatch);
    }
    if !(opts.tol > 0.0) || !(opts.omega > 0.0 && opts.omega < 2.0) {
        return Err(Error::param("options", "need tol > 0 and omega in (0, 2)"));
    }
    let sat = rho.saturated(opts.sat_eps);
    if !sat.iter().any(|&s| s) {
        return Ok(ProjectionResult {
            v: u.clone(),
            p: ScalarField::zeros(g),
            complementarity: 0.0,
            orthogonality: 0.0,
            cone_violation: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let lcp = Lcp::new(sat, u);
    let all_saturated = lcp.sat.iter().all(|&s| s);

    let (p, iterations, converged) = if all_saturated {
        // div v = 0 is forced; the pressure is the Neumann solution.
        let mut x = lcp.solve_on(&lcp.sat);
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        x.iter_mut().for_each(|v| *v -= lo);
        (x, 0, true)
    } else {
        let mut p: Vec<f64> = match warm {
            Some(w) => w
                .values()
                .iter()
                .zip(&lcp.sat)
                .map(|(&v, &s)| if s { v.max(0.0) } else { 0.0 })
                .collect(),
            None => vec![0.0; g.len()],
        };
        let mut iterations = 0;
        let mut converged = lcp.natural_residual(&p) <= opts.tol;
        if !converged {
            // Starting from the whole saturated set shrinks the active set
            // monotonically for this M-matrix, usually in a few steps.
            if let Some(exact) = lcp.active_set(lcp.sat.clone(), opts.tol, FULL_SET_STEPS) {
                p = exact;
                converged = true;
            }
        }
        while !converged && iterations < opts.max_iter {
            let batch = SWEEPS_PER_POLISH.min(opts.max_iter - iterations);
            for _ in 0..batch {
                lcp.sweep(&mut p, opts.omega);
            }
            iterations += batch;
            if lcp.natural_residual(&p) <= opts.tol {
                converged = true;
            } else if let Some(exact) = lcp.polish(&p, opts.tol) {
                p = exact;
                converged = true;
            }
        }
        (p, iterations, converged)
    };

    let p = ScalarField::new(g, p)?;
    let v = u.sub(&gradient(&p));
    let w = divergence(&v);
    let vol = g.cell_volume();
    let complementarity = p
        .values()
        .iter()
        .zip(w.values())
        .zip(&lcp.sat)
        .filter(|(_, &s)| s)
        .map(|((pi, wi), _)| (pi * wi).abs())
        .sum::<f64>()
        * vol;
    let orthogonality = v.dot(&gradient(&p)).abs();
    let cone = violation_on(&lcp.sat, &w);
    Ok(ProjectionResult {
        v,
        p,
        complementarity,
        orthogonality,
        cone_violation: cone,
        iterations,
        converged,
    })
}

fn violation_on(sat: &[bool], div: &ScalarField) -> f64 {
    div.values()
        .iter()
        .zip(sat)
        .filter(|(_, &s)| s)
        .map(|(d, _)| -d)
        .fold(0.0, f64::max)
}

/// `max(0, -min div v)` over saturated cells; zero iff `v` is admissible.
pub fn cone_violation(rho: &DensityField, v: &FaceField) -> Result<f64> {
    if rho.grid() != v.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(violation_on(&rho.saturated(SATURATION_EPS), &divergence(v)))
}

/// Closest density in `K = { rho <= 1 }` in the 1D Wasserstein distance.
///
/// Works on the quantile function `Q` of `rho`: the constraint reads
/// `Q(s) - s` nondecreasing, so the projection is the isotonic regression of
/// `Q - s` at the quantile knots, clipped to `[a, b - 1]`. Inputs already in
/// `K` are returned unchanged.
pub fn wasserstein_project_k_1d(rho: &DensityField) -> Result<DensityField> {
    let g = *rho.grid();
    if g.dim() != 1 {
        return Err(Error::Dimension {
            required: 1,
            found: g.dim(),
        });
    }
    let ax = *g.axis(0);
    if ax.length() < 1.0 {
        return Err(Error::Infeasible(format!(
            "domain length {} < 1 admits no density bounded by 1",
            ax.length()
        )));
    }
    if rho.in_k() {
        return Ok(rho.clone());
    }
    let q = QuantileFunction::from_density(rho, g.nx())?;
    let weights = q.lumped_weights();
    let shifted: Vec<f64> = q.x().iter().zip(q.s()).map(|(x, s)| x - s).collect();
    let r = isotonic_regression(&shifted, &weights, ax.lower, ax.upper - 1.0);
    let x: Vec<f64> = r.iter().zip(q.s()).map(|(r, s)| r + s).collect();
    q.with_positions(x)?.to_density(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts() -> ProjectionOptions {
        ProjectionOptions {
            tol: 1e-12,
            ..ProjectionOptions::default()
        }
    }

    #[test]
    fn inactive_constraint_leaves_velocity() {
        let g = Grid::line(0.0, 4.0, 40).unwrap();
        let rho = DensityField::uniform(g);
        let u = FaceField::from_fn(g, |x| [x[0].sin(), 0.0]);
        let res = project_velocity(&rho, &u, 1e-9, 100).unwrap();
        assert_eq!(res.v, u);
        assert_eq!(res.p.max_abs(), 0.0);
        assert!(res.converged);
    }

    #[test]
    fn compressive_field_on_full_domain() {
        let n = 50;
        let g = Grid::line(0.0, 1.0, n).unwrap();
        let rho = DensityField::uniform(g);
        let u = FaceField::from_fn(g, |x| [0.5 - x[0], 0.0]);
        let res = project_velocity(&rho, &u, 1e-9, 100).unwrap();
        assert!(res.v.max_abs() < 1e-12);
        let pmin = res.p.min();
        assert!(pmin.abs() < 1e-14);
        // p = x/2 - x^2/2 + const: second differences are exactly -1.
        let expect = ScalarField::from_fn(g, |x| x[0] / 2.0 - x[0] * x[0] / 2.0);
        let shift = res.p.values()[0] - expect.values()[0];
        for (a, b) in res.p.values().iter().zip(expect.values()) {
            assert!((a - b - shift).abs() < 1e-10);
        }
    }

    #[test]
    fn saturated_block_inside_free_region() {
        let g = Grid::line(0.0, 2.0, 40).unwrap();
        let rho = DensityField::new(g, (0..40).map(|i| if (10..30).contains(&i) { 1.0 } else { 0.0 }).collect()).unwrap();
        // Inward-pointing field on the block.
        let u = FaceField::from_fn(g, |x| [1.0 - x[0], 0.0]);
        let res = project_velocity_with(&rho, &u, &opts(), None).unwrap();
        assert!(res.converged);
        assert!(res.p.min() >= 0.0);
        for i in (0..10).chain(30..40) {
            assert_eq!(res.p.values()[i], 0.0);
        }
        assert!(res.cone_violation <= 1e-9);
        assert!(res.orthogonality <= 1e-9);
        assert!(res.v.max_abs() <= u.max_abs() + 1e-12);
    }

    #[test]
    fn random_projection_properties_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid::rect((0.0, 1.0), (0.0, 1.0), 8, 8).unwrap();
        for _ in 0..20 {
            let rho = DensityField::new(g, (0..64).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.3 }).collect()).unwrap();
            let u = FaceField::from_fn(g, |_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let res = project_velocity_with(&rho, &u, &opts(), None).unwrap();
            assert!(res.converged);
            assert!(res.cone_violation <= 1e-10);
            assert!(res.orthogonality <= 1e-10 * (1.0 + u.norm() * res.p.max_abs()));
            assert!(res.v.norm() <= u.norm() + 1e-12);
            let again = project_velocity_with(&rho, &res.v, &opts(), None).unwrap();
            assert!(again.p.max_abs() <= 1e-10);
            assert!(again.v.linf_distance(&res.v) <= 1e-9);
        }
    }

    #[test]
    fn warm_start_reaches_same_pressure() {
        let g = Grid::line(0.0, 2.0, 60).unwrap();
        let rho = DensityField::new(g, (0..60).map(|i| if (15..45).contains(&i) { 1.0 } else { 0.0 }).collect()).unwrap();
        let u = FaceField::from_fn(g, |x| [(1.0 - x[0]).signum(), 0.0]);
        let cold = project_velocity_with(&rho, &u, &opts(), None).unwrap();
        let warm = project_velocity_with(&rho, &u, &opts(), Some(&cold.p)).unwrap();
        assert!(warm.p.linf_distance(&cold.p) < 1e-10);
        assert_eq!(warm.iterations, 0);
    }

    #[test]
    fn cone_violation_examples() {
        let g = Grid::line(0.0, 1.0, 10).unwrap();
        let rho = DensityField::uniform(g);
        assert_eq!(cone_violation(&rho, &FaceField::zeros(g)).unwrap(), 0.0);
        let block = DensityField::new(g, (0..10).map(|i| if (3..7).contains(&i) { 1.0 } else { 0.0 }).collect()).unwrap();
        let expanding = FaceField::from_fn(g, |x| [x[0] - 0.5, 0.0]);
        assert_eq!(cone_violation(&block, &expanding).unwrap(), 0.0);
        let compressive = expanding.scale(-1.0);
        assert!((cone_violation(&block, &compressive).unwrap() - 1.0).abs() < 1e-12);
        // Walls make any nonzero flux compressive somewhere on a full domain.
        assert!(cone_violation(&rho, &expanding).unwrap() > 0.0);
    }

    #[test]
    fn k_projection_fixes_members_and_flattens_bumps() {
        let g = Grid::line(0.0, 2.0, 40).unwrap();
        let inside = DensityField::from_fn(g, |x| if x[0] < 1.2 { 0.8 } else { 0.1 }).unwrap();
        assert_eq!(wasserstein_project_k_1d(&inside).unwrap(), inside);

        let bump = DensityField::from_fn(g, |x| (-(x[0] - 1.0).powi(2) / 0.02).exp()).unwrap();
        let out = wasserstein_project_k_1d(&bump).unwrap();
        assert!(out.in_k());
        assert!((out.mass() - 1.0).abs() < 1e-12);
        for i in 0..20 {
            assert!((out.values()[i] - out.values()[39 - i]).abs() < 1e-9);
        }
        assert!((out.values()[20] - 1.0).abs() < 1e-9);

        let short = Grid::line(0.0, 0.5, 10).unwrap();
        assert!(wasserstein_project_k_1d(&DensityField::uniform(short)).is_err());
    }
}
