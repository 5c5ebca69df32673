//! Density-constrained dynamic transport
//!
//! ```text
//! min  int_0^T int |q|^2 / (2 rho) - int Phi drho_T
//!      d_t rho + div q = 0,   rho(0) = rho_0,   0 <= rho <= 1
//! ```
//!
//! solved in saddle form against a dual potential `chi` with a first-order
//! primal-dual method. Densities live at cells and time nodes `0..=N`; face
//! fluxes `q_k` live on steps `0..N`, step `k` paired with `rho_k`:
//!
//! ```text
//! rho_{k+1} - rho_k + dt div q_k = 0,
//! B_k = sum_faces |q_k|^2 / (2 avg(rho_k)),    avg = mean of the two adjacent cells.
//! ```
//!
//! Each cell carries its own copy of the flux on each of its faces, the face
//! flux being the mean of the two copies. Minimizing `|m|^2 / (4 rho)` per cell
//! over the copies recovers the face cost above and makes the proximal map
//! separable by cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient_flow::{jko_step_quantile, JkoConfig, QuantileFunction};
use crate::grid::{
    divergence, gradient, DensityField, DensityTrajectory, FaceField, Grid, ScalarField, ScalarTrajectory, TimeGrid,
    Trajectory, SATURATION_EPS,
};
use crate::mfg::{face_product, MfgMode, MfgSolution};

/// `|q|^2 / (2 rho)`, zero at `(0, 0)`, infinite for `rho = 0 < |q|`.
fn b_cell(rho: f64, q2: f64) -> f64 {
    if rho > 0.0 {
        q2 / (2.0 * rho)
    } else if q2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Face kinetic energy of one step, without the `cellvol dt` factor.
fn face_energy(rho: &[f64], q: &FaceField) -> f64 {
    let g = *q.grid();
    let mut total = 0.0;
    for a in 0..g.dim() {
        let c = q.component(a);
        for (f, lo, hi) in g.interior_faces(a) {
            total += b_cell(0.5 * (rho[lo] + rho[hi]), c[f] * c[f]);
        }
    }
    total
}

/// `sum_{k<N} sum_faces B(avg rho_k, q_k) cellvol dt`; infinite when a face
/// between two empty cells carries flux.
pub fn kinetic_energy(rho: &DensityTrajectory, q: &[FaceField]) -> Result<f64> {
    let tg = *rho.time();
    if q.len() != tg.steps {
        return Err(Error::TimeGridMismatch {
            expected: tg.steps,
            found: q.len(),
        });
    }
    let g = *rho.frame(0).grid();
    let mut total = 0.0;
    for (k, qk) in q.iter().enumerate() {
        if qk.grid() != &g {
            return Err(Error::GridMismatch);
        }
        total += face_energy(rho.frame(k).values(), qk);
    }
    Ok(total * g.cell_volume() * tg.dt())
}

/// Minimizes `s B(rho, m) + |rho - a|^2/2 + |m - b|^2/2` over `rho in [0, 1]`
/// given `b2 = |b|^2`; returns `rho` and the factor `w` with `m = w b`.
///
/// For fixed `rho` the optimal `m` is `rho b / (rho + s)`; the density solves
/// the increasing equation `rho - a - s b2 / (2 (rho + s)^2) = 0`.
fn prox_kinetic(a: f64, b2: f64, s: f64) -> (f64, f64) {
    let f = |r: f64| r - a - s * b2 / (2.0 * (r + s) * (r + s));
    let rho = if f(0.0) >= 0.0 {
        0.0
    } else if f(1.0) <= 0.0 {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut r = a.clamp(0.0, 1.0);
        for _ in 0..50 {
            let fr = f(r);
            if fr.abs() <= 1e-12 {
                break;
            }
            if fr > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            let df = 1.0 + s * b2 / ((r + s) * (r + s) * (r + s));
            let next = r - fr / df;
            r = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        }
        r
    };
    (rho, rho / (rho + s))
}

/// Per-cell flux copies on the lower and upper face, indexed `[axis][cell]`.
#[derive(Debug, Clone)]
struct Copies {
    lo: Vec<Vec<f64>>,
    hi: Vec<Vec<f64>>,
}

impl Copies {
    fn zeros(g: &Grid) -> Self {
        Copies {
            lo: vec![vec![0.0; g.len()]; g.dim()],
            hi: vec![vec![0.0; g.len()]; g.dim()],
        }
    }

    fn norm_sq(&self, i: usize) -> f64 {
        self.lo.iter().chain(&self.hi).map(|c| c[i] * c[i]).sum()
    }

    /// Face flux: mean of the two copies on each interior face.
    fn flux(&self, g: &Grid) -> FaceField {
        let comps = (0..g.dim())
            .map(|a| {
                let mut c = vec![0.0; g.face_count(a)];
                for (f, lo, hi) in g.interior_faces(a) {
                    c[f] = 0.5 * (self.hi[a][lo] + self.lo[a][hi]);
                }
                c
            })
            .collect();
        FaceField::new(*g, comps).expect("interior faces only")
    }

    /// Half the face values, copied to both adjacent cells.
    fn spread(face: &FaceField) -> Self {
        let g = *face.grid();
        let mut out = Copies::zeros(&g);
        for a in 0..g.dim() {
            let c = face.component(a);
            for i in 0..g.len() {
                let (lo, hi) = g.cell_faces(a, i);
                out.lo[a][i] = 0.5 * c[lo];
                out.hi[a][i] = 0.5 * c[hi];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BbOptions {
    pub max_iter: usize,
    /// Stop when `|gap| <= tol_gap` and `feasibility <= tol_feasibility`.
    pub tol_gap: f64,
    pub tol_feasibility: f64,
    /// Ratio `sigma / tau`; the product is fixed by the operator norm.
    pub step_ratio: f64,
    /// Fraction of the admissible step product `1 / |K|^2` actually used.
    pub step_safety: f64,
    pub check_every: usize,
}

impl Default for BbOptions {
    fn default() -> Self {
        BbOptions {
            max_iter: 5000,
            tol_gap: 1e-6,
            tol_feasibility: 1e-6,
            step_ratio: 1.0,
            step_safety: 0.95,
            check_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BbRecord {
    pub iteration: usize,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub feasibility: f64,
}

#[derive(Debug, Clone)]
pub struct BbIterate {
    /// Densities at nodes `0..=N`.
    pub rho: DensityTrajectory,
    /// Face fluxes on steps `0..N`.
    pub q: Vec<FaceField>,
    pub chi: ScalarTrajectory,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    /// `sum_j |r_j|_1 cellvol` over the continuity and initial constraints.
    pub feasibility: f64,
    pub iterations: usize,
    pub converged: bool,
    pub tau: f64,
    pub sigma: f64,
    pub history: Vec<BbRecord>,
}

struct BbProblem<'a> {
    grid: Grid,
    tg: TimeGrid,
    rho0: &'a [f64],
    phi: &'a [f64],
}

impl BbProblem<'_> {
    /// Constraint residuals `r_0 = rho_0 - rho0`, `r_j = rho_j - rho_{j-1} + dt div q_{j-1}`.
    fn constraint(&self, rho: &[Vec<f64>], m: &[Copies]) -> Vec<Vec<f64>> {
        let dt = self.tg.dt();
        let mut out = Vec::with_capacity(self.tg.nodes());
        out.push(rho[0].iter().zip(self.rho0).map(|(a, b)| a - b).collect());
        for j in 1..self.tg.nodes() {
            let dq = divergence(&m[j - 1].flux(&self.grid));
            out.push(
                (0..self.grid.len())
                    .map(|i| rho[j][i] - rho[j - 1][i] + dt * dq.values()[i])
                    .collect(),
            );
        }
        out
    }

    /// Adjoint of the flux map: `-dt grad chi_{k+1}` spread onto the copies.
    fn copy_gradient(&self, chi: &ScalarField) -> Copies {
        Copies::spread(&gradient(chi))
    }

    fn primal(&self, rho: &[Vec<f64>], m: &[Copies]) -> f64 {
        let dt = self.tg.dt();
        let mut kin = 0.0;
        for (k, mk) in m.iter().enumerate() {
            for (i, &r) in rho[k].iter().enumerate() {
                kin += b_cell(r, 0.5 * mk.norm_sq(i));
            }
        }
        let term: f64 = rho[self.tg.steps].iter().zip(self.phi).map(|(r, p)| r * p).sum();
        (kin * dt - term) * self.grid.cell_volume()
    }

    /// `r_k = (chi_{k+1} - chi_k)/dt + |grad chi_{k+1}|^2 / 2` for `k < N`,
    /// the square being the cell mean over faces.
    fn hj_residual(&self, chi: &[ScalarField]) -> Vec<Vec<f64>> {
        let dt = self.tg.dt();
        (0..self.tg.steps)
            .map(|k| {
                let gr = gradient(&chi[k + 1]);
                let sq = face_product(&gr, &gr);
                (0..self.grid.len())
                    .map(|i| (chi[k + 1].values()[i] - chi[k].values()[i]) / dt + 0.5 * sq.values()[i])
                    .collect()
            })
            .collect()
    }

    fn dual(&self, chi: &[ScalarField]) -> f64 {
        let dt = self.tg.dt();
        let mut run = 0.0;
        for r in self.hj_residual(chi) {
            run += r.iter().map(|v| v.max(0.0)).sum::<f64>();
        }
        let n = self.tg.steps;
        let term: f64 = chi[n].values().iter().zip(self.phi).map(|(c, p)| (c - p).min(0.0)).sum();
        let init: f64 = chi[0].values().iter().zip(self.rho0).map(|(c, r)| c * r).sum();
        (-run * dt + term - init) * self.grid.cell_volume()
    }

    /// Power iteration on `K K^T` for the Euclidean operator norm.
    fn operator_norm(&self) -> f64 {
        let g = self.grid;
        let n = self.tg.steps;
        let dt = self.tg.dt();
        let zero = vec![0.0; g.len()];
        let free = BbProblem { rho0: &zero, ..*self };
        let mut chi: Vec<ScalarField> = (0..=n)
            .map(|k| ScalarField::from_fn(g, |x| 1.0 + 0.3 * (x[0] * 1.7 + x[1] * 0.9 + k as f64 * 0.37).sin()))
            .collect();
        let mut est = 0.0;
        for _ in 0..80 {
            let mut rho = vec![vec![0.0; g.len()]; n + 1];
            let mut m = Vec::with_capacity(n);
            for k in 0..n {
                for i in 0..g.len() {
                    rho[k][i] = chi[k].values()[i] - chi[k + 1].values()[i];
                }
                let mut c = self.copy_gradient(&chi[k + 1]);
                for v in c.lo.iter_mut().chain(c.hi.iter_mut()).flatten() {
                    *v *= -dt;
                }
                m.push(c);
            }
            rho[n] = chi[n].values().to_vec();
            let next = free.constraint(&rho, &m);
            let norm: f64 = next.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let prev: f64 = chi.iter().flat_map(|c| c.values()).map(|v| v * v).sum::<f64>().sqrt();
            est = norm / prev;
            chi = next
                .into_iter()
                .map(|v| ScalarField::new(g, v.into_iter().map(|x| x / norm).collect()).expect("sized"))
                .collect();
        }
        // est approximates |K|^2 from below; pad for the power-iteration error.
        (est * 1.05).sqrt()
    }
}

/// Primal-dual (Chambolle–Pock) solve of the constrained transport problem.
pub fn solve_bb_constrained(
    rho0: &DensityField,
    terminal: &ScalarField,
    tg: &TimeGrid,
    opts: &BbOptions,
) -> Result<BbIterate> {
    let g = *rho0.grid();
    if terminal.grid() != &g {
        return Err(Error::GridMismatch);
    }
    if !rho0.in_k() {
        return Err(Error::Infeasible(format!("initial density {} exceeds 1", rho0.max())));
    }
    if !(opts.step_safety > 0.0 && opts.step_safety < 1.0) || !(opts.step_ratio > 0.0) {
        return Err(Error::param(
            "step sizes",
            "need sigma tau |K|^2 < 1: step_safety in (0, 1) and step_ratio > 0",
        ));
    }
    if opts.check_every == 0 || !(opts.tol_gap > 0.0) || !(opts.tol_feasibility > 0.0) {
        return Err(Error::param("tolerances", "need positive tolerances and check interval"));
    }
    let prob = BbProblem {
        grid: g,
        tg: *tg,
        rho0: rho0.values(),
        phi: terminal.values(),
    };
    let n = tg.steps;
    let dt = tg.dt();
    let norm = prob.operator_norm();
    let product = opts.step_safety / (norm * norm);
    let tau = (product / opts.step_ratio).sqrt();
    let sigma = product / tau;
    let s = 0.5 * tau * dt;

    let mut rho = vec![rho0.values().to_vec(); n + 1];
    let mut m = vec![Copies::zeros(&g); n];
    // The terminal cost held constant in time is dual feasible for static data.
    let mut chi = vec![terminal.clone(); n + 1];
    let mut bar_rho = rho.clone();
    let mut bar_m = m.clone();
    let mut history = Vec::new();
    let mut first_gap: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut snapshot = (f64::NAN, f64::NAN, f64::NAN);

    for it in 1..=opts.max_iter {
        iterations = it;
        for (c, r) in chi.iter_mut().zip(prob.constraint(&bar_rho, &bar_m)) {
            for (cv, rv) in c.values_mut().iter_mut().zip(r) {
                *cv += sigma * rv;
            }
        }
        let old_rho = rho.clone();
        let old_m = m.clone();
        for k in 0..n {
            let cg = prob.copy_gradient(&chi[k + 1]);
            let (ck, ck1) = (chi[k].values(), chi[k + 1].values());
            let mk = &mut m[k];
            for i in 0..g.len() {
                let a = rho[k][i] - tau * (ck[i] - ck1[i]);
                let mut b2 = 0.0;
                for ax in 0..g.dim() {
                    mk.lo[ax][i] += tau * dt * cg.lo[ax][i];
                    mk.hi[ax][i] += tau * dt * cg.hi[ax][i];
                    b2 += mk.lo[ax][i] * mk.lo[ax][i] + mk.hi[ax][i] * mk.hi[ax][i];
                }
                let (r, w) = prox_kinetic(a, b2, s);
                rho[k][i] = r;
                for ax in 0..g.dim() {
                    mk.lo[ax][i] *= w;
                    mk.hi[ax][i] *= w;
                }
            }
        }
        for i in 0..g.len() {
            rho[n][i] = (rho[n][i] - tau * chi[n].values()[i] + tau * prob.phi[i]).clamp(0.0, 1.0);
        }
        for (k, row) in bar_rho.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = 2.0 * rho[k][i] - old_rho[k][i];
            }
        }
        for (k, bm) in bar_m.iter_mut().enumerate() {
            for ax in 0..g.dim() {
                for i in 0..g.len() {
                    bm.lo[ax][i] = 2.0 * m[k].lo[ax][i] - old_m[k].lo[ax][i];
                    bm.hi[ax][i] = 2.0 * m[k].hi[ax][i] - old_m[k].hi[ax][i];
                }
            }
        }

        if it % opts.check_every == 0 || it == opts.max_iter {
            let primal = prob.primal(&rho, &m);
            let dual = prob.dual(&chi);
            let gap = primal - dual;
            let feasibility =
                prob.constraint(&rho, &m).iter().flatten().map(|v| v.abs()).sum::<f64>() * g.cell_volume();
            history.push(BbRecord {
                iteration: it,
                primal,
                dual,
                gap,
                feasibility,
            });
            snapshot = (primal, dual, feasibility);
            let reference = *first_gap.get_or_insert(gap.abs());
            if !gap.is_finite() || gap.abs() > 10.0 * reference.max(1.0) {
                return Err(Error::Diverged { iteration: it, gap });
            }
            if gap.abs() <= opts.tol_gap && feasibility <= opts.tol_feasibility {
                converged = true;
                break;
            }
        }
    }

    let (primal, dual, feasibility) = snapshot;
    let rho = Trajectory::new(
        *tg,
        rho.into_iter().map(|v| DensityField::new(g, v)).collect::<Result<Vec<_>>>()?,
    )?;
    Ok(BbIterate {
        rho,
        q: m.iter().map(|c| c.flux(&g)).collect(),
        chi: Trajectory::new(*tg, chi)?,
        primal,
        dual,
        gap: primal - dual,
        feasibility,
        iterations,
        converged,
        tau,
        sigma,
        history,
    })
}

/// Measure-weighted violations of the six sign conditions.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OptimalityReport {
    /// `int max(0, r)` over `{rho = 0}`, `r = d_t chi + |grad chi|^2 / 2`.
    pub empty: f64,
    /// `int max(0, -r)` over `{rho = 1}`.
    pub saturated: f64,
    /// `int |r|` over `{0 < rho < 1}`.
    pub free: f64,
    /// `int max(0, Phi - chi_T)` over `{rho_T = 0}`.
    pub terminal_empty: f64,
    /// `int max(0, chi_T - Phi)` over `{rho_T = 1}`.
    pub terminal_saturated: f64,
    /// `int |chi_T - Phi|` over `{0 < rho_T < 1}`.
    pub terminal_free: f64,
    /// `max |q_k - avg(rho_k) grad chi_{k+1}|` over interior faces.
    pub momentum: f64,
}

impl OptimalityReport {
    pub fn max_condition(&self) -> f64 {
        [
            self.empty,
            self.saturated,
            self.free,
            self.terminal_empty,
            self.terminal_saturated,
            self.terminal_free,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Evaluates the sign conditions with the solver's discrete operators.
pub fn check_optimality_conditions(it: &BbIterate, terminal: &ScalarField) -> Result<OptimalityReport> {
    let tg = *it.rho.time();
    let g = *terminal.grid();
    if it.chi.frame(0).grid() != &g || it.q.len() != tg.steps {
        return Err(Error::GridMismatch);
    }
    let prob = BbProblem {
        grid: g,
        tg,
        rho0: it.rho.frame(0).values(),
        phi: terminal.values(),
    };
    let eps = SATURATION_EPS;
    let vol = g.cell_volume();
    let w = tg.dt() * vol;
    let mut out = OptimalityReport::default();
    for (k, r) in prob.hj_residual(it.chi.frames()).iter().enumerate() {
        let rho = it.rho.frame(k).values();
        for i in 0..g.len() {
            if rho[i] <= eps {
                out.empty += w * r[i].max(0.0);
            } else if rho[i] >= 1.0 - eps {
                out.saturated += w * (-r[i]).max(0.0);
            } else {
                out.free += w * r[i].abs();
            }
        }
        let gr = gradient(it.chi.frame(k + 1));
        for a in 0..g.dim() {
            let (q, gc) = (it.q[k].component(a), gr.component(a));
            for (f, lo, hi) in g.interior_faces(a) {
                let d = (q[f] - 0.5 * (rho[lo] + rho[hi]) * gc[f]).abs();
                out.momentum = out.momentum.max(d);
            }
        }
    }
    let rho_t = it.rho.last().values();
    let chi_t = it.chi.last().values();
    for i in 0..g.len() {
        let e = chi_t[i] - terminal.values()[i];
        if rho_t[i] <= eps {
            out.terminal_empty += vol * (-e).max(0.0);
        } else if rho_t[i] >= 1.0 - eps {
            out.terminal_saturated += vol * e.max(0.0);
        } else {
            out.terminal_free += vol * e.abs();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ChiReport {
    /// `max |(d_t chi + |grad chi|^2/2) - (-d_t p + |grad p|^2/2)|`.
    pub identity_gap: f64,
    /// Largest pointwise residual of the value equation for `phi`.
    pub value_residual: f64,
    /// `max |identity difference - value residual|`; rounding only.
    pub identity_defect: f64,
    /// `min (-d_t p + |grad p|^2/2)` over `{rho = 1}`; `None` if empty.
    pub saturated_min: Option<f64>,
    /// `int max(0, -s)` over `{rho = 1}`, `s = -d_t p + |grad p|^2/2`.
    pub saturated_negative: f64,
    /// `int |s|` over `{0 < rho < 1}`.
    pub free_abs: f64,
    /// `max |(chi_T - Phi) + p_T|`.
    pub terminal_identity: f64,
}

/// `chi = phi - p` and the pressure-side quantities of the optimality conditions.
///
/// All operators are pointwise: forward time differences, spatial terms at the
/// later node, `|grad f|^2` as the cell average of squared face gradients.
pub fn chi_from_mfg(sol: &MfgSolution) -> Result<(ScalarTrajectory, ChiReport)> {
    if sol.mode != MfgMode::Constrained {
        return Err(Error::param("mode", "chi needs a constrained solution"));
    }
    let tg = *sol.time();
    let dt = tg.dt();
    let g = *sol.terminal.grid();
    let chi = Trajectory::new(
        tg,
        sol.phi
            .frames()
            .iter()
            .zip(sol.p.frames())
            .map(|(f, p)| f.zip_map(p, |a, b| a - b))
            .collect(),
    )?;
    let quad = |a: &ScalarField, b: &ScalarField| face_product(&gradient(a), &gradient(b));
    let mut rep = ChiReport {
        identity_gap: 0.0,
        value_residual: 0.0,
        identity_defect: 0.0,
        saturated_min: None,
        saturated_negative: 0.0,
        free_abs: 0.0,
        terminal_identity: 0.0,
    };
    let eps = SATURATION_EPS;
    let w = dt * g.cell_volume();
    for k in 0..tg.steps {
        let (c0, c1) = (chi.frame(k), chi.frame(k + 1));
        let (p0, p1) = (sol.p.frame(k), sol.p.frame(k + 1));
        let (f0, f1) = (sol.phi.frame(k), sol.phi.frame(k + 1));
        let qc = quad(c1, c1);
        let qp = quad(p1, p1);
        let qf = quad(f1, f1);
        let qfp = quad(f1, p1);
        let rho = sol.rho.frame(k + 1).values();
        for i in 0..g.len() {
            let lhs = (c1.values()[i] - c0.values()[i]) / dt + 0.5 * qc.values()[i];
            let s = -(p1.values()[i] - p0.values()[i]) / dt + 0.5 * qp.values()[i];
            let rv = (f1.values()[i] - f0.values()[i]) / dt + 0.5 * qf.values()[i] - qfp.values()[i];
            rep.identity_gap = rep.identity_gap.max((lhs - s).abs());
            rep.value_residual = rep.value_residual.max(rv.abs());
            rep.identity_defect = rep.identity_defect.max((lhs - s - rv).abs());
            if rho[i] >= 1.0 - eps {
                rep.saturated_min = Some(rep.saturated_min.map_or(s, |m: f64| m.min(s)));
                rep.saturated_negative += w * (-s).max(0.0);
            } else if rho[i] > eps {
                rep.free_abs += w * s.abs();
            }
        }
    }
    let (ct, pt) = (chi.last(), sol.p.last());
    for i in 0..g.len() {
        let e = ct.values()[i] - sol.terminal.values()[i] + pt.values()[i];
        rep.terminal_identity = rep.terminal_identity.max(e.abs());
    }
    Ok((chi, rep))
}

/// Coefficient in front of `W2^2(rho_0, rho_T)` in the static reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticConvention {
    /// `T W2^2`, as printed.
    Literal,
    /// `W2^2 / (2T)`, the geodesic kinetic energy.
    Kinetic,
}

impl StaticConvention {
    pub fn coefficient(self, horizon: f64) -> f64 {
        match self {
            StaticConvention::Literal => horizon,
            StaticConvention::Kinetic => 1.0 / (2.0 * horizon),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StaticReduction {
    pub convention: StaticConvention,
    pub coefficient: f64,
    /// `c W2^2(rho_0, rho_T) - int Phi drho_T` at the minimizer.
    pub value: f64,
    pub w2_squared: f64,
    pub rho_t: DensityField,
    pub converged: bool,
}

/// Minimizes `c W2^2(rho_0, rho_T) - int Phi drho_T` over `rho_T <= 1` in
/// quantile coordinates (one constrained minimizing-movement step).
///
/// A density of mass `M` is handled on the domain scaled by `1/M`, where the
/// same cell values carry unit mass; `W2^2` scales by `M^3` and the potential
/// term by `M`.
pub fn static_reduction_oracle_1d(
    rho0: &DensityField,
    terminal: &ScalarField,
    horizon: f64,
    convention: StaticConvention,
) -> Result<StaticReduction> {
    let g = *rho0.grid();
    if g.dim() != 1 {
        return Err(Error::Dimension {
            required: 1,
            found: g.dim(),
        });
    }
    if terminal.grid() != &g {
        return Err(Error::GridMismatch);
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::param("horizon", "must be positive"));
    }
    if !rho0.in_k() {
        return Err(Error::Infeasible(format!("initial density {} exceeds 1", rho0.max())));
    }
    let mass = rho0.mass();
    if g.measure() < mass {
        return Err(Error::Infeasible(format!("domain length {} < mass {mass}", g.measure())));
    }
    let c = convention.coefficient(horizon);
    let ax = g.axis(0);
    let gs = Grid::line(ax.lower / mass, ax.upper / mass, ax.cells)?;
    let rs = DensityField::new(gs, rho0.values().to_vec())?;
    let ds = ScalarField::new(gs, terminal.values().iter().map(|v| -v).collect())?;
    let q0 = QuantileFunction::from_density(&rs, ax.cells)?;
    let out = jko_step_quantile(&q0, &ds, &JkoConfig::constrained(1.0 / (2.0 * c * mass * mass)))?;
    let w2_squared = mass.powi(3) * out.w2_squared;
    Ok(StaticReduction {
        convention,
        coefficient: c,
        value: c * w2_squared + mass * out.energy_after,
        w2_squared,
        rho_t: DensityField::new(g, out.quantile.to_density(&gs)?.into_values())?,
        converged: out.converged,
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Grid {
        Grid::line(0.0, 2.0, n).unwrap()
    }

    #[test]
    fn kinetic_energy_examples() {
        let g = line(10);
        let tg = TimeGrid::new(2.0, 4).unwrap();
        let ones = Trajectory::constant(tg, DensityField::new(g, vec![1.0; 10]).unwrap());
        assert_eq!(kinetic_energy(&ones, &vec![FaceField::zeros(g); 4]).unwrap(), 0.0);
        let q = FaceField::from_fn(g, |_| [0.5, 0.0]);
        let e = kinetic_energy(&ones, &vec![q.clone(); 4]).unwrap();
        // Nine interior faces of width 0.2 over a horizon of 2.
        assert!((e - 0.125 * 9.0 * 0.2 * 2.0).abs() < 1e-14);
        let mut vals = vec![1.0; 10];
        vals[3] = 0.0;
        vals[4] = 0.0;
        let holed = Trajectory::constant(tg, DensityField::new(g, vals).unwrap());
        assert!(kinetic_energy(&holed, &vec![q; 4]).unwrap().is_infinite());
    }

    #[test]
    fn prox_matches_brute_force() {
        for &(a, b, s) in &[(0.3, 0.7, 0.2), (-0.5, 0.1, 0.5), (1.4, -2.0, 0.05), (0.5, 0.0, 1.0)] {
            let (r, w) = prox_kinetic(a, b * b, s);
            let obj = |r: f64, q: f64| s * b_cell(r, q * q) + 0.5 * (r - a).powi(2) + 0.5 * (q - b).powi(2);
            let best = obj(r, w * b);
            for i in 0..=400 {
                let rr = i as f64 / 400.0;
                let qq = rr * b / (rr + s);
                assert!(obj(rr, qq) >= best - 1e-12, "a={a} b={b} s={s}");
            }
        }
    }

    #[test]
    fn copies_minimize_to_face_cost() {
        let g = line(6);
        let rho: Vec<f64> = (0..6).map(|i| 0.2 + 0.1 * i as f64).collect();
        let q = FaceField::from_fn(g, |x| [(3.0 * x[0]).sin(), 0.0]);
        // Optimal split puts copy weight in proportion to the cell density.
        let mut c = Copies::zeros(&g);
        for (f, lo, hi) in g.interior_faces(0) {
            let v = q.component(0)[f];
            let s = rho[lo] + rho[hi];
            c.hi[0][lo] = 2.0 * v * rho[lo] / s;
            c.lo[0][hi] = 2.0 * v * rho[hi] / s;
        }
        assert!(c.flux(&g).linf_distance(&q) < 1e-14);
        let split: f64 = (0..6).map(|i| b_cell(rho[i], 0.5 * c.norm_sq(i))).sum();
        assert!((split - face_energy(&rho, &q)).abs() < 1e-12);
    }

    #[test]
    fn constant_terminal_reaches_small_gap() {
        let g = line(20);
        let tg = TimeGrid::new(1.0, 10).unwrap();
        let rho0 = DensityField::from_fn(g, |x| if x[0] < 1.2 { 0.8 } else { 0.2 }).unwrap();
        let phi = ScalarField::constant(g, 0.7);
        let it = solve_bb_constrained(&rho0, &phi, &tg, &BbOptions::default()).unwrap();
        assert!(it.converged, "gap {} feas {}", it.gap, it.feasibility);
        assert!((it.primal + 0.7).abs() < 1e-5, "{}", it.primal);
        let rep = check_optimality_conditions(&it, &phi).unwrap();
        assert!(rep.max_condition() <= 1e-5, "{rep:?}");
    }

    #[test]
    fn static_reduction_constant_and_stay() {
        let g = line(40);
        let h = g.h(0);
        let rho0 = DensityField::from_fn(g, |x| if x[0] > 0.5 && x[0] < 1.5 { 1.0 } else { 0.0 }).unwrap();
        for conv in [StaticConvention::Literal, StaticConvention::Kinetic] {
            let s = static_reduction_oracle_1d(&rho0, &ScalarField::constant(g, 2.0), 1.0, conv).unwrap();
            assert!((s.value + 2.0).abs() < 1e-12);
            let phi = ScalarField::from_fn(g, |x| -(x[0] - 1.0).abs());
            let s = static_reduction_oracle_1d(&rho0, &phi, 1.0, conv).unwrap();
            assert!(s.rho_t.l1_distance(&rho0) < 1e-9, "{conv:?}");
            // Lumped quadrature of the potential is exact up to O(h^2).
            assert!((s.value - 0.25).abs() < h * h, "{}", s.value);
        }
    }

    #[test]
    fn static_reduction_rejects_short_domain() {
        let g = Grid::line(0.0, 0.5, 10).unwrap();
        let rho0 = DensityField::new(g, vec![1.0; 10]).unwrap();
        assert!(static_reduction_oracle_1d(&rho0, &ScalarField::zeros(g), 1.0, StaticConvention::Kinetic).is_ok());
        let g = Grid::line(0.0, 0.5, 10).unwrap();
        let rho0 = DensityField::uniform(g);
        assert!(static_reduction_oracle_1d(&rho0, &ScalarField::zeros(g), 1.0, StaticConvention::Kinetic).is_err());
    }
}
