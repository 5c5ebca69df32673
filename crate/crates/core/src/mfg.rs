//! Deterministic mean field games with soft (penalized) and hard
//! (density-constrained) congestion.
//!
//! ```text
//! penalized:    d_t phi + |grad phi|^2/2 = g(rho),              d_t rho + div(rho grad phi) = 0
//! constrained:  d_t phi + |grad phi|^2/2 - grad phi . grad p = 0,
//!               d_t rho + div(rho (grad phi - grad p)) = 0,    p >= 0, p (1 - rho) = 0
//! ```
//!
//! Both are solved by a damped fixed point on the density trajectory. The
//! stored solution is always one full consistent pass (backward value sweep,
//! then forward transport) from the last damped iterate, so the continuity
//! equation and `v = alpha - grad p` hold exactly whatever the convergence.

use serde::{Deserialize, Serialize};

use crate::best_response::{follow_payoff, AgentProblem, BestResponseOracle, DpOptions};
use crate::error::{Error, Result};
use crate::grid::{
    gradient, integrate, DensityField, DensityTrajectory, FaceField, FaceTrajectory, ScalarField, ScalarTrajectory,
    TimeGrid, Trajectory,
};
use crate::hjb::{backward_step, hjb_backward, hjb_residual, HjbProblem};
use crate::projection::{cone_violation, project_velocity_with, ProjectionOptions};
use crate::transport::{advect_step, weak_residual};

/// Relative blow-up threshold for the value sweeps.
const BLOW_UP_FACTOR: f64 = 1e6;

/// `g(rho) = rho^(m-1)` with primitive `G(rho) = rho^m / m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionPenalty {
    m: f64,
}

impl CongestionPenalty {
    pub fn new(m: f64) -> Result<Self> {
        if !(m.is_finite() && m >= 2.0) {
            return Err(Error::param("m", format!("need m >= 2, got {m}")));
        }
        let pen = CongestionPenalty { m };
        let d = 1e-4;
        for r in [0.1, 0.5, 1.0, 1.5] {
            let diff = (pen.primitive(r + d) - pen.primitive(r - d)) / (2.0 * d);
            if (diff - pen.g(r)).abs() > 1e-6 * pen.g(r).max(1.0) {
                return Err(Error::param("m", "g is not the derivative of G"));
            }
        }
        Ok(pen)
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn g(&self, rho: f64) -> f64 {
        rho.powf(self.m - 1.0)
    }

    pub fn primitive(&self, rho: f64) -> f64 {
        rho.powf(self.m) / self.m
    }

    pub fn source(&self, rho: &DensityField) -> ScalarField {
        rho.as_scalar().map(|r| self.g(r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    /// `delta_k = 1 / (k + 1)`, `k = 0, 1, ...`
    FictitiousPlay,
    Fixed(f64),
}

impl Damping {
    fn weight(&self, k: usize) -> f64 {
        match *self {
            Damping::FictitiousPlay => 1.0 / (k as f64 + 1.0),
            Damping::Fixed(w) => w,
        }
    }
}

/// Which pressure enters the drift of the value sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureCoupling {
    /// Project `grad phi_{k+1}` onto `adm(rho_{k+1})` of the current density
    /// iterate during the sweep and use that pressure for the step to `t_k`.
    InSweep,
    /// Use the pressure of the previous forward sweep.
    Lagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfgOptions {
    pub max_iter: usize,
    /// Stop when `max_k |rho_new - rho|_inf <= tol`.
    pub tol: f64,
    pub damping: Damping,
    pub coupling: PressureCoupling,
    pub projection: ProjectionOptions,
}

impl Default for MfgOptions {
    fn default() -> Self {
        MfgOptions {
            max_iter: 200,
            tol: 1e-8,
            damping: Damping::FictitiousPlay,
            coupling: PressureCoupling::InSweep,
            projection: ProjectionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MfgMode {
    Penalized { m: f64 },
    Constrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub increment: f64,
}

/// Violations of each equilibrium condition; all nonnegative except `min_p`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Scheme replay residual of the value equation with the stored `rho`, `p`.
    pub hjb: f64,
    /// `max_k |rho_{k+1} - advect(rho_k, v_k)|_1 / dt`.
    pub continuity: f64,
    /// Largest weak-form defect over a few smooth test functions.
    pub weak_continuity: f64,
    /// `sum_k dt int |p (1 - rho)|` (trapezoid in time).
    pub complementarity: f64,
    pub min_p: f64,
    /// `max_k |<grad p_k, v_k>|`.
    pub orthogonality: f64,
    /// `max_k |alpha_k - grad phi_k|_inf`.
    pub effort_consistency: f64,
    /// `max_k |v_k - (alpha_k - grad p_k)|_inf`.
    pub velocity_consistency: f64,
    /// `max_k max(0, -min_S div v_k)`.
    pub cone_violation: f64,
    pub mass_drift: f64,
    pub max_density: f64,
    /// Fixed-point increment of the last iterate.
    pub increment: f64,
    /// Best-response gain over the payoff scale, when it was computed.
    pub exploitability: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub mode: MfgMode,
    pub terminal: ScalarField,
    pub rho: DensityTrajectory,
    pub phi: ScalarTrajectory,
    pub p: ScalarTrajectory,
    pub alpha: FaceTrajectory,
    pub v: FaceTrajectory,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub report: ResidualReport,
}

impl MfgSolution {
    pub fn time(&self) -> &TimeGrid {
        self.rho.time()
    }
}

struct Pass {
    phi: ScalarTrajectory,
    alpha: FaceTrajectory,
    rho: DensityTrajectory,
    p: ScalarTrajectory,
    v: FaceTrajectory,
}

fn check_inputs(rho0: &DensityField, terminal: &ScalarField) -> Result<()> {
    if rho0.grid() != terminal.grid() {
        return Err(Error::GridMismatch);
    }
    if (rho0.mass() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidDensity(format!("mass {} is not 1", rho0.mass())));
    }
    Ok(())
}

fn sup_increment(a: &DensityTrajectory, b: &DensityTrajectory) -> f64 {
    a.frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| {
            x.values()
                .iter()
                .zip(y.values())
                .fold(0.0, |m: f64, (u, w)| m.max((u - w).abs()))
        })
        .fold(0.0, f64::max)
}

fn sup_scalar_increment(a: &ScalarTrajectory, b: &ScalarTrajectory) -> f64 {
    a.frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| x.linf_distance(y))
        .fold(0.0, f64::max)
}

fn blend_densities(a: &DensityTrajectory, b: &DensityTrajectory, w: f64) -> DensityTrajectory {
    let frames = a.frames().iter().zip(b.frames()).map(|(x, y)| x.blend(y, w)).collect();
    Trajectory::new(*a.time(), frames).expect("same time grid")
}

fn blend_scalars(a: &ScalarTrajectory, b: &ScalarTrajectory, w: f64) -> ScalarTrajectory {
    let frames = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| x.zip_map(y, |u, v| (1.0 - w) * u + w * v))
        .collect();
    Trajectory::new(*a.time(), frames).expect("same time grid")
}

fn forward_transport(rho0: &DensityField, v: &[FaceField], dt: f64) -> Result<Vec<DensityField>> {
    let mut rho = Vec::with_capacity(v.len());
    rho.push(rho0.clone());
    for vk in &v[..v.len() - 1] {
        let (next, _) = advect_step(rho.last().expect("nonempty"), vk, dt)?;
        rho.push(next);
    }
    Ok(rho)
}

fn penalized_pass(
    rho0: &DensityField,
    terminal: &ScalarField,
    penalty: &CongestionPenalty,
    rho: &DensityTrajectory,
) -> Result<Pass> {
    let tg = *rho.time();
    let prob = HjbProblem::sup(terminal.clone()).with_source(rho.map(|r| penalty.source(r)));
    let phi = hjb_backward(&prob, &tg)?;
    let alpha = phi.map(gradient);
    let rho_new = Trajectory::new(tg, forward_transport(rho0, alpha.frames(), tg.dt())?)?;
    let g = *rho0.grid();
    Ok(Pass {
        phi,
        v: alpha.clone(),
        alpha,
        rho: rho_new,
        p: Trajectory::constant(tg, ScalarField::zeros(g)),
    })
}

fn constrained_pass(
    rho0: &DensityField,
    terminal: &ScalarField,
    rho: &DensityTrajectory,
    p_prev: &ScalarTrajectory,
    opts: &MfgOptions,
) -> Result<Pass> {
    let tg = *rho.time();
    let dt = tg.dt();
    let limit = BLOW_UP_FACTOR * terminal.max_abs().max(1.0);
    let project = |rho: &DensityField, u: &FaceField, warm: &ScalarField, t: f64| {
        let r = project_velocity_with(rho, u, &opts.projection, Some(warm))?;
        if !r.converged {
            return Err(Error::Infeasible(format!("pressure projection did not converge at t = {t}")));
        }
        Ok(r)
    };

    let mut phi = vec![terminal.clone(); tg.nodes()];
    for k in (0..tg.steps).rev() {
        let drift = match opts.coupling {
            PressureCoupling::InSweep => {
                let u = gradient(&phi[k + 1]);
                gradient(&project(rho.frame(k + 1), &u, p_prev.frame(k + 1), tg.t(k + 1))?.p)
            }
            PressureCoupling::Lagged => gradient(p_prev.frame(k + 1)),
        };
        let next = backward_step(&phi[k + 1], Some(&drift), None, dt);
        let magnitude = next.max_abs();
        if !magnitude.is_finite() || magnitude > limit {
            return Err(Error::BlowUp {
                time: tg.t(k),
                magnitude,
                limit,
            });
        }
        phi[k] = next;
    }

    let mut alpha = Vec::with_capacity(tg.nodes());
    let mut rho_new = Vec::with_capacity(tg.nodes());
    let mut p = Vec::with_capacity(tg.nodes());
    let mut v = Vec::with_capacity(tg.nodes());
    rho_new.push(rho0.clone());
    for k in 0..tg.nodes() {
        let a = gradient(&phi[k]);
        let r = project(&rho_new[k], &a, p_prev.frame(k), tg.t(k))?;
        if k < tg.steps {
            let (next, _) = advect_step(&rho_new[k], &r.v, dt)?;
            rho_new.push(next);
        }
        alpha.push(a);
        p.push(r.p);
        v.push(r.v);
    }
    Ok(Pass {
        phi: Trajectory::new(tg, phi)?,
        alpha: Trajectory::new(tg, alpha)?,
        rho: Trajectory::new(tg, rho_new)?,
        p: Trajectory::new(tg, p)?,
        v: Trajectory::new(tg, v)?,
    })
}

fn assemble(mode: MfgMode, terminal: &ScalarField, pass: Pass, history: Vec<IterationRecord>, converged: bool) -> Result<MfgSolution> {
    let mut sol = MfgSolution {
        mode,
        terminal: terminal.clone(),
        rho: pass.rho,
        phi: pass.phi,
        p: pass.p,
        alpha: pass.alpha,
        v: pass.v,
        history,
        converged,
        report: ResidualReport::default(),
    };
    sol.report = equilibrium_residual(&sol)?;
    Ok(sol)
}

/// Damped fixed point for the penalized system.
pub fn solve_mfg_penalized(
    rho0: &DensityField,
    terminal: &ScalarField,
    penalty: CongestionPenalty,
    tg: &TimeGrid,
    opts: &MfgOptions,
) -> Result<MfgSolution> {
    check_inputs(rho0, terminal)?;
    let mut rho = Trajectory::constant(*tg, rho0.clone());
    let mut history = Vec::new();
    for k in 0..opts.max_iter {
        let pass = penalized_pass(rho0, terminal, &penalty, &rho)?;
        let increment = sup_increment(&rho, &pass.rho);
        history.push(IterationRecord {
            iteration: k + 1,
            increment,
        });
        if increment <= opts.tol {
            return assemble(MfgMode::Penalized { m: penalty.m() }, terminal, pass, history, true);
        }
        rho = blend_densities(&rho, &pass.rho, opts.damping.weight(k));
    }
    let pass = penalized_pass(rho0, terminal, &penalty, &rho)?;
    assemble(MfgMode::Penalized { m: penalty.m() }, terminal, pass, history, false)
}

/// Damped fixed point for the density-constrained system.
pub fn solve_mfg_constrained(
    rho0: &DensityField,
    terminal: &ScalarField,
    tg: &TimeGrid,
    opts: &MfgOptions,
) -> Result<MfgSolution> {
    check_inputs(rho0, terminal)?;
    if !rho0.in_k() {
        return Err(Error::Infeasible(format!("initial density {} exceeds 1", rho0.max())));
    }
    let g = *rho0.grid();
    let mut rho = Trajectory::constant(*tg, rho0.clone());
    let mut p = Trajectory::constant(*tg, ScalarField::zeros(g));
    let mut history = Vec::new();
    for k in 0..opts.max_iter {
        let pass = constrained_pass(rho0, terminal, &rho, &p, opts)?;
        let increment = sup_increment(&rho, &pass.rho).max(sup_scalar_increment(&p, &pass.p));
        history.push(IterationRecord {
            iteration: k + 1,
            increment,
        });
        if increment <= opts.tol {
            return assemble(MfgMode::Constrained, terminal, pass, history, true);
        }
        let w = opts.damping.weight(k);
        rho = blend_densities(&rho, &pass.rho, w);
        p = blend_scalars(&p, &pass.p, w);
    }
    let pass = constrained_pass(rho0, terminal, &rho, &p, opts)?;
    assemble(MfgMode::Constrained, terminal, pass, history, false)
}

/// Value problem whose scheme produced `phi` for the stored fields.
fn value_problem(sol: &MfgSolution) -> Result<HjbProblem> {
    let prob = HjbProblem::sup(sol.terminal.clone());
    Ok(match sol.mode {
        MfgMode::Penalized { m } => {
            let pen = CongestionPenalty::new(m)?;
            prob.with_source(sol.rho.map(|r| pen.source(r)))
        }
        MfgMode::Constrained => prob.with_drift(sol.p.map(gradient)),
    })
}

fn test_functions(g: &crate::grid::Grid) -> Vec<ScalarField> {
    let mut out = Vec::new();
    for a in 0..g.dim() {
        let ax = *g.axis(a);
        out.push(ScalarField::from_fn(*g, move |x| (x[a] - ax.lower) / ax.length()));
        out.push(ScalarField::from_fn(*g, move |x| {
            (std::f64::consts::PI * (x[a] - ax.lower) / ax.length()).cos()
        }));
    }
    out
}

/// Recomputes every report entry from the stored trajectories. The increment
/// comes from the iteration history and exploitability is carried over.
pub fn equilibrium_residual(sol: &MfgSolution) -> Result<ResidualReport> {
    let tg = *sol.time();
    let dt = tg.dt();
    let g = *sol.terminal.grid();
    let hjb = hjb_residual(&sol.phi, &value_problem(sol)?)?;

    let mut continuity: f64 = 0.0;
    for k in 0..tg.steps {
        let (next, _) = advect_step(sol.rho.frame(k), sol.v.frame(k), dt)?;
        continuity = continuity.max(next.l1_distance(sol.rho.frame(k + 1)) / dt);
    }
    let mut weak_continuity: f64 = 0.0;
    for psi in test_functions(&g) {
        weak_continuity = weak_continuity.max(weak_residual(&sol.rho, &sol.v, &psi)?);
    }

    let mut complementarity = 0.0;
    let mut min_p = f64::INFINITY;
    let mut orthogonality: f64 = 0.0;
    let mut effort: f64 = 0.0;
    let mut velocity: f64 = 0.0;
    let mut cone: f64 = 0.0;
    let mut max_density: f64 = 0.0;
    let mass0 = sol.rho.frame(0).mass();
    let mut mass_drift: f64 = 0.0;
    for k in 0..tg.nodes() {
        let rho = sol.rho.frame(k);
        let p = sol.p.frame(k);
        let gp = gradient(p);
        let weight = if k == 0 || k == tg.steps { 0.5 * dt } else { dt };
        let slack = p.zip_map(&rho.as_scalar(), |pi, ri| (pi * (1.0 - ri)).abs());
        complementarity += weight * integrate(&slack, None)?;
        min_p = min_p.min(p.min());
        orthogonality = orthogonality.max(gp.dot(sol.v.frame(k)).abs());
        effort = effort.max(sol.alpha.frame(k).linf_distance(&gradient(sol.phi.frame(k))));
        velocity = velocity.max(sol.v.frame(k).linf_distance(&sol.alpha.frame(k).sub(&gp)));
        if sol.mode == MfgMode::Constrained {
            cone = cone.max(cone_violation(rho, sol.v.frame(k))?);
        }
        max_density = max_density.max(rho.max());
        mass_drift = mass_drift.max((rho.mass() - mass0).abs());
    }
    Ok(ResidualReport {
        hjb,
        continuity,
        weak_continuity,
        complementarity,
        min_p,
        orthogonality,
        effort_consistency: effort,
        velocity_consistency: velocity,
        cone_violation: cone,
        mass_drift,
        max_density,
        increment: sol.history.last().map_or(0.0, |r| r.increment),
        exploitability: sol.report.exploitability,
    })
}

/// Agent problem faced by a single player against the stored fields.
pub fn agent_problem(sol: &MfgSolution) -> Result<AgentProblem> {
    let prob = AgentProblem::free(sol.terminal.clone(), *sol.time());
    Ok(match sol.mode {
        MfgMode::Penalized { m } => {
            let pen = CongestionPenalty::new(m)?;
            prob.with_source(sol.rho.map(|r| pen.source(r)))
        }
        MfgMode::Constrained => prob.with_drift(sol.p.map(gradient)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Exploitability {
    /// `max_x0 max(0, best response - follow)`.
    pub value: f64,
    /// `max Phi - min Phi`, or 1 for a constant `Phi`.
    pub scale: f64,
    pub worst_start: [f64; 2],
    pub starts: usize,
    pub bound_active: bool,
}

impl Exploitability {
    pub fn relative(&self) -> f64 {
        self.value / self.scale
    }
}

/// Starting cells spread over the support of `rho_0`.
pub fn sample_starts(rho0: &DensityField, count: usize) -> Vec<[f64; 2]> {
    let g = *rho0.grid();
    let cut = 1e-3 * rho0.max();
    let support: Vec<usize> = (0..g.len()).filter(|&i| rho0.values()[i] > cut).collect();
    if support.is_empty() || count == 0 {
        return Vec::new();
    }
    let take = count.min(support.len());
    (0..take)
        .map(|j| g.center(support[(j * support.len() + support.len() / 2) / take]))
        .collect()
}

/// Largest gain of a single agent deviating from the feedback `alpha` at `t = 0`.
pub fn exploitability(sol: &MfgSolution, dp: &DpOptions, starts: usize) -> Result<Exploitability> {
    let problem = agent_problem(sol)?;
    let oracle = BestResponseOracle::new(problem.clone(), dp)?;
    let span = sol.terminal.max() - sol.terminal.min();
    let mut out = Exploitability {
        value: 0.0,
        scale: if span > 0.0 { span } else { 1.0 },
        worst_start: [0.0; 2],
        starts: 0,
        bound_active: false,
    };
    for x0 in sample_starts(sol.rho.frame(0), starts) {
        let br = oracle.best_response(x0, 0)?;
        let follow = follow_payoff(&problem, x0, 0, &sol.alpha)?;
        out.bound_active |= br.bound_active;
        out.starts += 1;
        let gain = (br.payoff - follow).max(0.0);
        if gain > out.value {
            out.value = gain;
            out.worst_start = x0;
        }
    }
    Ok(out)
}

/// Solves `-d_t p + |grad p|^2/2 - rho^(m-1) = 0`, `p(T) = 0`.
pub fn fictitious_pressure(rho: &DensityTrajectory, m: f64) -> Result<ScalarTrajectory> {
    let pen = CongestionPenalty::new(m)?;
    let g = *rho.frame(0).grid();
    let prob = HjbProblem::inf(ScalarField::zeros(g)).with_source(rho.map(|r| pen.source(r)));
    hjb_backward(&prob, rho.time())
}

/// Cell average of face products, `sum_a (a_lo b_lo + a_hi b_hi) / 2`.
pub fn face_product(a: &FaceField, b: &FaceField) -> ScalarField {
    let g = *a.grid();
    let mut out = vec![0.0; g.len()];
    for ax in 0..g.dim() {
        let (ca, cb) = (a.component(ax), b.component(ax));
        for (idx, slot) in out.iter_mut().enumerate() {
            let (lo, hi) = g.cell_faces(ax, idx);
            *slot += 0.5 * (ca[lo] * cb[lo] + ca[hi] * cb[hi]);
        }
    }
    ScalarField::new(g, out).expect("cell-sized")
}

/// Pointwise residuals on `k = 0..N-1` with time differences `(f_{k+1} - f_k)/dt`
/// and all spatial terms at `k + 1`.
fn pointwise(
    tg: &TimeGrid,
    mut f: impl FnMut(usize) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    (0..tg.steps).map(&mut f).collect()
}

#[derive(Debug, Clone)]
pub struct FictitiousDecomposition {
    pub p_hat: ScalarTrajectory,
    pub phi_hat: ScalarTrajectory,
    /// `max |d_t phi^ + |grad phi^|^2/2 - grad phi^ . grad p^|`.
    pub transformed_residual: f64,
    /// Pointwise residual of the penalized value equation for `phi`.
    pub value_residual: f64,
    /// Pointwise residual of the fictitious-pressure equation for `p^`.
    pub pressure_residual: f64,
    /// `max |T - (R_phi - R_p)|`; the transformed residual is the difference
    /// of the two others by bilinearity of the discrete operators.
    pub identity_defect: f64,
}

/// Builds `p^` from a penalized solution and checks that `phi^ = phi + p^`
/// satisfies the pressure-drifted value equation.
pub fn fictitious_decomposition(sol: &MfgSolution) -> Result<FictitiousDecomposition> {
    let MfgMode::Penalized { m } = sol.mode else {
        return Err(Error::param("mode", "fictitious pressure needs a penalized solution"));
    };
    let pen = CongestionPenalty::new(m)?;
    let tg = *sol.time();
    let dt = tg.dt();
    let p_hat = fictitious_pressure(&sol.rho, m)?;
    let phi_hat = Trajectory::new(
        tg,
        sol.phi
            .frames()
            .iter()
            .zip(p_hat.frames())
            .map(|(a, b)| a.zip_map(b, |x, y| x + y))
            .collect(),
    )?;
    let quad = |f: &ScalarField, h: &ScalarField| face_product(&gradient(f), &gradient(h));
    let r_phi = pointwise(&tg, |k| {
        let (f0, f1) = (sol.phi.frame(k), sol.phi.frame(k + 1));
        let q = quad(f1, f1);
        let c = pen.source(sol.rho.frame(k + 1));
        (0..f0.values().len())
            .map(|i| (f1.values()[i] - f0.values()[i]) / dt + 0.5 * q.values()[i] - c.values()[i])
            .collect()
    });
    let r_p = pointwise(&tg, |k| {
        let (f0, f1) = (p_hat.frame(k), p_hat.frame(k + 1));
        let q = quad(f1, f1);
        let c = pen.source(sol.rho.frame(k + 1));
        (0..f0.values().len())
            .map(|i| -(f1.values()[i] - f0.values()[i]) / dt + 0.5 * q.values()[i] - c.values()[i])
            .collect()
    });
    let r_t = pointwise(&tg, |k| {
        let (f0, f1) = (phi_hat.frame(k), phi_hat.frame(k + 1));
        let qq = quad(f1, f1);
        let qp = quad(f1, p_hat.frame(k + 1));
        (0..f0.values().len())
            .map(|i| (f1.values()[i] - f0.values()[i]) / dt + 0.5 * qq.values()[i] - qp.values()[i])
            .collect()
    });
    let sup = |r: &[Vec<f64>]| r.iter().flatten().fold(0.0, |m: f64, v| m.max(v.abs()));
    let mut defect: f64 = 0.0;
    for k in 0..tg.steps {
        for i in 0..r_t[k].len() {
            defect = defect.max((r_t[k][i] - (r_phi[k][i] - r_p[k][i])).abs());
        }
    }
    Ok(FictitiousDecomposition {
        transformed_residual: sup(&r_t),
        value_residual: sup(&r_phi),
        pressure_residual: sup(&r_p),
        identity_defect: defect,
        p_hat,
        phi_hat,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct UniquenessSeries {
    pub t: Vec<f64>,
    /// `I(t) = int (phi1 - phi2) d(rho1 - rho2)`.
    pub value: Vec<f64>,
    /// Forward differences of `I`, one per step.
    pub rate: Vec<f64>,
}

/// Sign-condition diagnostic comparing two solutions; asserts nothing.
pub fn uniqueness_monitor(a: &MfgSolution, b: &MfgSolution) -> Result<UniquenessSeries> {
    if a.terminal.grid() != b.terminal.grid() {
        return Err(Error::GridMismatch);
    }
    if a.time() != b.time() {
        return Err(Error::TimeGridMismatch {
            expected: a.time().nodes(),
            found: b.time().nodes(),
        });
    }
    let tg = *a.time();
    let mut value = Vec::with_capacity(tg.nodes());
    for k in 0..tg.nodes() {
        let dphi = a.phi.frame(k).zip_map(b.phi.frame(k), |x, y| x - y);
        let drho = a.rho.frame(k).as_scalar().zip_map(&b.rho.frame(k).as_scalar(), |x, y| x - y);
        value.push(crate::grid::cell_dot(&dphi, &drho));
    }
    let rate = value.windows(2).map(|w| (w[1] - w[0]) / tg.dt()).collect();
    Ok(UniquenessSeries {
        t: (0..tg.nodes()).map(|k| tg.t(k)).collect(),
        value,
        rate,
    })
}
