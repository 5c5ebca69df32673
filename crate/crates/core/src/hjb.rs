//! Backward monotone scheme for Hamilton–Jacobi equations
//!
//! ```text
//! sup-type:  d_t phi + |grad phi|^2 / 2 - grad phi . b - c = 0,   phi(T) = Phi
//! inf-type: -d_t p   + |grad p|^2 / 2   + grad p . b   - c = 0,   p(T)   = Phi
//! ```
//!
//! The sup-type equation is the dynamic programming equation of
//! `sup -int (|a|^2/2 + c) ds + Phi(y_T)` with `y' = a - b`; the inf-type one
//! is that of `inf int (|a|^2/2 + c) ds + Phi(y_T)` with the same dynamics,
//! so `inf(Phi, b, c) = -sup(-Phi, b, c)`.
//!
//! Each explicit backward step uses a local Lax–Friedrichs flux for the
//! kinetic part, upwinding in the drift direction for `-grad phi . b`, and
//! the state-constrained one-sided Hamiltonian on boundary cells.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{gradient, FaceField, FaceTrajectory, ScalarField, ScalarTrajectory, TimeGrid, Trajectory};

/// Courant bound used for the monotonicity substeps.
const HJB_CFL: f64 = 0.9;
/// Blow-up threshold relative to the data scale.
const BLOW_UP_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Orientation {
    /// Value function of a maximization (payoff) problem.
    Sup,
    /// Cost function of a minimization problem.
    Inf,
}

/// Terminal data, optional drift and running-source trajectories.
#[derive(Debug, Clone)]
pub struct HjbProblem {
    pub terminal: ScalarField,
    pub drift: Option<FaceTrajectory>,
    pub source: Option<ScalarTrajectory>,
    pub orientation: Orientation,
}

impl HjbProblem {
    pub fn sup(terminal: ScalarField) -> Self {
        HjbProblem {
            terminal,
            drift: None,
            source: None,
            orientation: Orientation::Sup,
        }
    }

    pub fn inf(terminal: ScalarField) -> Self {
        HjbProblem {
            orientation: Orientation::Inf,
            ..Self::sup(terminal)
        }
    }

    pub fn with_drift(mut self, drift: FaceTrajectory) -> Self {
        self.drift = Some(drift);
        self
    }

    pub fn with_source(mut self, source: ScalarTrajectory) -> Self {
        self.source = Some(source);
        self
    }

    fn validate(&self, tg: &TimeGrid) -> Result<()> {
        if let Some(b) = &self.drift {
            if b.frames().len() != tg.nodes() {
                return Err(Error::TimeGridMismatch {
                    expected: tg.nodes(),
                    found: b.frames().len(),
                });
            }
            if b.frame(0).grid() != self.terminal.grid() {
                return Err(Error::GridMismatch);
            }
        }
        if let Some(c) = &self.source {
            if c.frames().len() != tg.nodes() {
                return Err(Error::TimeGridMismatch {
                    expected: tg.nodes(),
                    found: c.frames().len(),
                });
            }
            if c.frame(0).grid() != self.terminal.grid() {
                return Err(Error::GridMismatch);
            }
        }
        Ok(())
    }

    fn drift_at(&self, k: usize) -> Option<&FaceField> {
        self.drift.as_ref().map(|b| b.frame(k))
    }

    fn source_at(&self, k: usize) -> Option<&ScalarField> {
        self.source.as_ref().map(|c| c.frame(k))
    }
}

/// Numerical Hamiltonian `H` with `phi(t - dt) = phi(t) + dt * H`, and the
/// largest stable rate `sum_a (theta_a + |b_a|) / h_a`.
fn numerical_hamiltonian(phi: &ScalarField, drift: Option<&FaceField>, source: Option<&ScalarField>) -> (Vec<f64>, f64) {
    let g = *phi.grid();
    let grad = gradient(phi);
    let mut ham = vec![0.0; g.len()];
    let mut rate = 0.0;
    for a in 0..g.dim() {
        let d = grad.component(a);
        let b = drift.map(|b| b.component(a));
        let h = g.h(a);
        let mut axis_rate: f64 = 0.0;
        for (idx, slot) in ham.iter_mut().enumerate() {
            let (lo, hi) = g.cell_faces(a, idx);
            let lower_wall = g.is_boundary_face(a, lo);
            let upper_wall = g.is_boundary_face(a, hi);
            let (pm, pp) = (d[lo], d[hi]);
            let (kin, theta) = match (lower_wall, upper_wall) {
                // Only inward controls are admissible at a wall.
                (true, false) => {
                    let q = pp.max(0.0);
                    (0.5 * q * q, q)
                }
                (false, true) => {
                    let q = pm.min(0.0);
                    (0.5 * q * q, -q)
                }
                _ => {
                    let theta = pm.abs().max(pp.abs());
                    let mid = 0.5 * (pm + pp);
                    (0.5 * mid * mid + 0.5 * theta * (pp - pm), theta)
                }
            };
            let (drift_term, drift_speed) = match b {
                Some(b) => {
                    let bl = b[lo].max(0.0);
                    let bu = b[hi].min(0.0);
                    (-(bl * pm + bu * pp), bl - bu)
                }
                None => (0.0, 0.0),
            };
            *slot += kin + drift_term;
            axis_rate = axis_rate.max((theta + drift_speed) / h);
        }
        rate += axis_rate;
    }
    if let Some(c) = source {
        for (slot, cv) in ham.iter_mut().zip(c.values()) {
            *slot -= cv;
        }
    }
    (ham, rate)
}

/// One backward step of the sup-type scheme from `phi(t)` to `phi(t - dt)`,
/// with drift and source frozen at time `t`. Substeps internally so that
/// each explicit update is monotone.
pub fn backward_step(
    phi_next: &ScalarField,
    drift: Option<&FaceField>,
    source: Option<&ScalarField>,
    dt: f64,
) -> ScalarField {
    let mut cur = phi_next.clone();
    let mut remaining = dt;
    while remaining > 0.0 {
        let (ham, rate) = numerical_hamiltonian(&cur, drift, source);
        let max_step = if rate > 0.0 { HJB_CFL / rate } else { f64::INFINITY };
        // Avoid a sliver substep from rounding.
        let step = if max_step >= remaining * (1.0 - 1e-12) {
            remaining
        } else {
            max_step
        };
        for (v, hv) in cur.values_mut().iter_mut().zip(&ham) {
            *v += step * hv;
        }
        remaining -= step;
    }
    cur
}

/// Inf-type step: the sup-type step applied to the negated field.
fn backward_step_oriented(
    next: &ScalarField,
    drift: Option<&FaceField>,
    source: Option<&ScalarField>,
    dt: f64,
    orientation: Orientation,
) -> ScalarField {
    match orientation {
        Orientation::Sup => backward_step(next, drift, source, dt),
        Orientation::Inf => backward_step(&next.map(|v| -v), drift, source, dt).map(|v| -v),
    }
}

/// Solves the problem backward on `tg`; frame `k` is the solution at `t_k`.
///
/// The step from `t_{k+1}` to `t_k` uses drift and source frames `k + 1`.
pub fn hjb_backward(prob: &HjbProblem, tg: &TimeGrid) -> Result<ScalarTrajectory> {
    prob.validate(tg)?;
    let scale = data_scale(prob, tg);
    let limit = BLOW_UP_FACTOR * scale;
    let mut frames = vec![prob.terminal.clone(); tg.nodes()];
    for k in (0..tg.steps).rev() {
        let next = backward_step_oriented(
            &frames[k + 1],
            prob.drift_at(k + 1),
            prob.source_at(k + 1),
            tg.dt(),
            prob.orientation,
        );
        let magnitude = next.max_abs();
        if !magnitude.is_finite() || magnitude > limit {
            return Err(Error::BlowUp {
                time: tg.t(k),
                magnitude,
                limit,
            });
        }
        frames[k] = next;
    }
    Trajectory::new(*tg, frames)
}

fn data_scale(prob: &HjbProblem, tg: &TimeGrid) -> f64 {
    let mut s = prob.terminal.max_abs().max(1.0);
    if let Some(c) = &prob.source {
        let cmax = c.frames().iter().map(ScalarField::max_abs).fold(0.0, f64::max);
        s = s.max(cmax * tg.horizon);
    }
    if let Some(b) = &prob.drift {
        let bmax = b.frames().iter().map(FaceField::max_abs).fold(0.0, f64::max);
        s = s.max(bmax * bmax * tg.horizon);
    }
    s
}

/// Residual of the discrete equation:
/// `max_k |(phi_k - S(phi_{k+1})) / dt|`, where `S` is the scheme's own
/// backward step. It vanishes (to rounding) on output of [`hjb_backward`] and
/// measures the defect of any other trajectory.
pub fn hjb_residual(phi: &ScalarTrajectory, prob: &HjbProblem) -> Result<f64> {
    let tg = *phi.time();
    prob.validate(&tg)?;
    let dt = tg.dt();
    let mut worst: f64 = 0.0;
    for k in 0..tg.steps {
        let stepped = backward_step_oriented(
            phi.frame(k + 1),
            prob.drift_at(k + 1),
            prob.source_at(k + 1),
            dt,
            prob.orientation,
        );
        worst = worst.max(phi.frame(k).linf_distance(&stepped) / dt);
    }
    Ok(worst)
}

/// Exact discrete Hopf–Lax value `max_y [Phi(y) - |x - y|^2 / (2 (T - t))]`
/// over grid nodes `y`; returns `Phi` at `t = T`.
pub fn hopf_lax(terminal: &ScalarField, t: f64, horizon: f64) -> Result<ScalarField> {
    if t > horizon {
        return Err(Error::param("t", format!("{t} exceeds horizon {horizon}")));
    }
    let s = horizon - t;
    if s <= 0.0 {
        return Ok(terminal.clone());
    }
    let g = *terminal.grid();
    let centers: Vec<[f64; 2]> = g.centers().collect();
    let vals = terminal.values();
    let out = centers
        .iter()
        .map(|x| {
            centers
                .iter()
                .zip(vals)
                .map(|(y, &phi)| {
                    let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
                    phi - d2 / (2.0 * s)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    ScalarField::new(g, out)
}

/// Optimal effort `grad phi_t` at every node.
pub fn optimal_feedback(phi: &ScalarTrajectory) -> FaceTrajectory {
    phi.map(gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constants_are_exact() {
        let g = Grid::rect((0.0, 1.0), (0.0, 1.0), 8, 6).unwrap();
        let tg = TimeGrid::new(1.0, 10).unwrap();
        let phi = hjb_backward(&HjbProblem::sup(ScalarField::constant(g, 2.5)), &tg).unwrap();
        for f in phi.frames() {
            assert!(f.values().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn linear_terminal_data_follows_closed_form_away_from_walls() {
        let a = 0.5;
        let g = Grid::line(0.0, 10.0, 100).unwrap();
        let tg = TimeGrid::new(0.2, 2).unwrap();
        let phi = hjb_backward(&HjbProblem::sup(ScalarField::from_fn(g, |x| a * x[0])), &tg).unwrap();
        for k in 0..tg.nodes() {
            let s = tg.horizon - tg.t(k);
            let f = phi.frame(k);
            for i in 0..90 {
                let x = g.center(i)[0];
                assert!((f.values()[i] - (a * x + a * a * s / 2.0)).abs() < 1e-12);
            }
        }
        let alpha = optimal_feedback(&phi);
        for (face, _, _) in g.interior_faces(0).take(80) {
            assert!((alpha.frame(0).component(0)[face] - a).abs() < 1e-12);
        }
    }

    #[test]
    fn inf_type_constant_source_gives_remaining_time() {
        let g = Grid::line(0.0, 2.0, 20).unwrap();
        let tg = TimeGrid::new(1.0, 8).unwrap();
        let prob = HjbProblem::inf(ScalarField::zeros(g))
            .with_source(Trajectory::constant(tg, ScalarField::constant(g, 1.0)));
        let p = hjb_backward(&prob, &tg).unwrap();
        for k in 0..tg.nodes() {
            let expect = tg.horizon - tg.t(k);
            assert!(p.frame(k).values().iter().all(|v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn sup_inf_sign_flip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid::line(0.0, 2.0, 40).unwrap();
        let tg = TimeGrid::new(0.5, 20).unwrap();
        let terminal = ScalarField::from_fn(g, |_| rng.gen_range(-1.0..1.0));
        let source = Trajectory::new(
            tg,
            (0..tg.nodes())
                .map(|_| ScalarField::from_fn(g, |_| rng.gen_range(0.0..1.0)))
                .collect(),
        )
        .unwrap();
        let drift = Trajectory::constant(tg, FaceField::from_fn(g, |x| [(3.0 * x[0]).sin(), 0.0]));
        let inf = hjb_backward(
            &HjbProblem::inf(terminal.clone())
                .with_source(source.clone())
                .with_drift(drift.clone()),
            &tg,
        )
        .unwrap();
        let sup = hjb_backward(
            &HjbProblem::sup(terminal.map(|v| -v))
                .with_source(source)
                .with_drift(drift),
            &tg,
        )
        .unwrap();
        for (a, b) in inf.frames().iter().zip(sup.frames()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x + y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn comparison_principle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid::line(0.0, 2.0, 30).unwrap();
        let tg = TimeGrid::new(0.5, 10).unwrap();
        let drift = Trajectory::constant(tg, FaceField::from_fn(g, |x| [x[0] - 1.0, 0.0]));
        let source = Trajectory::constant(tg, ScalarField::from_fn(g, |x| x[0] * x[0]));
        for _ in 0..25 {
            let lo = ScalarField::from_fn(g, |_| rng.gen_range(-1.0..1.0));
            let hi = lo.zip_map(&ScalarField::from_fn(g, |_| rng.gen_range(0.0..0.5)), |a, b| a + b);
            let solve = |t: &ScalarField| {
                hjb_backward(
                    &HjbProblem::sup(t.clone())
                        .with_drift(drift.clone())
                        .with_source(source.clone()),
                    &tg,
                )
                .unwrap()
            };
            let (a, b) = (solve(&lo), solve(&hi));
            for (fa, fb) in a.frames().iter().zip(b.frames()) {
                assert!(fa.values().iter().zip(fb.values()).all(|(x, y)| x <= y));
            }
        }
    }

    #[test]
    fn residual_examples() {
        let g = Grid::line(0.0, 2.0, 40).unwrap();
        let tg = TimeGrid::new(1.0, 20).unwrap();
        let prob = HjbProblem::sup(ScalarField::from_fn(g, |x| -(x[0] - 1.0).abs()))
            .with_source(Trajectory::constant(tg, ScalarField::from_fn(g, |x| 0.1 * x[0])));
        let phi = hjb_backward(&prob, &tg).unwrap();
        assert!(hjb_residual(&phi, &prob).unwrap() <= 1e-10);

        let zero = Trajectory::constant(tg, ScalarField::zeros(g));
        let unit_source = HjbProblem::sup(ScalarField::zeros(g))
            .with_source(Trajectory::constant(tg, ScalarField::constant(g, 1.0)));
        assert!((hjb_residual(&zero, &unit_source).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_solution_residual_is_first_order() {
        let mut res = Vec::new();
        for n in [50, 100, 200] {
            let g = Grid::line(0.0, 2.0, n).unwrap();
            let tg = TimeGrid::new(0.5, n / 2).unwrap();
            let exact = |s: f64| ScalarField::from_fn(g, |x| -0.5 * (x[0] - 1.0).powi(2) / (1.0 + s));
            let frames = (0..tg.nodes()).map(|k| exact(tg.horizon - tg.t(k))).collect();
            let phi = Trajectory::new(tg, frames).unwrap();
            res.push(hjb_residual(&phi, &HjbProblem::sup(exact(0.0))).unwrap());
        }
        assert!(res[0] / res[1] >= 1.5 && res[1] / res[2] >= 1.5, "{res:?}");
    }

    #[test]
    fn hopf_lax_identity_and_sign() {
        let g = Grid::line(0.0, 2.0, 202).unwrap();
        let shifted = ScalarField::from_fn(g, |x| 0.5 - (x[0] - 1.0).abs());
        let tilde = shifted.map(|v| -v.abs());
        assert_eq!(hopf_lax(&tilde, 1.0, 1.0).unwrap(), tilde);
        let v = hopf_lax(&tilde, 0.0, 1.0).unwrap();
        assert!(v.max() <= 0.0);
        // Cell 50 has center 0.5, on the boundary of {shifted > 0}.
        assert!((g.center(50)[0] - 0.5).abs() < 1e-12);
        assert_eq!(v.values()[50], 0.0);
        assert!(hopf_lax(&tilde, 1.5, 1.0).is_err());
    }

    #[test]
    fn hopf_lax_matches_fine_scan() {
        let n = 40;
        let g = Grid::line(0.0, 2.0, n).unwrap();
        let terminal = ScalarField::from_fn(g, |x| -(x[0] - 1.0).abs());
        let v = hopf_lax(&terminal, 0.0, 1.0).unwrap();
        let fine = 10 * n;
        for i in 0..n {
            let x = g.center(i)[0];
            let scan = (0..fine)
                .map(|j| {
                    let y = (j as f64 + 0.5) * 2.0 / fine as f64;
                    -(y - 1.0).abs() - (x - y).powi(2) / 2.0
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((v.values()[i] - scan).abs() <= g.h(0), "x={x}");
        }
    }

    #[test]
    fn scheme_converges_to_hopf_lax_at_first_order() {
        let errs: Vec<f64> = [50, 100, 200]
            .iter()
            .map(|&n| {
                let g = Grid::line(0.0, 2.0, n).unwrap();
                let tg = TimeGrid::new(1.0, n).unwrap();
                let terminal = ScalarField::from_fn(g, |x| -(x[0] - 1.0).abs());
                let phi = hjb_backward(&HjbProblem::sup(terminal.clone()), &tg).unwrap();
                phi.frame(0).linf_distance(&hopf_lax(&terminal, 0.0, 1.0).unwrap())
            })
            .collect();
        assert!(errs[0] / errs[1] >= 1.5 && errs[1] / errs[2] >= 1.5, "{errs:?}");
    }
}
