//! Dynamic-programming oracle for a single agent's control problem
//!
//! ```text
//! maximize  -sum_k (|a_k|^2 / 2 + c_k(y_k)) dt + Phi(y_N),   y_{k+1} = y_k + (a_k - b_k(y_k)) dt
//! ```
//!
//! over controls on a finite lattice `|a| <= a_max`. The value table lives at
//! cell centers and is interpolated linearly; paths are reconstructed from
//! arbitrary starting points and their payoff is evaluated exactly along the
//! path, so it is an achievable payoff rather than an interpolated estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FaceTrajectory, Grid, ScalarField, ScalarTrajectory, TimeGrid, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpOptions {
    /// Lattice step is `h / (dt * control_refine)`.
    pub control_refine: usize,
    /// Largest control magnitude; defaults to `2 diam / T`.
    pub alpha_max: Option<f64>,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions {
            control_refine: 32,
            alpha_max: None,
        }
    }
}

/// Terminal payoff, optional running cost `c` and optional drag `b`.
#[derive(Debug, Clone)]
pub struct AgentProblem {
    pub terminal: ScalarField,
    pub source: Option<ScalarTrajectory>,
    pub drift: Option<FaceTrajectory>,
    pub time: TimeGrid,
}

impl AgentProblem {
    pub fn free(terminal: ScalarField, time: TimeGrid) -> Self {
        AgentProblem {
            terminal,
            source: None,
            drift: None,
            time,
        }
    }

    pub fn with_source(mut self, source: ScalarTrajectory) -> Self {
        self.source = Some(source);
        self
    }

    pub fn with_drift(mut self, drift: FaceTrajectory) -> Self {
        self.drift = Some(drift);
        self
    }

    fn validate(&self) -> Result<()> {
        let nodes = self.time.nodes();
        let g = self.terminal.grid();
        if let Some(c) = &self.source {
            if c.frames().len() != nodes {
                return Err(Error::TimeGridMismatch {
                    expected: nodes,
                    found: c.frames().len(),
                });
            }
            if c.frame(0).grid() != g {
                return Err(Error::GridMismatch);
            }
        }
        if let Some(b) = &self.drift {
            if b.frames().len() != nodes {
                return Err(Error::TimeGridMismatch {
                    expected: nodes,
                    found: b.frames().len(),
                });
            }
            if b.frame(0).grid() != g {
                return Err(Error::GridMismatch);
            }
        }
        Ok(())
    }

    fn cost(&self, k: usize, y: [f64; 2]) -> f64 {
        self.source.as_ref().map_or(0.0, |c| c.frame(k).sample(y))
    }

    fn drag(&self, k: usize, y: [f64; 2]) -> [f64; 2] {
        self.drift.as_ref().map_or([0.0; 2], |b| b.frame(k).sample(y))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BestResponse {
    /// Positions at nodes `k0..=N`.
    pub path: Vec<[f64; 2]>,
    pub controls: Vec<[f64; 2]>,
    pub payoff: f64,
    /// Some chosen control sits on the lattice boundary `|a| = a_max`.
    pub bound_active: bool,
}

/// Value table of the discrete control problem.
#[derive(Debug, Clone)]
pub struct BestResponseOracle {
    problem: AgentProblem,
    controls: Vec<[f64; 2]>,
    alpha_max: f64,
    values: ScalarTrajectory,
}

impl BestResponseOracle {
    pub fn new(problem: AgentProblem, opts: &DpOptions) -> Result<Self> {
        problem.validate()?;
        let g = *problem.terminal.grid();
        let tg = problem.time;
        if opts.control_refine == 0 {
            return Err(Error::param("control_refine", "must be at least 1"));
        }
        let alpha_max = opts.alpha_max.unwrap_or(2.0 * g.diameter() / tg.horizon);
        if !(alpha_max.is_finite() && alpha_max > 0.0) {
            return Err(Error::param("alpha_max", format!("must be positive, got {alpha_max}")));
        }
        let controls = control_lattice(&g, tg.dt(), opts.control_refine, alpha_max);
        let dt = tg.dt();
        let mut frames = vec![problem.terminal.clone(); tg.nodes()];
        for k in (0..tg.steps).rev() {
            let next = &frames[k + 1];
            let vals = g
                .centers()
                .map(|y| best_control(&problem, &controls, next, k, y, dt).1)
                .collect();
            frames[k] = ScalarField::new(g, vals)?;
        }
        Ok(BestResponseOracle {
            problem,
            controls,
            alpha_max,
            values: Trajectory::new(tg, frames)?,
        })
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    pub fn control_count(&self) -> usize {
        self.controls.len()
    }

    pub fn values(&self) -> &ScalarTrajectory {
        &self.values
    }

    /// Interpolated value table at node `k`.
    pub fn value(&self, k: usize, x: [f64; 2]) -> f64 {
        self.values.frame(k).sample(x)
    }

    /// Greedy path against the value table from `x0` at node `k0`.
    pub fn best_response(&self, x0: [f64; 2], k0: usize) -> Result<BestResponse> {
        let tg = self.problem.time;
        if k0 > tg.steps {
            return Err(Error::param("k0", format!("{k0} exceeds {} steps", tg.steps)));
        }
        let g = *self.problem.terminal.grid();
        let dt = tg.dt();
        let mut y = g.clamp(x0);
        let mut path = vec![y];
        let mut chosen = Vec::new();
        let mut payoff = 0.0;
        let mut bound_active = false;
        for k in k0..tg.steps {
            let (a, _) = best_control(&self.problem, &self.controls, self.values.frame(k + 1), k, y, dt);
            let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
            bound_active |= norm >= self.alpha_max * (1.0 - 1e-12);
            payoff -= running(&self.problem, k, y, a) * dt;
            y = advance(&self.problem, &g, k, y, a, dt);
            path.push(y);
            chosen.push(a);
        }
        payoff += self.problem.terminal.sample(y);
        Ok(BestResponse {
            path,
            controls: chosen,
            payoff,
            bound_active,
        })
    }

    /// Payoff of the feedback control `alpha_k(y_k)` from `x0` at node `k0`.
    pub fn follow(&self, x0: [f64; 2], k0: usize, alpha: &FaceTrajectory) -> Result<f64> {
        follow_payoff(&self.problem, x0, k0, alpha)
    }
}

/// Payoff of the feedback control `alpha_k(y_k)` with the oracle's dynamics.
pub fn follow_payoff(problem: &AgentProblem, x0: [f64; 2], k0: usize, alpha: &FaceTrajectory) -> Result<f64> {
    problem.validate()?;
    let tg = problem.time;
    if alpha.frames().len() != tg.nodes() {
        return Err(Error::TimeGridMismatch {
            expected: tg.nodes(),
            found: alpha.frames().len(),
        });
    }
    let g = *problem.terminal.grid();
    let dt = tg.dt();
    let mut y = g.clamp(x0);
    let mut payoff = 0.0;
    for k in k0..tg.steps {
        let a = alpha.frame(k).sample(y);
        payoff -= running(problem, k, y, a) * dt;
        y = advance(problem, &g, k, y, a, dt);
    }
    Ok(payoff + problem.terminal.sample(y))
}

fn running(problem: &AgentProblem, k: usize, y: [f64; 2], a: [f64; 2]) -> f64 {
    0.5 * (a[0] * a[0] + a[1] * a[1]) + problem.cost(k, y)
}

fn advance(problem: &AgentProblem, g: &Grid, k: usize, y: [f64; 2], a: [f64; 2], dt: f64) -> [f64; 2] {
    let b = problem.drag(k, y);
    g.clamp([y[0] + (a[0] - b[0]) * dt, y[1] + (a[1] - b[1]) * dt])
}

fn best_control(
    problem: &AgentProblem,
    controls: &[[f64; 2]],
    next: &ScalarField,
    k: usize,
    y: [f64; 2],
    dt: f64,
) -> ([f64; 2], f64) {
    let g = next.grid();
    let c = problem.cost(k, y);
    let b = problem.drag(k, y);
    let mut best = ([0.0; 2], f64::NEG_INFINITY);
    for &a in controls {
        let z = g.clamp([y[0] + (a[0] - b[0]) * dt, y[1] + (a[1] - b[1]) * dt]);
        let val = -(0.5 * (a[0] * a[0] + a[1] * a[1]) + c) * dt + next.sample(z);
        if val > best.1 {
            best = (a, val);
        }
    }
    best
}

/// Lattice `{j da : |j da| <= a_max}` per axis, cut to the disk in 2D.
fn control_lattice(g: &Grid, dt: f64, refine: usize, alpha_max: f64) -> Vec<[f64; 2]> {
    let da = g.h_min() / (dt * refine as f64);
    let j_max = (alpha_max / da).floor() as i64;
    let range = -j_max..=j_max;
    let mut out = Vec::new();
    if g.dim() == 1 {
        for j in range {
            out.push([j as f64 * da, 0.0]);
        }
    } else {
        for i in range.clone() {
            for j in range.clone() {
                let a = [i as f64 * da, j as f64 * da];
                if (a[0] * a[0] + a[1] * a[1]).sqrt() <= alpha_max + 1e-12 {
                    out.push(a);
                }
            }
        }
    }
    // Zero first so ties resolve to staying put.
    out.sort_by(|a, b| (a[0].abs() + a[1].abs()).total_cmp(&(b[0].abs() + b[1].abs())));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::hopf_lax;

    #[test]
    fn constant_terminal_stays_put() {
        let g = Grid::line(0.0, 2.0, 40).unwrap();
        let tg = TimeGrid::new(1.0, 20).unwrap();
        let prob = AgentProblem::free(ScalarField::constant(g, 3.0), tg);
        let oracle = BestResponseOracle::new(prob, &DpOptions::default()).unwrap();
        let br = oracle.best_response([0.7, 0.0], 0).unwrap();
        assert!(br.controls.iter().all(|a| a[0] == 0.0));
        assert!((br.payoff - 3.0).abs() < 1e-14);
        assert!(!br.bound_active);
    }

    #[test]
    fn free_problem_matches_hopf_lax() {
        let mut errs = Vec::new();
        for n in [50, 100, 200] {
            let g = Grid::line(0.0, 2.0, n).unwrap();
            let tg = TimeGrid::new(1.0, n / 2).unwrap();
            let phi = ScalarField::from_fn(g, |x| -(x[0] - 1.2).powi(2));
            let oracle = BestResponseOracle::new(AgentProblem::free(phi.clone(), tg), &DpOptions::default()).unwrap();
            let hl = hopf_lax(&phi, 0.0, 1.0).unwrap();
            let mut err: f64 = 0.0;
            for x in [0.3, 0.8, 1.1, 1.6] {
                let br = oracle.best_response([x, 0.0], 0).unwrap();
                err = err.max((br.payoff - hl.sample([x, 0.0])).abs());
            }
            errs.push(err);
        }
        assert!(errs[2] < 2e-2, "{errs:?}");
        assert!(errs[2] <= errs[0], "{errs:?}");
    }

    #[test]
    fn follow_of_optimal_feedback_is_dominated() {
        let g = Grid::line(0.0, 2.0, 80).unwrap();
        let tg = TimeGrid::new(1.0, 40).unwrap();
        let phi = ScalarField::from_fn(g, |x| (3.0 * x[0]).sin());
        let oracle = BestResponseOracle::new(AgentProblem::free(phi, tg), &DpOptions::default()).unwrap();
        let zero = Trajectory::constant(tg, crate::grid::FaceField::zeros(g));
        for x in [0.2, 0.9, 1.7] {
            let br = oracle.best_response([x, 0.0], 0).unwrap();
            let stay = oracle.follow([x, 0.0], 0, &zero).unwrap();
            assert!(br.payoff >= stay - 1e-12);
        }
    }

    #[test]
    fn drag_is_paid_for() {
        // A uniform drag b pushes left; holding position costs |b|^2/2 per unit time.
        let g = Grid::line(0.0, 2.0, 40).unwrap();
        let tg = TimeGrid::new(1.0, 40).unwrap();
        let b = crate::grid::FaceField::from_fn(g, |_| [0.5, 0.0]);
        let prob = AgentProblem::free(ScalarField::from_fn(g, |x| -10.0 * (x[0] - 1.0).powi(2)), tg)
            .with_drift(Trajectory::constant(tg, b));
        let oracle = BestResponseOracle::new(prob, &DpOptions::default()).unwrap();
        let br = oracle.best_response([1.0, 0.0], 0).unwrap();
        assert!(br.payoff < 0.0 && br.payoff > -0.2, "{}", br.payoff);
    }
}
