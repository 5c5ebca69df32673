//! Oracles shared by the integration targets.
#![allow(dead_code)]

use congested_mfg::gradient_flow::QuantileFunction;
use congested_mfg::grid::{divergence, gradient, DensityField, FaceField, Grid, ScalarField};

pub fn line(n: usize) -> Grid {
    Grid::line(0.0, 2.0, n).unwrap()
}

/// `rho_0 = 1` on `(1/2, 3/2)` and `Phi = -|x - 1|` on `[0, 2]`.
pub fn nothing_moves(n: usize) -> (DensityField, ScalarField) {
    let g = line(n);
    let rho0 = DensityField::from_fn(g, |x| if (x[0] - 1.0).abs() < 0.5 { 1.0 } else { 0.0 }).unwrap();
    (rho0, ScalarField::from_fn(g, |x| -(x[0] - 1.0).abs()))
}

/// Exhaustive minimization over knot positions on a lattice of spacing
/// `delta`: chain dynamic programming with the exact piecewise-linear
/// transport cost, lumped potential weights and `X_{j+1} - X_j >= ds_j`.
pub fn brute_force_jko(q0: &QuantileFunction, d: &ScalarField, tau: f64, delta: f64) -> f64 {
    let ax = d.grid().axis(0);
    let lattice: Vec<f64> = (0..)
        .map(|i| ax.lower + i as f64 * delta)
        .take_while(|x| *x <= ax.upper + 1e-12)
        .collect();
    let (s, x0, w) = (q0.s(), q0.x(), q0.lumped_weights());
    let (v, h, c0) = (d.values(), ax.h(), ax.center(0));
    // Linear between centers, extended with the end slopes.
    let eval = |x: f64| {
        let t = (x - c0) / h;
        let i = (t.max(0.0).floor() as usize).min(v.len() - 2);
        v[i] + (t - i as f64) * (v[i + 1] - v[i])
    };
    let pot = |j: usize, x: f64| w[j] * eval(x);
    let mut cost: Vec<f64> = lattice.iter().map(|&x| pot(0, x)).collect();
    for j in 0..s.len() - 1 {
        let ds = s[j + 1] - s[j];
        let mut next = vec![f64::INFINITY; lattice.len()];
        for (ib, &xb) in lattice.iter().enumerate() {
            let b = xb - x0[j + 1];
            let mut best = f64::INFINITY;
            for (ia, &xa) in lattice.iter().enumerate().take(ib + 1) {
                if xb - xa < ds - 1e-12 || cost[ia].is_infinite() {
                    continue;
                }
                let a = xa - x0[j];
                best = best.min(cost[ia] + ds * (a * a + a * b + b * b) / (6.0 * tau));
            }
            next[ib] = best + pot(j + 1, xb);
        }
        cost = next;
    }
    cost.into_iter().fold(f64::INFINITY, f64::min)
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Pressure of the projection by enumeration of active sets: the unique
/// `p >= 0` supported on `sat` with `w = div(u - grad p) >= 0` on `sat` and
/// `p w = 0`. The operator is assembled column by column from the grid's own
/// gradient and divergence.
pub fn brute_force_pressure(sat: &[bool], u: &FaceField) -> Vec<f64> {
    let g = *u.grid();
    let n = g.len();
    let q = divergence(u).into_values();
    let col = |j: usize| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        divergence(&gradient(&ScalarField::new(g, e).unwrap())).into_values()
    };
    let lap: Vec<Vec<f64>> = (0..n).map(col).collect(); // lap[j][i] = (lap e_j)_i
    let cells: Vec<usize> = (0..n).filter(|&i| sat[i]).collect();
    assert!(cells.len() <= 16, "too many saturated cells for enumeration");
    for bits in 0u32..(1 << cells.len()) {
        let active: Vec<usize> = (0..cells.len()).filter(|b| bits >> b & 1 == 1).map(|b| cells[b]).collect();
        let a: Vec<Vec<f64>> = active.iter().map(|&i| active.iter().map(|&j| -lap[j][i]).collect()).collect();
        let rhs: Vec<f64> = active.iter().map(|&i| -q[i]).collect();
        let pa = if active.is_empty() { Vec::new() } else { solve_dense(a, rhs) };
        let mut p = vec![0.0; n];
        for (k, &i) in active.iter().enumerate() {
            p[i] = pa[k];
        }
        let w: Vec<f64> = (0..n).map(|i| q[i] - (0..n).map(|j| lap[j][i] * p[j]).sum::<f64>()).collect();
        let scale = 1e-10 * (1.0 + q.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let ok = cells.iter().all(|&i| p[i] >= -scale && w[i] >= -scale && (p[i] * w[i]).abs() <= scale * (1.0 + p[i].abs()));
        if ok {
            return p;
        }
    }
    panic!("no active set satisfies the complementarity conditions");
}
