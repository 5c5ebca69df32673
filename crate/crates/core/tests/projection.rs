use congested_mfg::grid::{gradient, DensityField, FaceField, Grid};
use congested_mfg::projection::{project_velocity_with, ProjectionOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::brute_force_pressure;

fn opts() -> ProjectionOptions {
    ProjectionOptions {
        tol: 1e-12,
        ..ProjectionOptions::default()
    }
}

fn random_instance(rng: &mut ChaCha8Rng, g: Grid) -> (DensityField, FaceField) {
    let n = g.len();
    let mut rho: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.6) { 1.0 } else { rng.gen_range(0.0..0.9) })
        .collect();
    let free = rng.gen_range(0..n);
    rho[free] = rng.gen_range(0.0..0.9);
    let u = FaceField::from_fn(g, |_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
    (DensityField::new(g, rho).unwrap(), u)
}

#[test]
fn pressure_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grids = [Grid::line(0.0, 1.0, 8).unwrap(), Grid::rect((0.0, 1.0), (0.0, 0.75), 4, 3).unwrap()];
    for k in 0..70 {
        let g = grids[usize::from(k >= 50)];
        let (rho, u) = random_instance(&mut rng, g);
        let sat: Vec<bool> = rho.values().iter().map(|r| *r >= 1.0 - opts().sat_eps).collect();
        let exact = brute_force_pressure(&sat, &u);
        let res = project_velocity_with(&rho, &u, &opts(), None).unwrap();
        let err = res.p.values().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = 1.0 + exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-6 * scale, "instance {k}: pressure error {err}");
        let v_exact = u.sub(&gradient(&congested_mfg::grid::ScalarField::new(g, exact).unwrap()));
        assert!(res.v.linf_distance(&v_exact) <= 1e-6 * scale);
    }
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = 12;
    (
        prop::collection::vec(prop_oneof![Just(1.0), 0.0..0.95f64], n),
        prop::collection::vec(-3.0..3.0f64, n + 1),
        prop::collection::vec(-3.0..3.0f64, n + 1),
    )
}

fn build(rho: Vec<f64>, u: Vec<f64>) -> (DensityField, FaceField) {
    let g = Grid::line(0.0, 1.5, rho.len()).unwrap();
    let mut u = u;
    u[0] = 0.0;
    *u.last_mut().unwrap() = 0.0;
    (DensityField::new(g, rho).unwrap(), FaceField::new(g, vec![u]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_idempotent_orthogonal_and_nonexpansive((rho, a, b) in instance()) {
        let (rho, u) = build(rho.clone(), a);
        let (_, w) = build(rho.values().to_vec(), b);
        let pu = project_velocity_with(&rho, &u, &opts(), None).unwrap();
        let pw = project_velocity_with(&rho, &w, &opts(), None).unwrap();
        prop_assert!(pu.converged && pw.converged);
        prop_assert!(pu.p.min() >= 0.0);
        prop_assert!(pu.cone_violation <= 1e-8);

        let again = project_velocity_with(&rho, &pu.v, &opts(), None).unwrap();
        prop_assert!(again.v.linf_distance(&pu.v) <= 1e-8);

        let gp = gradient(&pu.p);
        let scale = 1.0 + u.norm() * gp.norm();
        prop_assert!(pu.v.dot(&gp).abs() <= 1e-8 * scale);

        let lhs = pu.v.sub(&pw.v).norm();
        let rhs = u.sub(&w).norm();
        prop_assert!(lhs <= rhs + 1e-8, "|Pu - Pw| = {lhs} > |u - w| = {rhs}");
    }

    #[test]
    fn free_density_leaves_velocity_unchanged(a in prop::collection::vec(-3.0..3.0f64, 13), level in 0.0..0.99f64) {
        let (rho, u) = build(vec![level; 12], a);
        let res = project_velocity_with(&rho, &u, &opts(), None).unwrap();
        prop_assert_eq!(res.p.max_abs(), 0.0);
        prop_assert_eq!(res.v, u);
    }
}
