use congested_mfg::gradient_flow::{geodesic_1d, isotonic_regression, jko_step, w2_distance_1d, JkoConfig};
use congested_mfg::grid::{DensityField, FaceField, Grid, ScalarField, TimeGrid, Trajectory};
use congested_mfg::hjb::{hjb_backward, HjbProblem};
use congested_mfg::projection::wasserstein_project_k_1d;
use congested_mfg::scenario::find_level;
use congested_mfg::transport::advect_step;
use proptest::prelude::*;

const N: usize = 16;

fn grid() -> Grid {
    Grid::line(0.0, 2.0, N).unwrap()
}

fn density() -> impl Strategy<Value = DensityField> {
    prop::collection::vec(0.0..1.0f64, N).prop_filter_map("positive mass", |v| {
        (v.iter().sum::<f64>() > 0.1).then(|| DensityField::normalized(grid(), v).unwrap())
    })
}

fn faces() -> impl Strategy<Value = FaceField> {
    prop::collection::vec(-2.0..2.0f64, N + 1).prop_map(|mut v| {
        v[0] = 0.0;
        v[N] = 0.0;
        FaceField::new(grid(), vec![v]).unwrap()
    })
}

fn field() -> impl Strategy<Value = ScalarField> {
    prop::collection::vec(-1.0..1.0f64, N).prop_map(|v| ScalarField::new(grid(), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transport_conserves_mass_and_sign_and_contracts(a in density(), b in density(), v in faces(), dt in 0.01..0.5f64) {
        let (ra, _) = advect_step(&a, &v, dt).unwrap();
        let (rb, _) = advect_step(&b, &v, dt).unwrap();
        prop_assert!((ra.mass() - a.mass()).abs() <= 1e-12);
        prop_assert!(ra.min() >= 0.0);
        prop_assert!(ra.l1_distance(&rb) <= a.l1_distance(&b) + 1e-12);
    }

    #[test]
    fn hjb_is_monotone_and_shift_equivariant(p in field(), bump in field(), c in -2.0..2.0f64) {
        let tg = TimeGrid::new(0.5, 10).unwrap();
        let q = p.zip_map(&bump, |x, y| x + y.abs());
        let lo = hjb_backward(&HjbProblem::sup(p.clone()), &tg).unwrap();
        let hi = hjb_backward(&HjbProblem::sup(q), &tg).unwrap();
        let shifted = hjb_backward(&HjbProblem::sup(p.map(|x| x + c)), &tg).unwrap();
        for k in 0..tg.nodes() {
            let (l, h) = (lo.frame(k).values(), hi.frame(k).values());
            prop_assert!(l.iter().zip(h).all(|(a, b)| *a <= *b + 1e-12));
            prop_assert!(shifted.frame(k).linf_distance(&lo.frame(k).map(|x| x + c)) <= 1e-10);
        }
    }

    #[test]
    fn sup_and_inf_solutions_are_mirror_images(p in field(), s in field()) {
        let tg = TimeGrid::new(0.5, 10).unwrap();
        let source = Trajectory::constant(tg, s);
        let sup = hjb_backward(&HjbProblem::sup(p.map(|x| -x)).with_source(source.clone()), &tg).unwrap();
        let inf = hjb_backward(&HjbProblem::inf(p).with_source(source), &tg).unwrap();
        for k in 0..tg.nodes() {
            prop_assert!(inf.frame(k).linf_distance(&sup.frame(k).map(|x| -x)) <= 1e-12);
        }
    }

    #[test]
    fn w2_is_a_metric_and_geodesics_have_constant_speed(a in density(), b in density(), c in density(), t in 0.0..1.0f64) {
        let d = |x: &DensityField, y: &DensityField| w2_distance_1d(x, y).unwrap();
        prop_assert!(d(&a, &a) <= 1e-12);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        let mid = geodesic_1d(&a, &b, t).unwrap();
        prop_assert!((mid.mass() - 1.0).abs() <= 1e-10);
        // Cell averaging smears the interpolant by at most one cell.
        let h = grid().h(0);
        prop_assert!((d(&a, &mid) - t * d(&a, &b)).abs() <= h);
    }

    #[test]
    fn isotonic_output_is_sorted_bounded_and_mean_preserving(y in prop::collection::vec(-1.0..1.0f64, 1..20)) {
        let w: Vec<f64> = (0..y.len()).map(|i| 1.0 + (i % 3) as f64).collect();
        let out = isotonic_regression(&y, &w, -10.0, 10.0);
        prop_assert!(out.windows(2).all(|p| p[0] <= p[1] + 1e-15));
        let mean = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        prop_assert!((mean(&out) - mean(&y)).abs() <= 1e-10);
        let clipped = isotonic_regression(&y, &w, -0.2, 0.3);
        prop_assert!(clipped.iter().all(|v| (-0.2..=0.3).contains(v)));
    }

    #[test]
    fn k_projection_lands_in_k_with_unit_mass(a in density()) {
        let p = wasserstein_project_k_1d(&a).unwrap();
        prop_assert!(p.in_k());
        prop_assert!((p.mass() - 1.0).abs() <= 1e-10);
        prop_assert!(wasserstein_project_k_1d(&p).unwrap().l1_distance(&p) <= 1e-9);
    }

    #[test]
    fn jko_step_never_raises_the_energy(a in density(), d in field()) {
        let cfg = JkoConfig::constrained(0.05);
        let a = wasserstein_project_k_1d(&a).unwrap();
        let (next, out) = jko_step(&a, &d, &cfg).unwrap();
        prop_assert!(out.energy_after <= out.energy_before + 1e-12);
        prop_assert!(next.in_k());
        prop_assert!((next.mass() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn level_brackets_unit_measure(phi in field()) {
        let lv = find_level(&phi).unwrap();
        let h = grid().h(0);
        let above = |l: f64| phi.values().iter().filter(|v| **v > l).count() as f64 * h;
        prop_assert!((above(lv.level) - lv.measure).abs() <= 1e-12);
        prop_assert!(lv.measure >= 1.0 - 1e-12);
        if !lv.plateau {
            prop_assert!(lv.measure < 1.0 + h);
        }
        for l in [lv.level - 0.3, lv.level - 0.1, lv.level + 0.1, lv.level + 0.3] {
            let monotone = if l > lv.level { above(l) <= lv.measure } else { above(l) >= lv.measure };
            prop_assert!(monotone);
        }
    }
}
