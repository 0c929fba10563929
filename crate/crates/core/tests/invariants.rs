use entroflow::entropy::{relative_entropy, total_variation};
use entroflow::grid::solve_fokker_planck;
use entroflow::potential::gibbs_on_grid;
use entroflow::{builtin_potential, Grid, InitialDensity, SolverSettings};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flows_keep_mass_and_lose_entropy(
        mean in -2.0f64..2.0,
        variance in 0.1f64..3.0,
        well in any::<bool>(),
    ) {
        let (pot, grid) = if well {
            (builtin_potential("double_well", &[1.0]).unwrap(), Grid::new(-3.0, 3.0, 192).unwrap())
        } else {
            (builtin_potential("quadratic", &[]).unwrap(), Grid::new(-8.0, 8.0, 256).unwrap())
        };
        let q = gibbs_on_grid(&pot, &grid).unwrap();
        let p0 = InitialDensity::Gaussian { mean, variance }.to_slice(&grid, None).unwrap();
        let field = solve_fokker_planck(&pot, &p0, &grid, 0.5, SolverSettings::new(1e-2)).unwrap();
        field.validate(1e-12).unwrap();
        let mut prev = f64::INFINITY;
        for p in field.slices() {
            let h = relative_entropy(p, &q).unwrap();
            let tv = total_variation(&grid, p, q.node_density()).unwrap();
            prop_assert!(h >= -1e-12);
            prop_assert!(2.0 * tv * tv <= h + 1e-6);
            prop_assert!(h <= prev + 1e-12);
            prev = h;
        }
    }

    #[test]
    fn convex_flows_decay_exponentially(mean in -2.0f64..2.0, variance in 0.1f64..3.0, kappa in 0.5f64..2.0) {
        let grid = Grid::new(-8.0, 8.0, 256).unwrap();
        let pot = builtin_potential("quadratic", &[kappa]).unwrap();
        let q = gibbs_on_grid(&pot, &grid).unwrap();
        let p0 = InitialDensity::Gaussian { mean, variance }.to_slice(&grid, None).unwrap();
        let field = solve_fokker_planck(&pot, &p0, &grid, 0.5, SolverSettings::new(1e-2).with_stride(5)).unwrap();
        let h0 = relative_entropy(&p0, &q).unwrap();
        for (t, p) in field.times().iter().zip(field.slices()) {
            let h = relative_entropy(p, &q).unwrap();
            prop_assert!(h <= (-2.0 * kappa * t).exp() * h0 * 1.01 + 1e-9, "t = {t}: {h} vs {h0}");
        }
    }
}
