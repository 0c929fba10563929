use entroflow::entropy::{fisher_information, relative_entropy, total_variation};
use entroflow::grid::{resample_slice, slice_moments, solve_fokker_planck};
use entroflow::potential::gibbs_on_grid;
use entroflow::score::DEFAULT_FLOOR;
use entroflow::sde::{
    empirical_marginal, simulate_forward, simulate_reversed, simulate_second_forward, ControlPolicy, InitialState,
    PathEnsemble, SimulationOptions,
};
use entroflow::{
    build_score, builtin_potential, DensityField, GibbsMeasure, Grid, InitialDensity, Potential, ScoreField,
    SolverSettings,
};

/// (t, H, I) for p₀ = N(1,1) under the unit quadratic potential.
const OU_TABLE: [(f64, f64, f64); 8] = [
    (0.0, 1.1534264097200273, 5.0),
    (0.25, 0.6727574974788969, 2.8841026206795095),
    (0.5, 0.3951883179980521, 1.6693938042886636),
    (1.0, 0.13953891933343282, 0.5736058553754412),
    (1.5, 0.05038692676492489, 0.20387066385205005),
    (2.0, 0.01839849437419644, 0.07392141340822198),
    (2.5, 0.006749246254069174, 0.02704198014594309),
    (3.0, 0.002480285696134331, 0.009927266746728601),
];

struct Ou {
    pot: Potential,
    gibbs: GibbsMeasure,
    field: DensityField,
    sf: ScoreField,
}

fn ou(horizon: f64, stride: usize) -> Ou {
    let grid = Grid::new(-8.0, 8.0, 1024).unwrap();
    let pot = builtin_potential("quadratic", &[]).unwrap();
    let gibbs = gibbs_on_grid(&pot, &grid).unwrap();
    let p0 = InitialDensity::Gaussian {
        mean: 1.0,
        variance: 1.0,
    }
    .to_slice(&grid, None)
    .unwrap();
    let field = solve_fokker_planck(&pot, &p0, &grid, horizon, SolverSettings::new(1e-3).with_stride(stride)).unwrap();
    let sf = build_score(&field, &gibbs, DEFAULT_FLOOR).unwrap();
    Ou { pot, gibbs, field, sf }
}

fn coarse_tv(field: &DensityField, ens: &PathEnsemble, s: f64, t: f64) -> f64 {
    let coarse = Grid::new(-8.0, 8.0, 129).unwrap();
    let emp = empirical_marginal(ens, s, &coarse, false).unwrap();
    let fp = resample_slice(field.grid(), field.slice_at(t).unwrap(), &coarse).unwrap();
    total_variation(&coarse, &emp, &fp).unwrap()
}

#[test]
fn entropy_and_fisher_follow_the_gaussian_table() {
    let o = ou(3.0, 50);
    for (t, h, i) in OU_TABLE {
        let hn = relative_entropy(o.field.slice_at(t).unwrap(), &o.gibbs).unwrap();
        let inum = fisher_information(&o.sf, &o.field, t).unwrap();
        assert!((hn - h).abs() <= 2e-3 * h + 1e-6, "H({t}) = {hn}, expected {h}");
        assert!((inum - i).abs() <= 5e-3 * i + 1e-6, "I({t}) = {inum}, expected {i}");
    }
}

#[test]
fn double_well_normalization() {
    let grid = Grid::new(-3.0, 3.0, 2048).unwrap();
    let gibbs = gibbs_on_grid(&builtin_potential("double_well", &[1.0]).unwrap(), &grid).unwrap();
    let z = gibbs.normalizing_constant().unwrap();
    assert!((z - 1.410914703196209).abs() <= 1e-6, "{z}");
}

#[test]
fn forward_ensemble_matches_ou_moments() {
    let grid = Grid::new(-8.0, 8.0, 1024).unwrap();
    let pot = builtin_potential("quadratic", &[]).unwrap();
    let p0 = InitialDensity::Gaussian {
        mean: 1.0,
        variance: 1.0,
    }
    .to_slice(&grid, None)
    .unwrap();
    let init = InitialState::Slice {
        grid: grid.clone(),
        values: p0,
    };
    let ens = simulate_forward(&pot, &init, &SimulationOptions::new(100_000, 0.5, 1e-3, 9)).unwrap();
    let x = ens.final_states();
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0);
    let (m_exact, v_exact) = (0.6065306597126334, 0.6839397205857212);
    assert!((m - m_exact).abs() <= 3.0 * (v_exact / n).sqrt() + 1e-3, "mean {m}");
    assert!(
        (v - v_exact).abs() <= 3.0 * v_exact * (2.0 / n).sqrt() + 2e-3,
        "variance {v}"
    );
}

#[test]
fn uncontrolled_reversal_retraces_the_flow() {
    let t = 0.5;
    let o = ou(2.0 * t, 1);
    let init = InitialState::Slice {
        grid: o.field.grid().clone(),
        values: o.field.slice_at(t).unwrap().to_vec(),
    };
    let opts = SimulationOptions::new(100_000, t, 1e-3, 21).record_every(250);
    let ens = simulate_reversed(&o.pot, &o.sf, &ControlPolicy::Zero, &init, &opts).unwrap();
    for s in [0.25, 0.5] {
        let tv = coarse_tv(&o.field, &ens, s, t - s);
        assert!(tv <= 0.02, "TV at s = {s}: {tv}");
    }
    let start = slice_moments(o.field.grid(), o.field.slice_at(0.0).unwrap());
    let x = ens.final_states();
    let m = x.iter().sum::<f64>() / x.len() as f64;
    assert!((m - start.mean).abs() < 0.02, "{m}");
}

#[test]
fn uncontrolled_second_stage_runs_the_flow_backwards() {
    let t = 0.5;
    let o = ou(2.0 * t, 1);
    let lf = o.sf.lambda(t).unwrap();
    let init = InitialState::Slice {
        grid: o.field.grid().clone(),
        values: o.field.last().to_vec(),
    };
    let opts = SimulationOptions::new(100_000, t, 1e-3, 22).record_every(250);
    let ens = simulate_second_forward(&o.pot, &lf, &ControlPolicy::Zero, &init, &opts).unwrap();
    for s in [0.25, 0.5] {
        let tv = coarse_tv(&o.field, &ens, s, 2.0 * t - s);
        assert!(tv <= 0.02, "TV at s = {s}: {tv}");
    }
}
