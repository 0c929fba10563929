//! Alternating backward/forward stages: each stage starts from P(kT), and the
//! marginal law advances by T per stage towards Q.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{expected_cost_reversed, expected_cost_second};
use crate::entropy::{mean_and_se, relative_entropy, total_variation};
use crate::error::{Error, Result};
use crate::grid::{DensityField, FokkerPlanckSolver, Interval, SolverSettings};
use crate::io::{csv_record, format_float};
use crate::potential::{GibbsMeasure, Potential};
use crate::score::{build_score, DEFAULT_FLOOR};
use crate::sde::{
    derive_seed, particle_rng, simulate_reversed, simulate_second_forward, ControlPolicy, Direction, InitialState,
    SimulationOptions, SliceSampler,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSettings {
    pub particles: usize,
    pub dt: f64,
    pub seed: u64,
    /// Stages (1-based) whose optimal cost is verified by simulation.
    pub stages: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSettings {
    pub horizon: f64,
    pub stages: usize,
    pub solver: SolverSettings,
    pub monte_carlo: Option<MonteCarloSettings>,
    /// Stop once H(P(kT)|Q) falls below this value.
    pub stop_below: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub direction: Direction,
    /// H(P(kT)|Q).
    pub entropy: f64,
    pub tv: f64,
    /// Simulated optimal cost of the stage, when verified.
    pub cost: Option<f64>,
    pub std_error: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationTrace {
    pub initial_entropy: f64,
    pub rows: Vec<StageRecord>,
    pub stopped_early: bool,
}

impl IterationTrace {
    /// CSV with columns `k,direction,H,tv,cost,se` (empty cost/se when not verified).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,direction,H,tv,cost,se\n");
        for r in &self.rows {
            out.push_str(&csv_record([
                r.stage.to_string(),
                r.direction.to_string(),
                format_float(r.entropy),
                format_float(r.tv),
                r.cost.map(format_float).unwrap_or_default(),
                r.std_error.map(format_float).unwrap_or_default(),
            ]));
        }
        out
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.entropy).collect()
    }
}

fn stage_cost(
    pot: &Potential,
    gibbs: &GibbsMeasure,
    leg: &DensityField,
    stage: usize,
    mc: &MonteCarloSettings,
) -> Result<(f64, f64)> {
    let horizon = leg.end_time() - leg.start_time();
    let sf = build_score(leg, gibbs, DEFAULT_FLOOR)?;
    let init = InitialState::Slice {
        grid: leg.grid().clone(),
        values: leg.last().to_vec(),
    };
    let opts = SimulationOptions::new(
        mc.particles,
        horizon,
        mc.dt,
        derive_seed(mc.seed, &format!("stage-{stage}")),
    );
    let report = if stage % 2 == 1 {
        let ens = simulate_reversed(pot, &sf, &ControlPolicy::ScoreOptimal, &init, &opts)?;
        expected_cost_reversed(&ens, &sf, gibbs)?
    } else {
        let lf = sf.lambda(leg.start_time())?;
        let ens = simulate_second_forward(pot, &lf, &ControlPolicy::LambdaOptimal, &init, &opts)?;
        expected_cost_second(&ens, &lf, gibbs)?
    };
    Ok((report.total, report.std_error))
}

/// Runs K stages from `p0`, recording H(P(kT)|Q) and TV(P(kT), Q) for
/// k = 1..K. Odd stages are backward, even stages forward.
pub fn run_iteration(
    pot: &Potential,
    gibbs: &GibbsMeasure,
    p0: &[f64],
    settings: &IterationSettings,
) -> Result<IterationTrace> {
    gibbs.require_probability()?;
    if settings.stages == 0 {
        return Err(Error::Config("iteration needs at least one stage".into()));
    }
    let grid = gibbs.grid();
    let q = gibbs.node_density();
    let mut solver = FokkerPlanckSolver::new(pot, grid, p0, 0.0, settings.solver)?;
    let initial_entropy = relative_entropy(p0, gibbs)?;
    let mut rows = Vec::with_capacity(settings.stages);
    let mut stopped_early = false;
    for k in 1..=settings.stages {
        let clock = Instant::now();
        let leg = solver.advance(settings.horizon).map_err(|e| e.in_stage(k))?;
        let end = leg.last();
        let entropy = relative_entropy(end, gibbs).map_err(|e| e.in_stage(k))?;
        let tv = total_variation(grid, end, q)?;
        let (cost, std_error) = match &settings.monte_carlo {
            Some(mc) if mc.stages.contains(&k) => {
                let (c, se) = stage_cost(pot, gibbs, &leg, k, mc).map_err(|e| e.in_stage(k))?;
                (Some(c), Some(se))
            }
            _ => (None, None),
        };
        rows.push(StageRecord {
            stage: k,
            direction: if k % 2 == 1 {
                Direction::Reversed
            } else {
                Direction::Forward
            },
            entropy,
            tv,
            cost,
            std_error,
            wall_time: clock.elapsed().as_secs_f64(),
        });
        if settings.stop_below.is_some_and(|floor| entropy < floor) && k < settings.stages {
            stopped_early = true;
            break;
        }
    }
    Ok(IterationTrace {
        initial_entropy,
        rows,
        stopped_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occupation {
    /// Time-averaged indicator of the set, pooled over trajectories.
    pub fraction: f64,
    /// Standard error across trajectories.
    pub std_error: f64,
    /// Q(A) by quadrature.
    pub q_a: f64,
    pub trajectories: usize,
}

/// Long-run share of time spent in `set` by trajectories started from Q,
/// compared with Q(set).
pub fn ergodic_occupation(
    gibbs: &GibbsMeasure,
    set: Interval,
    horizon: f64,
    trajectories: usize,
    dt: f64,
    seed: u64,
) -> Result<Occupation> {
    gibbs.require_probability()?;
    let steps = (horizon / dt).round();
    if trajectories == 0 || !(dt > 0.0) || steps < 1.0 {
        return Err(Error::Config(
            "ergodic run needs trajectories ≥ 1 and horizon ≥ dt > 0".into(),
        ));
    }
    let steps = steps as u64;
    let pot = gibbs.potential();
    let grid = gibbs.grid();
    let domain = grid.domain();
    let sampler = SliceSampler::new(grid, gibbs.node_density())?;
    let sqdt = dt.sqrt();
    let run = |j: usize| -> Result<f64> {
        use rand::Rng;
        let mut rng = particle_rng(seed, j);
        let mut x = sampler.sample(&mut rng);
        let mut inside = 0u64;
        for step in 0..steps {
            inside += u64::from(set.contains(x));
            let xi: f64 = rng.sample(rand_distr::StandardNormal);
            x += -pot.gradient(x) * dt + sqdt * xi;
            if x > domain.upper {
                x = 2.0 * domain.upper - x;
            } else if x < domain.lower {
                x = 2.0 * domain.lower - x;
            }
            x = x.clamp(domain.lower, domain.upper);
            if !x.is_finite() {
                return Err(Error::Simulation {
                    particle: j,
                    step: step as usize,
                    reason: "non-finite state".into(),
                });
            }
        }
        Ok(inside as f64 / steps as f64)
    };
    #[cfg(feature = "parallel")]
    let fractions: Vec<f64> = {
        use rayon::prelude::*;
        (0..trajectories).into_par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let fractions: Vec<f64> = (0..trajectories).map(run).collect::<Result<_>>()?;
    let (fraction, std_error) = mean_and_se(&fractions);
    Ok(Occupation {
        fraction,
        std_error,
        q_a: gibbs.probability_of(set)?,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, InitialDensity};
    use crate::potential::{builtin_potential, gibbs_on_grid};

    fn ou(points: usize) -> (Potential, GibbsMeasure) {
        let grid = Grid::new(-8.0, 8.0, points).unwrap();
        let pot = builtin_potential("quadratic", &[]).unwrap();
        let q = gibbs_on_grid(&pot, &grid).unwrap();
        (pot, q)
    }

    fn settings(stages: usize) -> IterationSettings {
        IterationSettings {
            horizon: 0.5,
            stages,
            solver: SolverSettings::new(1e-2),
            monte_carlo: None,
            stop_below: None,
        }
    }

    #[test]
    fn stationary_start_is_a_fixed_point() {
        let (pot, q) = ou(256);
        let trace = run_iteration(&pot, &q, q.node_density(), &settings(3)).unwrap();
        assert_eq!(trace.rows.len(), 3);
        for r in &trace.rows {
            assert!(r.entropy.abs() <= 1e-8 && r.tv <= 1e-6);
        }
    }

    #[test]
    fn directions_alternate_and_entropy_decreases() {
        let (pot, q) = ou(256);
        let p0 = InitialDensity::Gaussian {
            mean: 1.0,
            variance: 1.0,
        }
        .to_slice(q.grid(), None)
        .unwrap();
        let trace = run_iteration(&pot, &q, &p0, &settings(4)).unwrap();
        let dirs: Vec<Direction> = trace.rows.iter().map(|r| r.direction).collect();
        assert_eq!(
            dirs,
            [
                Direction::Reversed,
                Direction::Forward,
                Direction::Reversed,
                Direction::Forward
            ]
        );
        let h = trace.entropies();
        assert!(h.windows(2).all(|w| w[1] < w[0]));
        assert!(h[0] < trace.initial_entropy);
        let csv = trace.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,backward,"));
    }

    #[test]
    fn early_stop() {
        let (pot, q) = ou(256);
        let p0 = InitialDensity::Gaussian {
            mean: 0.2,
            variance: 0.5,
        }
        .to_slice(q.grid(), None)
        .unwrap();
        let mut s = settings(10);
        s.horizon = 2.0;
        s.stop_below = Some(1e-6);
        let trace = run_iteration(&pot, &q, &p0, &s).unwrap();
        assert!(trace.stopped_early);
        assert!(trace.rows.len() < 10);
    }

    #[test]
    fn full_set_occupation() {
        let (_, q) = ou(256);
        let occ = ergodic_occupation(&q, Interval::new(-8.0, 8.0), 10.0, 2, 1e-2, 1).unwrap();
        assert_eq!(occ.fraction, 1.0);
        assert!((occ.q_a - 1.0).abs() < 1e-8);
    }

    #[test]
    fn stage_errors_carry_the_stage_index() {
        let (pot, q) = ou(256);
        let p0 = q.node_density().to_vec();
        let mut s = settings(2);
        s.horizon = 0.505;
        let err = run_iteration(&pot, &q, &p0, &s).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: 1, .. }));
        assert!(err.is_config());
    }
}
