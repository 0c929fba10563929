//! Entropic cost functionals of controlled reversed and second-stage
//! ensembles, the suboptimality gap, and the entropic decomposition.

use serde::{Deserialize, Serialize};

use crate::entropy::mean_and_se;
use crate::error::{Error, Result};
use crate::potential::GibbsMeasure;
use crate::score::{LambdaField, ScoreField};
use crate::sde::{empirical_masses, Direction, PathEnsemble};

/// Clip activation rate above which a cost report is flagged.
pub const MAX_CLIP_RATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub policy: String,
    /// Mean of L at the terminal field time, evaluated at the endpoints.
    pub terminal_term: f64,
    /// Mean of ½∫|γ|².
    pub energy_term: f64,
    pub total: f64,
    pub std_error: f64,
    /// Relative entropy of the stage's initial law with respect to Q.
    pub reference_entropy: f64,
    /// total − reference_entropy.
    pub gap: f64,
    /// Field time at which the terminal L was evaluated.
    pub terminal_time: f64,
    /// (terminal time, total) for the alternative terminal times.
    pub terminal_sensitivity: Vec<(f64, f64)>,
    pub clip_rate: f64,
    /// Set when the clip rate exceeds [`MAX_CLIP_RATE`].
    pub flagged: bool,
    pub particles: usize,
}

impl CostReport {
    /// |total − value| within max(rel·value, k·SE).
    pub fn matches(&self, value: f64, rel: f64, k: f64) -> bool {
        (self.total - value).abs() <= (rel * value.abs()).max(k * self.std_error)
    }
}

struct CostSamples {
    per_particle: Vec<f64>,
    report: CostReport,
}

fn cost_samples(
    ens: &PathEnsemble,
    field: &ScoreField,
    gibbs: &GibbsMeasure,
    anchor: f64,
    offsets: &[f64],
) -> Result<CostSamples> {
    gibbs.require_probability()?;
    field.grid().check_same(gibbs.grid())?;
    if ens.energy.len() != ens.particles || ens.gap_density.len() != ens.particles {
        return Err(Error::Shape("ensemble lacks per-particle control accumulators".into()));
    }
    let ends = ens.final_states();
    let totals_at = |t: f64| -> Vec<f64> {
        ends.iter()
            .zip(&ens.energy)
            .map(|(x, e)| field.eval_log_ratio(t, *x) + e)
            .collect()
    };
    let terminal_time = anchor + offsets[0];
    let per_particle = totals_at(terminal_time);
    let (total, std_error) = mean_and_se(&per_particle);
    let energy_term = ens.energy.iter().sum::<f64>() / ens.particles as f64;
    let reference_entropy = field.entropy_at(anchor + ens.horizon)?;
    let terminal_sensitivity = offsets
        .iter()
        .map(|o| {
            let t = anchor + o;
            let v = totals_at(t);
            (t, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let clip_rate = ens.clip_rate();
    Ok(CostSamples {
        report: CostReport {
            policy: ens.policy.clone(),
            terminal_term: total - energy_term,
            energy_term,
            total,
            std_error,
            reference_entropy,
            gap: total - reference_entropy,
            terminal_time,
            terminal_sensitivity,
            clip_rate,
            flagged: clip_rate > MAX_CLIP_RATE,
            particles: ens.particles,
        },
        per_particle,
    })
}

fn anchor_of(ens: &PathEnsemble, expected: Direction) -> Result<f64> {
    match (ens.anchor, ens.direction == expected) {
        (Some(a), true) => Ok(a),
        _ => Err(Error::Config(format!(
            "ensemble `{}` does not come from the expected controlled simulation",
            ens.policy
        ))),
    }
}

/// Cost of a reversed ensemble: E[L(t_min, X̄(T)) + ½∫|γ|²] with t_min = dt
/// past the start of the field. Totals at t_min ∈ {dt, 2dt, 4dt} are reported.
pub fn expected_cost_reversed(ens: &PathEnsemble, sf: &ScoreField, gibbs: &GibbsMeasure) -> Result<CostReport> {
    let anchor = anchor_of(ens, Direction::Reversed)?;
    let dt = ens.dt;
    Ok(cost_samples(ens, sf, gibbs, anchor, &[dt, 2.0 * dt, 4.0 * dt])?.report)
}

/// Cost of a second-stage ensemble: E[Λ(0, X(T)) + ½∫|β|²].
pub fn expected_cost_second(ens: &PathEnsemble, lf: &LambdaField, gibbs: &GibbsMeasure) -> Result<CostReport> {
    let anchor = anchor_of(ens, Direction::Forward)?;
    let dt = ens.dt;
    Ok(cost_samples(ens, lf.source(), gibbs, anchor, &[0.0, dt, 2.0 * dt])?.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// total − H.
    pub measured: f64,
    pub measured_se: f64,
    /// Mean of ½∫|∇L + γ|².
    pub predicted: f64,
    pub predicted_se: f64,
    /// Standard error of measured − predicted, from per-particle differences.
    pub combined_se: f64,
}

impl GapReport {
    pub fn consistent(&self, k: f64) -> bool {
        (self.measured - self.predicted).abs() <= k * self.combined_se + 1e-12 * (1.0 + self.predicted.abs())
    }
}

/// The measured suboptimality gap against the mean gap density along the paths.
pub fn suboptimality_gap(ens: &PathEnsemble, sf: &ScoreField, gibbs: &GibbsMeasure) -> Result<GapReport> {
    let (anchor, offset) = match ens.direction {
        Direction::Reversed => (anchor_of(ens, Direction::Reversed)?, ens.dt),
        Direction::Forward => (anchor_of(ens, Direction::Forward)?, 0.0),
    };
    let samples = cost_samples(ens, sf, gibbs, anchor, &[offset])?;
    let (predicted, predicted_se) = mean_and_se(&ens.gap_density);
    let diffs: Vec<f64> = samples
        .per_particle
        .iter()
        .zip(&ens.gap_density)
        .map(|(t, g)| t - g)
        .collect();
    let (_, combined_se) = mean_and_se(&diffs);
    Ok(GapReport {
        measured: samples.report.gap,
        measured_se: samples.report.std_error,
        predicted,
        predicted_se,
        combined_se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub h_term: f64,
    pub d_term: f64,
    /// Mean of log Z^γ(T) (path-space relative entropy estimate).
    pub path_entropy: f64,
    /// Relative entropy between the unweighted and reweighted endpoint histograms.
    pub endpoint_entropy: f64,
}

/// Splits a cost into H_term + D_term, where D_term is the plug-in estimate
/// E[log Z^γ(T)] − KL(controlled endpoint ‖ reweighted endpoint) with
/// endpoint histograms on the grid of `gibbs`.
pub fn entropic_decomposition(
    ens: &PathEnsemble,
    cost: &CostReport,
    gibbs: &GibbsMeasure,
    stage: Stage,
) -> Result<Decomposition> {
    gibbs.require_probability()?;
    let expected = match stage {
        Stage::First => Direction::Reversed,
        Stage::Second => Direction::Forward,
    };
    anchor_of(ens, expected)?;
    let lw = ens.final_log_weights();
    let path_entropy = -lw.iter().sum::<f64>() / ens.particles as f64;
    let t_end = *ens.times.last().expect("non-empty");
    let plain = empirical_masses(ens, t_end, gibbs.grid(), false)?;
    let weighted = empirical_masses(ens, t_end, gibbs.grid(), true)?;
    let endpoint_entropy: f64 = plain
        .iter()
        .zip(&weighted)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum();
    let d_term = path_entropy - endpoint_entropy;
    Ok(Decomposition {
        h_term: cost.total - d_term,
        d_term,
        path_entropy,
        endpoint_entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{solve_fokker_planck, DensityField, Grid, InitialDensity, SolverSettings};
    use crate::potential::{builtin_potential, gibbs_on_grid};
    use crate::score::{build_score, DEFAULT_FLOOR};
    use crate::sde::{
        simulate_reversed, simulate_second_forward, ControlPolicy, InitialState, Perturbation, SimulationOptions,
    };

    struct Setup {
        gibbs: GibbsMeasure,
        field: DensityField,
        sf: ScoreField,
    }

    fn stationary() -> Setup {
        let grid = Grid::new(-6.0, 6.0, 256).unwrap();
        let pot = builtin_potential("quadratic", &[]).unwrap();
        let gibbs = gibbs_on_grid(&pot, &grid).unwrap();
        let field = solve_fokker_planck(&pot, gibbs.node_density(), &grid, 0.2, SolverSettings::new(1e-2)).unwrap();
        let sf = build_score(&field, &gibbs, DEFAULT_FLOOR).unwrap();
        Setup { gibbs, field, sf }
    }

    fn run(s: &Setup, policy: ControlPolicy, n: usize) -> PathEnsemble {
        let init = InitialState::Slice {
            grid: s.field.grid().clone(),
            values: s.field.slice_at(0.1).unwrap().to_vec(),
        };
        let window = s.field.window(0.0, 0.1).unwrap();
        let sf = build_score(&window, &s.gibbs, DEFAULT_FLOOR).unwrap();
        simulate_reversed(
            s.gibbs.potential(),
            &sf,
            &policy,
            &init,
            &SimulationOptions::new(n, 0.1, 1e-2, 5),
        )
        .unwrap()
    }

    #[test]
    fn stationary_costs() {
        let s = stationary();
        let ens = run(&s, ControlPolicy::ScoreOptimal, 2000);
        let r = expected_cost_reversed(&ens, &s.sf, &s.gibbs).unwrap();
        assert!(r.total.abs() < 1e-8 && r.reference_entropy.abs() < 1e-8);
        let ens = run(&s, ControlPolicy::Perturbed(Perturbation::Constant { c: 0.5 }), 2000);
        let r = expected_cost_reversed(&ens, &s.sf, &s.gibbs).unwrap();
        assert!(r.total >= -3.0 * r.std_error);
        assert!(r.std_error > 0.0);
    }

    #[test]
    fn zero_policy_has_no_energy_and_no_d_term() {
        let s = stationary();
        let ens = run(&s, ControlPolicy::Zero, 500);
        let r = expected_cost_reversed(&ens, &s.sf, &s.gibbs).unwrap();
        assert_eq!(r.energy_term, 0.0);
        assert!(ens.final_log_weights().iter().all(|l| *l == 0.0));
        let d = entropic_decomposition(&ens, &r, &s.gibbs, Stage::First).unwrap();
        assert_eq!(d.d_term, 0.0);
        assert_eq!(d.h_term, r.total);
    }

    #[test]
    fn optimal_gap_is_zero() {
        let s = stationary();
        let ens = run(&s, ControlPolicy::ScoreOptimal, 500);
        let g = suboptimality_gap(&ens, &s.sf, &s.gibbs).unwrap();
        assert_eq!(g.predicted, 0.0);
        assert!(g.consistent(3.0) || g.measured.abs() < 1e-8);
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let s = stationary();
        let ens = run(&s, ControlPolicy::Zero, 10);
        let lf = s.sf.lambda(0.1).unwrap();
        assert!(expected_cost_second(&ens, &lf, &s.gibbs).is_err());
        let r = expected_cost_reversed(&ens, &s.sf, &s.gibbs).unwrap();
        assert!(entropic_decomposition(&ens, &r, &s.gibbs, Stage::Second).is_err());
    }

    #[test]
    fn second_stage_optimal_cost_on_ou() {
        let grid = Grid::new(-8.0, 8.0, 512).unwrap();
        let pot = builtin_potential("quadratic", &[]).unwrap();
        let gibbs = gibbs_on_grid(&pot, &grid).unwrap();
        let p0 = InitialDensity::Gaussian {
            mean: 1.0,
            variance: 1.0,
        }
        .to_slice(&grid, None)
        .unwrap();
        let field = solve_fokker_planck(&pot, &p0, &grid, 1.0, SolverSettings::new(5e-3)).unwrap();
        let sf = build_score(&field, &gibbs, DEFAULT_FLOOR).unwrap();
        let lf = sf.lambda(0.5).unwrap();
        let init = InitialState::Slice {
            grid: grid.clone(),
            values: field.slice_at(1.0).unwrap().to_vec(),
        };
        let opts = SimulationOptions::new(20_000, 0.5, 5e-3, 11);
        let ens = simulate_second_forward(&pot, &lf, &ControlPolicy::LambdaOptimal, &init, &opts).unwrap();
        let r = expected_cost_second(&ens, &lf, &gibbs).unwrap();
        let (m, v) = crate::entropy::ou_moments(1.0, 1.0, 1.0);
        let (h, _) = crate::entropy::gaussian_entropy_vs_ou(m, v);
        assert!((r.reference_entropy - h).abs() < 1e-3);
        assert!(r.matches(h, 0.01, 3.0), "{r:?} vs {h}");
    }
}
