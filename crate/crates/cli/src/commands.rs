use entroflow::control::{expected_cost_reversed, expected_cost_second, suboptimality_gap, CostReport};
use entroflow::entropy::{
    backwards_martingale_expectation, dissipation_check, relative_entropy, total_variation, EntropyReport,
    EntropySummary,
};
use entroflow::grid::{resample_slice, solve_fokker_planck};
use entroflow::io::{csv_record, format_float};
use entroflow::iterate::{ergodic_occupation, run_iteration, IterationSettings, MonteCarloSettings};
use entroflow::potential::gibbs_on_grid;
use entroflow::score::DEFAULT_FLOOR;
use entroflow::sde::{
    derive_seed, empirical_marginal, simulate_forward, simulate_reversed, simulate_second_forward, InitialState,
    PathEnsemble, PolicySpec, SimulationOptions,
};
use entroflow::{build_score, DensityField, GibbsMeasure, Grid, Potential};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::{Artifacts, Check};

/// Density level at the domain ends above which a run is noted as truncated.
const BOUNDARY_WARNING: f64 = 1e-8;
/// Below this value of ½I the dissipation residual is judged in absolute terms.
const FISHER_FLOOR: f64 = 1e-6;

struct Setup {
    pot: Potential,
    grid: Grid,
    gibbs: GibbsMeasure,
    p0: Vec<f64>,
}

fn setup(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<Setup, CliError> {
    let pot = cfg.potential.build()?;
    let grid = cfg.grid()?;
    let gibbs = gibbs_on_grid(&pot, &grid)?;
    let p0 = cfg.initial.to_slice(&grid, Some(&gibbs))?;
    for (what, slice) in [
        ("initial density", p0.as_slice()),
        ("Gibbs density", gibbs.node_density()),
    ] {
        let edge = slice[0].max(slice[slice.len() - 1]);
        if edge > BOUNDARY_WARNING {
            let msg = format!("{what} is {edge:.2e} at the domain boundary; consider a wider domain");
            eprintln!("warning: {msg}");
            out.notes.push(msg);
        }
    }
    Ok(Setup { pot, grid, gibbs, p0 })
}

fn thin(field: &DensityField, every: usize) -> Result<DensityField, CliError> {
    let n = field.len();
    let keep: Vec<usize> = (0..n).filter(|k| k % every == 0 || *k == n - 1).collect();
    Ok(DensityField::new(
        field.grid().clone(),
        keep.iter().map(|&k| field.times()[k]).collect(),
        keep.iter().map(|&k| field.slices()[k].clone()).collect(),
    )?)
}

fn slice_state(field: &DensityField, t: f64) -> Result<InitialState, CliError> {
    Ok(InitialState::Slice {
        grid: field.grid().clone(),
        values: field.slice_at(t)?.to_vec(),
    })
}

fn marginal_tv(
    cfg: &ExperimentConfig,
    ens: &PathEnsemble,
    s: f64,
    field: &DensityField,
    t: f64,
) -> Result<f64, CliError> {
    let coarse = cfg.histogram_grid()?;
    let emp = empirical_marginal(ens, s, &coarse, false)?;
    let fp = resample_slice(field.grid(), field.slice_at(t)?, &coarse)?;
    Ok(total_variation(&coarse, &emp, &fp)?)
}

fn sim_options(cfg: &ExperimentConfig, purpose: &str) -> SimulationOptions {
    SimulationOptions::new(cfg.particles, cfg.horizon, cfg.dt, derive_seed(cfg.seed, purpose))
        .record_every(cfg.record_every())
}

fn flow_checks(cfg: &ExperimentConfig, report: &EntropyReport, out: &mut Artifacts) {
    let tol = &cfg.tolerances;
    let margin = report.min_pinsker_margin();
    out.check(Check::new(
        "entropy",
        "pinsker",
        margin >= -tol.pinsker,
        format!("min H - 2TV^2 = {margin:.3e}"),
    ));
    let rise = report.max_increase();
    out.check(Check::new(
        "entropy",
        "monotone",
        rise <= 1e-12,
        format!("largest increase of H between stored times {rise:.3e}"),
    ));
}

fn dissipation_checks(
    cfg: &ExperimentConfig,
    report: &EntropyReport,
    h0: f64,
    kappa: Option<f64>,
    out: &mut Artifacts,
) {
    let tol = &cfg.tolerances;
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for k in 1..report.times.len() - 1 {
        let half_i = 0.5 * report.fisher[k];
        if half_i >= FISHER_FLOOR {
            worst_rel = worst_rel.max(report.relative_residual[k]);
        } else {
            worst_abs = worst_abs.max(report.residual[k]);
        }
    }
    out.check(Check::new(
        "entropy",
        "dissipation",
        worst_rel <= tol.dissipation && worst_abs <= tol.dissipation * FISHER_FLOOR,
        format!("max relative residual {worst_rel:.3e}, max absolute residual where I is negligible {worst_abs:.3e}"),
    ));
    let lhs = report.integral_lhs;
    let rhs = report.integral_rhs;
    let err = (lhs - rhs).abs();
    out.check(Check::new(
        "entropy",
        "integrated dissipation",
        err <= tol.integral * rhs.abs() || err <= tol.integral * FISHER_FLOOR,
        format!("H drop {lhs:.6e} vs half Fisher integral {rhs:.6e}"),
    ));
    if let Some(kappa) = kappa.filter(|k| *k > 0.0) {
        let ok = report
            .times
            .iter()
            .zip(&report.entropy)
            .all(|(t, h)| *h <= (-2.0 * kappa * t).exp() * h0 * (1.0 + tol.relative) + tol.pinsker);
        out.check(Check::new(
            "entropy",
            "exponential decay",
            ok,
            format!("H(t) <= exp(-2 {kappa} t) H(0) at all reported times"),
        ));
    }
    flow_checks(cfg, report, out);
}

fn mass_check(cfg: &ExperimentConfig, field: &DensityField, out: &mut Artifacts) {
    let res = field.validate(cfg.tolerances.mass);
    out.check(Check::new(
        "grid",
        "mass conservation",
        res.is_ok(),
        match res {
            Ok(()) => format!("{} slices with unit mass", field.len()),
            Err(e) => e.to_string(),
        },
    ));
}

pub fn forward(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg, out)?;
    let field = solve_fokker_planck(&s.pot, &s.p0, &s.grid, cfg.horizon, cfg.solver())?;
    mass_check(cfg, &field, out);
    let sf = build_score(&field, &s.gibbs, DEFAULT_FLOOR)?;
    let report = dissipation_check(&field, &sf, &s.gibbs, 0.0)?;
    flow_checks(cfg, &report, out);
    out.file("density.csv", thin(&field, cfg.csv.density_every)?.to_csv());
    out.file("entropy.csv", report.to_csv());
    if cfg.forward_ensemble {
        let init = InitialState::Slice {
            grid: s.grid.clone(),
            values: s.p0.clone(),
        };
        let ens = simulate_forward(&s.pot, &init, &sim_options(cfg, "forward"))?;
        let tv = marginal_tv(cfg, &ens, cfg.horizon, &field, cfg.horizon)?;
        out.check(Check::new(
            "sde",
            "forward marginal",
            tv <= cfg.tolerances.tv,
            format!("TV(ensemble, P(T)) = {tv:.4}"),
        ));
        out.json("ensemble.json", &ens.summary(&cfg.histogram_grid()?)?);
    }
    Ok(())
}

pub fn entropy_report(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg, out)?;
    let field = solve_fokker_planck(&s.pot, &s.p0, &s.grid, cfg.horizon, cfg.solver())?;
    mass_check(cfg, &field, out);
    let sf = build_score(&field, &s.gibbs, DEFAULT_FLOOR)?;
    let report = dissipation_check(&field, &sf, &s.gibbs, cfg.dt.min(cfg.horizon / 2.0))?;
    let h0 = relative_entropy(&s.p0, &s.gibbs)?;
    dissipation_checks(cfg, &report, h0, s.pot.hessian_lower_bound(), out);

    #[derive(Serialize)]
    struct Martingale {
        time: f64,
        mean: f64,
        std_error: f64,
    }
    let mut martingale = vec![];
    for (k, t) in [0.5 * cfg.horizon, cfg.horizon].into_iter().enumerate() {
        let t = field.times()[field.index_of(t).or_else(|_| field.index_of(cfg.horizon))?];
        let m = backwards_martingale_expectation(
            &field,
            &s.gibbs,
            t,
            cfg.particles,
            cfg.dt,
            derive_seed(cfg.seed, &format!("martingale-{k}")),
        )?;
        out.check(Check::new(
            "entropy",
            format!("backwards martingale t = {t}"),
            (m.mean - 1.0).abs() <= cfg.tolerances.std_errors * m.std_error + 1e-12,
            format!("E_Q[p/q] = {:.5} ± {:.5}", m.mean, m.std_error),
        ));
        martingale.push(Martingale {
            time: t,
            mean: m.mean,
            std_error: m.std_error,
        });
    }

    #[derive(Serialize)]
    struct Summary {
        #[serde(flatten)]
        summary: EntropySummary,
        initial_entropy: f64,
        martingale: Vec<Martingale>,
    }
    out.file("entropy.csv", report.to_csv());
    out.json(
        "entropy_summary.json",
        &Summary {
            summary: EntropySummary::new(&report, &s.gibbs),
            initial_entropy: h0,
            martingale,
        },
    );
    Ok(())
}

pub fn reverse(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg, out)?;
    let t = cfg.horizon;
    let field = solve_fokker_planck(&s.pot, &s.p0, &s.grid, 2.0 * t, cfg.solver())?;
    mass_check(cfg, &field, out);
    let sf = build_score(&field, &s.gibbs, DEFAULT_FLOOR)?;
    let init = slice_state(&field, t)?;
    let hist = cfg.histogram_grid()?;
    let mut csv = String::from("policy,s,tv\n");
    let mut summaries = vec![];
    for (j, spec) in cfg.policies.iter().enumerate() {
        let policy = (*spec).to_policy(false);
        let ens = simulate_reversed(&s.pot, &sf, &policy, &init, &sim_options(cfg, &format!("reverse-{j}")))?;
        let mut worst = 0.0f64;
        for &r in &ens.times {
            let tv = marginal_tv(cfg, &ens, r, &field, t + r)?;
            worst = worst.max(tv);
            csv.push_str(&csv_record([policy.label(), format_float(r), format_float(tv)]));
        }
        if policy.is_optimal() {
            out.check(Check::new(
                "sde",
                "reversed marginals follow P(T+s)",
                worst <= cfg.tolerances.tv,
                format!("max TV over recorded times {worst:.4}"),
            ));
            let (m, se) = ens.weight_mean();
            out.check(Check::new(
                "sde",
                "importance weights",
                (m - 1.0).abs() <= cfg.tolerances.std_errors * se + 1e-12,
                format!("mean weight {m:.5} ± {se:.5}"),
            ));
        }
        summaries.push(ens.summary(&hist)?);
    }
    out.file("reverse.csv", csv);
    out.json("ensembles.json", &summaries);
    Ok(())
}

#[derive(Debug, Serialize)]
struct CostRow {
    stage: usize,
    policy: String,
    total: f64,
    reference: f64,
    gap: f64,
    std_error: f64,
    clip_rate: f64,
    predicted_gap: Option<f64>,
    pass: bool,
    report: CostReport,
}

fn cost_row(
    cfg: &ExperimentConfig,
    stage: usize,
    spec: &PolicySpec,
    report: CostReport,
    predicted: Option<f64>,
) -> CostRow {
    let tol = &cfg.tolerances;
    let reference = report.reference_entropy;
    let slack = (tol.std_errors * report.std_error).max(1e-9);
    let pass = !report.flagged
        && match spec {
            PolicySpec::Optimal => (report.total - reference).abs() <= (tol.relative * reference.abs()).max(slack),
            _ => report.total >= reference - slack,
        };
    CostRow {
        stage,
        policy: report.policy.clone(),
        total: report.total,
        reference,
        gap: report.gap,
        std_error: report.std_error,
        clip_rate: report.clip_rate,
        predicted_gap: predicted,
        pass,
        report,
    }
}

pub fn verify_control(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg, out)?;
    let t = cfg.horizon;
    let field = solve_fokker_planck(&s.pot, &s.p0, &s.grid, 2.0 * t, cfg.solver())?;
    mass_check(cfg, &field, out);
    let sf = build_score(&field, &s.gibbs, DEFAULT_FLOOR)?;
    let lf = sf.lambda(t)?;
    let first = slice_state(&field, t)?;
    let second = slice_state(&field, 2.0 * t)?;
    let mut rows = vec![];
    for (j, spec) in cfg.policies.iter().enumerate() {
        let ens = simulate_reversed(
            &s.pot,
            &sf,
            &(*spec).to_policy(false),
            &first,
            &sim_options(cfg, &format!("control-1-{j}")),
        )?;
        let report = expected_cost_reversed(&ens, &sf, &s.gibbs)?;
        let predicted = if matches!(spec, PolicySpec::Optimal | PolicySpec::Zero) {
            None
        } else {
            let g = suboptimality_gap(&ens, &sf, &s.gibbs)?;
            out.check(Check::new(
                "control",
                format!("gap identity {}", report.policy),
                g.consistent(cfg.tolerances.std_errors),
                format!(
                    "measured {:.5} vs predicted {:.5}, combined SE {:.5}",
                    g.measured, g.predicted, g.combined_se
                ),
            ));
            Some(g.predicted)
        };
        rows.push(cost_row(cfg, 1, spec, report, predicted));

        let ens = simulate_second_forward(
            &s.pot,
            &lf,
            &(*spec).to_policy(true),
            &second,
            &sim_options(cfg, &format!("control-2-{j}")),
        )?;
        let report = expected_cost_second(&ens, &lf, &s.gibbs)?;
        rows.push(cost_row(cfg, 2, spec, report, None));
    }
    println!(
        "{:<6} {:<22} {:>10} {:>10} {:>10} {:>9}  result",
        "stage", "policy", "total", "reference", "gap", "SE"
    );
    for r in &rows {
        println!(
            "{:<6} {:<22} {:>10.5} {:>10.5} {:>10.5} {:>9.5}  {}",
            r.stage,
            r.policy,
            r.total,
            r.reference,
            r.gap,
            r.std_error,
            if r.pass { "pass" } else { "FAIL" }
        );
        out.check(Check::new(
            "control",
            format!("stage {} {}", r.stage, r.policy),
            r.pass,
            format!(
                "total {:.5} ± {:.5}, reference {:.5}",
                r.total, r.std_error, r.reference
            ),
        ));
    }
    out.json("costs.json", &rows);
    Ok(())
}

pub fn iterate(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg, out)?;
    let settings = IterationSettings {
        horizon: cfg.horizon,
        stages: cfg.stages,
        solver: cfg.solver(),
        monte_carlo: (!cfg.verify_stages.is_empty()).then(|| MonteCarloSettings {
            particles: cfg.particles,
            dt: cfg.dt,
            seed: cfg.seed,
            stages: cfg.verify_stages.clone(),
        }),
        stop_below: cfg.stop_below,
    };
    let trace = run_iteration(&s.pot, &s.gibbs, &s.p0, &settings)?;
    let mut prev = trace.initial_entropy;
    let mut decreasing = true;
    for r in &trace.rows {
        decreasing &= r.entropy < prev || r.entropy.abs() <= 1e-10;
        prev = r.entropy;
        if let (Some(c), Some(se)) = (r.cost, r.std_error) {
            let tol = &cfg.tolerances;
            out.check(Check::new(
                "iterate",
                format!("stage {} optimal cost", r.stage),
                (c - r.entropy).abs() <= (tol.relative * r.entropy).max(tol.std_errors * se).max(1e-9),
                format!("simulated {c:.5} ± {se:.5} vs H {:.5}", r.entropy),
            ));
        }
    }
    out.check(Check::new(
        "iterate",
        "entropy decreases",
        decreasing,
        format!(
            "H: {:.4e} -> {:.4e} over {} stages",
            trace.initial_entropy,
            prev,
            trace.rows.len()
        ),
    ));
    if trace.stopped_early {
        out.notes.push(format!(
            "stopped early after {} of {} stages (H below {:e})",
            trace.rows.len(),
            cfg.stages,
            cfg.stop_below.unwrap_or_default()
        ));
    }
    for r in &trace.rows {
        out.notes
            .push(format!("stage {} wall time {:.3}s", r.stage, r.wall_time));
    }
    out.file("trace.csv", trace.to_csv());
    Ok(())
}

pub fn ergodic(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg, out)?;
    let e = &cfg.ergodic;
    let occ = ergodic_occupation(
        &s.gibbs,
        cfg.ergodic_set(),
        e.horizon,
        e.trajectories,
        e.dt,
        derive_seed(cfg.seed, "ergodic"),
    )?;
    out.check(Check::new(
        "iterate",
        "ergodic occupation",
        (occ.fraction - occ.q_a).abs() <= cfg.tolerances.occupation,
        format!(
            "time fraction {:.5} ± {:.5} vs Q(A) {:.5}",
            occ.fraction, occ.std_error, occ.q_a
        ),
    ));
    out.json("ergodic.json", &occ);
    Ok(())
}
