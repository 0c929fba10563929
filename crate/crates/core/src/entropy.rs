//! Relative entropy, relative Fisher information, total variation, and the
//! dissipation identities dH/dt = −½I along the Fokker-Planck flow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid, InitialDensity};
use crate::io::{csv_record, format_float};
use crate::potential::GibbsMeasure;
use crate::score::{ScoreField, DEFAULT_FLOOR};
use crate::sde::{particle_rng, simulate_forward, InitialState, SimulationOptions, SliceSampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyValue {
    /// ∫ p log(max(p, εq)/q), in nats.
    pub value: f64,
    /// Part of `value` coming from nodes where p < εq.
    pub floored_contribution: f64,
    pub floored_nodes: usize,
}

/// Entropy quadrature without the normalizability check; when Q is infinite
/// this is relative to the unnormalized q.
pub(crate) fn relative_entropy_unchecked(slice: &[f64], gibbs: &GibbsMeasure) -> EntropyValue {
    relative_entropy_floored(slice, gibbs, DEFAULT_FLOOR)
}

fn relative_entropy_floored(slice: &[f64], gibbs: &GibbsMeasure, floor: f64) -> EntropyValue {
    let grid = gibbs.grid();
    let log_floor = floor.ln();
    let mut value = 0.0;
    let mut floored_contribution = 0.0;
    let mut floored_nodes = 0;
    for (i, &p) in slice.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let lq = gibbs.node_log_density(i);
        let l = p.ln() - lq;
        let term = grid.weight(i) * p * l.max(log_floor);
        if l < log_floor {
            floored_nodes += 1;
            floored_contribution += term;
        }
        value += term;
    }
    EntropyValue {
        value,
        floored_contribution,
        floored_nodes,
    }
}

/// H(P|Q) in nats.
pub fn relative_entropy(slice: &[f64], gibbs: &GibbsMeasure) -> Result<f64> {
    Ok(relative_entropy_detailed(slice, gibbs, DEFAULT_FLOOR)?.value)
}

pub fn relative_entropy_detailed(slice: &[f64], gibbs: &GibbsMeasure, floor: f64) -> Result<EntropyValue> {
    gibbs.require_probability()?;
    check_len(gibbs.grid(), slice)?;
    Ok(relative_entropy_floored(slice, gibbs, floor))
}

/// −∫ p log p; the entropy relative to Lebesgue measure used for heat flow.
pub fn differential_entropy(grid: &Grid, slice: &[f64]) -> Result<f64> {
    check_len(grid, slice)?;
    Ok(-slice
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, p)| grid.weight(i) * p * p.ln())
        .sum::<f64>())
}

fn check_len(grid: &Grid, slice: &[f64]) -> Result<()> {
    if slice.len() == grid.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "slice of length {} on a grid of {} points",
            slice.len(),
            grid.len()
        )))
    }
}

/// ∫ |∇L(t,·)|² p(t,·) at a time stored in both fields.
pub fn fisher_information(sf: &ScoreField, field: &DensityField, t: f64) -> Result<f64> {
    field.grid().check_same(sf.grid())?;
    let p = field.slice_at(t)?;
    let d = &sf.score_slices()[sf.index_of(t)?];
    Ok(fisher_quadrature(field.grid(), p, d))
}

fn fisher_quadrature(grid: &Grid, p: &[f64], d: &[f64]) -> f64 {
    p.iter()
        .zip(d)
        .enumerate()
        .map(|(i, (p, d))| grid.weight(i) * p * d * d)
        .sum()
}

/// ½ ∫ |p_a − p_b| on a shared grid.
pub fn total_variation(grid: &Grid, a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(grid, a)?;
    check_len(grid, b)?;
    Ok(0.5
        * a.iter()
            .zip(b)
            .enumerate()
            .map(|(i, (x, y))| grid.weight(i) * (x - y).abs())
            .sum::<f64>())
}

/// Entropy, Fisher information, TV to Q and dissipation residuals along a flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyReport {
    pub times: Vec<f64>,
    pub entropy: Vec<f64>,
    pub fisher: Vec<f64>,
    pub tv: Vec<f64>,
    /// |dH/dt + ½I| at interior times (NaN at the two ends).
    pub residual: Vec<f64>,
    /// residual / (½I) at interior times (NaN at the ends or where I = 0).
    pub relative_residual: Vec<f64>,
    /// H − 2 TV².
    pub pinsker_margin: Vec<f64>,
    /// H(t_first) − H(t_last).
    pub integral_lhs: f64,
    /// ½ ∫ I dt by trapezoid over the stored times.
    pub integral_rhs: f64,
    /// Entropy contributions from floored nodes, summed over all times.
    pub floored_contribution: f64,
}

impl EntropyReport {
    pub fn max_relative_residual(&self) -> f64 {
        self.relative_residual
            .iter()
            .filter(|r| r.is_finite())
            .fold(0.0, |m, r| m.max(*r))
    }

    pub fn max_residual(&self) -> f64 {
        self.residual
            .iter()
            .filter(|r| r.is_finite())
            .fold(0.0, |m, r| m.max(*r))
    }

    /// Relative error of the integrated identity (absolute when both sides vanish).
    pub fn integral_error(&self) -> f64 {
        let d = (self.integral_lhs - self.integral_rhs).abs();
        if self.integral_rhs.abs() > 1e-12 {
            d / self.integral_rhs.abs()
        } else {
            d
        }
    }

    pub fn min_pinsker_margin(&self) -> f64 {
        self.pinsker_margin.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }

    /// Largest increase H(t_{i+1}) − H(t_i).
    pub fn max_increase(&self) -> f64 {
        self.entropy
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with columns `t,H,I,tv,residual,pinsker_margin`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,H,I,tv,residual,pinsker_margin\n");
        for k in 0..self.times.len() {
            out.push_str(&csv_record([
                format_float(self.times[k]),
                format_float(self.entropy[k]),
                format_float(self.fisher[k]),
                format_float(self.tv[k]),
                format_float(self.residual[k]),
                format_float(self.pinsker_margin[k]),
            ]));
        }
        out
    }
}

/// Derivative at the middle of three (possibly unevenly spaced) samples.
fn three_point_derivative(t: [f64; 3], h: [f64; 3]) -> f64 {
    let (a, b) = (t[1] - t[0], t[2] - t[1]);
    -b / (a * (a + b)) * h[0] + (b - a) / (a * b) * h[1] + a / (b * (a + b)) * h[2]
}

/// Computes H and I at every stored time ≥ `t_min` and checks
/// dH/dt = −½I pointwise and in integrated form.
pub fn dissipation_check(
    field: &DensityField,
    sf: &ScoreField,
    gibbs: &GibbsMeasure,
    t_min: f64,
) -> Result<EntropyReport> {
    gibbs.require_probability()?;
    field.grid().check_same(gibbs.grid())?;
    field.grid().check_same(sf.grid())?;
    let grid = field.grid();
    let q = gibbs.node_density();
    let mut report = EntropyReport {
        times: vec![],
        entropy: vec![],
        fisher: vec![],
        tv: vec![],
        residual: vec![],
        relative_residual: vec![],
        pinsker_margin: vec![],
        integral_lhs: 0.0,
        integral_rhs: 0.0,
        floored_contribution: 0.0,
    };
    let tol = 1e-9 * t_min.abs().max(1.0);
    for (t, p) in field.times().iter().zip(field.slices()) {
        if *t < t_min - tol {
            continue;
        }
        let h = relative_entropy_floored(p, gibbs, sf.floor());
        let d = &sf.score_slices()[sf.index_of(*t)?];
        let tv = total_variation(grid, p, q)?;
        report.times.push(*t);
        report.entropy.push(h.value);
        report.fisher.push(fisher_quadrature(grid, p, d));
        report.tv.push(tv);
        report.pinsker_margin.push(h.value - 2.0 * tv * tv);
        report.floored_contribution += h.floored_contribution;
    }
    let n = report.times.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "dissipation check needs at least 3 stored times from t = {t_min}, found {n}"
        )));
    }
    report.residual = vec![f64::NAN; n];
    report.relative_residual = vec![f64::NAN; n];
    for k in 1..n - 1 {
        let dh = three_point_derivative(
            [report.times[k - 1], report.times[k], report.times[k + 1]],
            [report.entropy[k - 1], report.entropy[k], report.entropy[k + 1]],
        );
        let half_i = 0.5 * report.fisher[k];
        let r = (dh + half_i).abs();
        report.residual[k] = r;
        report.relative_residual[k] = if half_i > 0.0 { r / half_i } else { f64::NAN };
    }
    report.integral_lhs = report.entropy[0] - report.entropy[n - 1];
    report.integral_rhs = 0.5 * trapezoid(&report.times, &report.fisher);
    Ok(report)
}

fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2)
        .zip(f.windows(2))
        .map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1]))
        .sum()
}

/// Metadata written next to the entropy CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropySummary {
    pub potential: String,
    pub points: usize,
    pub stored_times: usize,
    pub max_relative_residual: f64,
    pub integral_lhs: f64,
    pub integral_rhs: f64,
    pub integral_error: f64,
    pub min_pinsker_margin: f64,
    pub max_increase: f64,
    pub floored_contribution: f64,
}

impl EntropySummary {
    pub fn new(report: &EntropyReport, gibbs: &GibbsMeasure) -> Self {
        Self {
            potential: gibbs.potential().label().to_string(),
            points: gibbs.grid().len(),
            stored_times: report.times.len(),
            max_relative_residual: report.max_relative_residual(),
            integral_lhs: report.integral_lhs,
            integral_rhs: report.integral_rhs,
            integral_error: report.integral_error(),
            min_pinsker_margin: report.min_pinsker_margin(),
            max_increase: report.max_increase(),
            floored_contribution: report.floored_contribution,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfiniteHorizon {
    /// H(P(0)|Q).
    pub lhs: f64,
    /// ½ ∫₀^{T_long} I dt.
    pub rhs: f64,
    /// H(P(T_long)|Q), the part of the identity not captured by `rhs`.
    pub truncation: f64,
    /// False when the truncation exceeds 1e−4·H(0).
    pub precise: bool,
}

/// H(P(0)|Q) against ½∫I over the whole stored horizon.
pub fn infinite_horizon_identity(
    field: &DensityField,
    sf: &ScoreField,
    gibbs: &GibbsMeasure,
) -> Result<InfiniteHorizon> {
    gibbs.require_probability()?;
    field.grid().check_same(sf.grid())?;
    let grid = field.grid();
    let mut fisher = Vec::with_capacity(field.len());
    for (t, p) in field.times().iter().zip(field.slices()) {
        fisher.push(fisher_quadrature(grid, p, &sf.score_slices()[sf.index_of(*t)?]));
    }
    let lhs = relative_entropy(&field.slices()[0], gibbs)?;
    let truncation = relative_entropy(field.last(), gibbs)?;
    Ok(InfiniteHorizon {
        lhs,
        rhs: 0.5 * trapezoid(field.times(), &fisher),
        truncation,
        precise: truncation <= 1e-4 * lhs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub time: f64,
    pub mean: f64,
    pub std_error: f64,
    pub particles: usize,
}

/// Monte Carlo E_Q[ℓ(t, X(t))] with X(0) ~ Q following the forward dynamics;
/// the result is 1 for every probe time.
pub fn backwards_martingale_expectation(
    field: &DensityField,
    gibbs: &GibbsMeasure,
    t: f64,
    particles: usize,
    dt: f64,
    seed: u64,
) -> Result<MartingaleCheck> {
    gibbs.require_probability()?;
    field.grid().check_same(gibbs.grid())?;
    let p = field.slice_at(t)?;
    let grid = field.grid();
    let states: Vec<f64> = if t > 0.0 {
        let opts = SimulationOptions::new(particles, t, dt, seed);
        let init = InitialState::Slice {
            grid: grid.clone(),
            values: gibbs.node_density().to_vec(),
        };
        simulate_forward(gibbs.potential(), &init, &opts)?
            .final_states()
            .to_vec()
    } else {
        let sampler = SliceSampler::new(grid, gibbs.node_density())?;
        (0..particles)
            .map(|i| sampler.sample(&mut particle_rng(seed, i)))
            .collect()
    };
    let ratios: Vec<f64> = states
        .iter()
        .map(|&x| grid.interpolate(p, x) / grid.interpolate(gibbs.node_density(), x))
        .collect();
    let (mean, std_error) = mean_and_se(&ratios);
    Ok(MartingaleCheck {
        time: t,
        mean,
        std_error,
        particles,
    })
}

/// Sequential mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Gaussian relative entropy and Fisher information against N(0, ½), the
/// invariant law of the unit quadratic potential.
pub fn gaussian_entropy_vs_ou(mean: f64, variance: f64) -> (f64, f64) {
    let h = 0.5 * (2.0 * variance + 2.0 * mean * mean - 1.0 - (2.0 * variance).ln());
    let a = 2.0 - 1.0 / variance;
    (h, a * a * variance + 4.0 * mean * mean)
}

/// Mean and variance of the unit Ornstein-Uhlenbeck flow from N(m₀, v₀).
pub fn ou_moments(m0: f64, v0: f64, t: f64) -> (f64, f64) {
    (m0 * (-t).exp(), 0.5 + (v0 - 0.5) * (-2.0 * t).exp())
}

/// Convenience: the entropy of a Gaussian initial density evaluated on the grid.
pub fn gaussian_slice_entropy(gibbs: &GibbsMeasure, mean: f64, variance: f64) -> Result<f64> {
    let p = InitialDensity::Gaussian { mean, variance }.to_slice(gibbs.grid(), None)?;
    relative_entropy(&p, gibbs)
}
