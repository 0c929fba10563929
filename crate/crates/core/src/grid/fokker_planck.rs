use serde::{Deserialize, Serialize};

use super::{DensityField, Grid};
use crate::error::{Error, Result};
use crate::potential::Potential;

/// Values in `[-NEG_CLIP, 0)` are rounding noise and get clipped.
const NEG_CLIP: f64 = 1e-12;
const MAX_GROWTH: f64 = 1e6;

/// Bernoulli function B(z) = z/(e^z − 1), the weight of the fitted flux.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Tridiagonal generator A of the semi-discrete equation dp/dt = A p.
///
/// The flow from node i+1 into node i is
/// J = (B(−z) p_{i+1} − B(z) p_i) / 2h with z = 2(Ψ_{i+1} − Ψ_i),
/// which vanishes exactly on p ∝ e^{-2Ψ}. Boundary fluxes are zero.
#[derive(Debug, Clone)]
pub struct FokkerPlanckOperator {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl FokkerPlanckOperator {
    pub fn new(pot: &Potential, grid: &Grid) -> Result<Self> {
        let n = grid.len();
        let h = grid.spacing();
        let psi: Vec<f64> = grid.nodes().map(|x| pot.evaluate(x)).collect();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n - 1 {
            let z = 2.0 * (psi[i + 1] - psi[i]);
            let (fwd, back) = (bernoulli(-z), bernoulli(z));
            if !(fwd.is_finite() && back.is_finite()) {
                return Err(Error::Numeric(format!(
                    "potential too steep for the grid near x = {}",
                    grid.node(i)
                )));
            }
            let wi = 2.0 * h * grid.weight(i);
            let wj = 2.0 * h * grid.weight(i + 1);
            // J enters node i and leaves node i+1
            upper[i] += fwd / wi;
            diag[i] -= back / wi;
            lower[i + 1] += back / wj;
            diag[i + 1] -= fwd / wj;
        }
        Ok(Self { lower, diag, upper })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, p: &[f64], out: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut v = self.diag[i] * p[i];
            if i > 0 {
                v += self.lower[i] * p[i - 1];
            }
            if i + 1 < n {
                v += self.upper[i] * p[i + 1];
            }
            out[i] = v;
        }
    }

    /// Largest |diagonal| entry; bounds the explicit half-step.
    pub fn max_rate(&self) -> f64 {
        self.diag.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// L¹ norm (trapezoid) of the discrete operator ½Δp + (Ψ' p)' applied to `slice`.
pub fn stationary_residual(pot: &Potential, slice: &[f64], grid: &Grid) -> Result<f64> {
    if slice.len() != grid.len() {
        return Err(Error::Shape(format!(
            "slice of length {} on a grid of {} points",
            slice.len(),
            grid.len()
        )));
    }
    let op = FokkerPlanckOperator::new(pot, grid)?;
    let mut out = vec![0.0; grid.len()];
    op.apply(slice, &mut out);
    Ok(out.iter().enumerate().map(|(i, v)| grid.weight(i) * v.abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Output step; internally subdivided when larger than the stable step.
    pub dt: f64,
    /// Store every k-th output step (t = start and t = end are always stored).
    #[serde(default = "default_stride")]
    pub store_every: usize,
}

fn default_stride() -> usize {
    1
}

impl SolverSettings {
    pub fn new(dt: f64) -> Self {
        Self { dt, store_every: 1 }
    }

    pub fn with_stride(mut self, store_every: usize) -> Self {
        self.store_every = store_every;
        self
    }
}

/// Crank-Nicolson integrator for the fitted operator, stepping a single state.
#[derive(Debug, Clone)]
pub struct FokkerPlanckSolver {
    grid: Grid,
    op: FokkerPlanckOperator,
    settings: SolverSettings,
    substeps: usize,
    sub_dt: f64,
    // forward-eliminated factors of (I − τ/2 A)
    pivots: Vec<f64>,
    multipliers: Vec<f64>,
    state: Vec<f64>,
    time: f64,
    steps_taken: usize,
    growth_limit: f64,
}

impl FokkerPlanckSolver {
    pub fn new(pot: &Potential, grid: &Grid, p0: &[f64], start_time: f64, settings: SolverSettings) -> Result<Self> {
        if !(settings.dt > 0.0 && settings.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", settings.dt)));
        }
        if settings.store_every == 0 {
            return Err(Error::Config("store stride must be at least 1".into()));
        }
        if p0.len() != grid.len() {
            return Err(Error::Shape(format!(
                "initial slice of length {} on a grid of {} points",
                p0.len(),
                grid.len()
            )));
        }
        if p0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("initial density must be finite and nonnegative".into()));
        }
        let mass = grid.integrate(p0);
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("initial density has mass {mass}, expected 1")));
        }
        let op = FokkerPlanckOperator::new(pot, grid)?;
        let h = grid.spacing();
        let stable = (h * h).min(2.0 / op.max_rate());
        let substeps = (settings.dt / stable * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let sub_dt = settings.dt / substeps as f64;

        let n = grid.len();
        let half = 0.5 * sub_dt;
        let mut pivots = vec![0.0; n];
        let mut multipliers = vec![0.0; n];
        pivots[0] = 1.0 - half * op.diag[0];
        for i in 1..n {
            let m = -half * op.lower[i] / pivots[i - 1];
            multipliers[i] = m;
            pivots[i] = 1.0 - half * op.diag[i] - m * (-half * op.upper[i - 1]);
            if !(pivots[i] > 0.0) {
                return Err(Error::Numeric(format!("implicit system singular at node {i}")));
            }
        }
        let growth_limit = MAX_GROWTH * p0.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            grid: grid.clone(),
            op,
            settings,
            substeps,
            sub_dt,
            pivots,
            multipliers,
            state: p0.to_vec(),
            time: start_time,
            steps_taken: 0,
            growth_limit,
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Internal steps per output step.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn internal_dt(&self) -> f64 {
        self.sub_dt
    }

    fn substep(&mut self, rhs: &mut [f64]) -> Result<()> {
        let n = self.state.len();
        let half = 0.5 * self.sub_dt;
        self.op.apply(&self.state, rhs);
        for i in 0..n {
            rhs[i] = self.state[i] + half * rhs[i];
        }
        for i in 1..n {
            rhs[i] -= self.multipliers[i] * rhs[i - 1];
        }
        let mut next = rhs[n - 1] / self.pivots[n - 1];
        self.state[n - 1] = next;
        for i in (0..n - 1).rev() {
            next = (rhs[i] + half * self.op.upper[i] * next) / self.pivots[i];
            self.state[i] = next;
        }
        self.steps_taken += 1;
        let step_time = self.time;
        let mut clipped = false;
        for v in self.state.iter_mut() {
            if !v.is_finite() {
                return Err(self.failure(step_time, "non-finite density value"));
            }
            if *v < 0.0 {
                if *v < -NEG_CLIP {
                    let msg = format!("negative density {v:e}");
                    return Err(Error::Solver {
                        step: self.steps_taken,
                        time: step_time,
                        reason: msg,
                    });
                }
                *v = 0.0;
                clipped = true;
            }
            if *v > self.growth_limit {
                return Err(self.failure(step_time, "density grew beyond 1e6 times its initial maximum"));
            }
        }
        if clipped {
            let mass = self.grid.integrate(&self.state);
            self.state.iter_mut().for_each(|v| *v /= mass);
        }
        Ok(())
    }

    fn failure(&self, time: f64, reason: &str) -> Error {
        Error::Solver {
            step: self.steps_taken,
            time,
            reason: reason.to_string(),
        }
    }

    /// Integrates over `horizon` (a whole number of output steps) and returns
    /// the stored slices, starting with the current state.
    pub fn advance(&mut self, horizon: f64) -> Result<DensityField> {
        let dt = self.settings.dt;
        let steps = (horizon / dt).round();
        if !(horizon > 0.0) || steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {horizon} must be a positive multiple of dt = {dt}"
            )));
        }
        let steps = steps as usize;
        let start = self.time;
        let mut times = vec![start];
        let mut slices = vec![self.state.clone()];
        let mut rhs = vec![0.0; self.state.len()];
        for k in 1..=steps {
            for _ in 0..self.substeps {
                self.substep(&mut rhs)?;
            }
            self.time = start + k as f64 * dt;
            if k % self.settings.store_every == 0 || k == steps {
                times.push(self.time);
                slices.push(self.state.clone());
            }
        }
        DensityField::new(self.grid.clone(), times, slices)
    }
}

/// Solves ∂p = ½Δp + (Ψ' p)' on `grid` from `p0` over [0, horizon].
pub fn solve_fokker_planck(
    pot: &Potential,
    p0: &[f64],
    grid: &Grid,
    horizon: f64,
    settings: SolverSettings,
) -> Result<DensityField> {
    FokkerPlanckSolver::new(pot, grid, p0, 0.0, settings)?.advance(horizon)
}
