//! Euler-Maruyama particle ensembles: the forward Langevin dynamics, the
//! controlled time reversal driven by a score field, and the second-stage
//! forward dynamics driven by Λ.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::entropy::mean_and_se;
use crate::error::{Error, Result};
use crate::grid::{Grid, Interval, TIME_MATCH_TOL};
use crate::io::{csv_record, format_float};
use crate::potential::Potential;
use crate::score::{LambdaField, ScoreField};

/// Largest admissible |δ| for perturbed policies.
pub const MAX_PERTURBATION: f64 = 10.0;

/// The noise stream of particle `index` under master seed `seed`.
pub fn particle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Derives an independent master seed for a named sub-computation.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    // splitmix64 over the seed xor an FNV-1a hash of the label
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reversed,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Reversed => "backward",
        })
    }
}

/// A bounded deviation δ(u, x) added to the optimal control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    Constant {
        c: f64,
    },
    Sine {
        amplitude: f64,
    },
    Linear {
        slope: f64,
    },
    /// c·u, growing with the time to go.
    Ramp {
        c: f64,
    },
}

impl Perturbation {
    pub fn eval(&self, time_to_go: f64, x: f64) -> f64 {
        match *self {
            Perturbation::Constant { c } => c,
            Perturbation::Sine { amplitude } => amplitude * x.sin(),
            Perturbation::Linear { slope } => slope * x,
            Perturbation::Ramp { c } => c * time_to_go,
        }
    }

    /// sup |δ| over the domain and time horizon.
    pub fn bound(&self, domain: Interval, horizon: f64) -> f64 {
        match *self {
            Perturbation::Constant { c } => c.abs(),
            Perturbation::Sine { amplitude } => amplitude.abs(),
            Perturbation::Linear { slope } => slope.abs() * domain.lower.abs().max(domain.upper.abs()),
            Perturbation::Ramp { c } => c.abs() * horizon,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Perturbation::Constant { c } => format!("constant({c})"),
            Perturbation::Sine { amplitude } => format!("sine({amplitude})"),
            Perturbation::Linear { slope } => format!("linear({slope})"),
            Perturbation::Ramp { c } => format!("ramp({c})"),
        }
    }
}

pub type ControlCallback = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// The control γ (or β) as a function of (time to go, position).
#[derive(Clone)]
pub enum ControlPolicy {
    Zero,
    /// γ* = −∇L.
    ScoreOptimal,
    /// β* = −∇Λ.
    LambdaOptimal,
    /// The optimal control plus a bounded deviation.
    Perturbed(Perturbation),
    Custom {
        label: String,
        callback: ControlCallback,
        bound: f64,
    },
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl ControlPolicy {
    pub fn label(&self) -> String {
        match self {
            ControlPolicy::Zero => "zero".into(),
            ControlPolicy::ScoreOptimal => "score_optimal".into(),
            ControlPolicy::LambdaOptimal => "lambda_optimal".into(),
            ControlPolicy::Perturbed(p) => format!("optimal+{}", p.label()),
            ControlPolicy::Custom { label, .. } => label.clone(),
        }
    }

    pub fn is_optimal(&self) -> bool {
        matches!(self, ControlPolicy::ScoreOptimal | ControlPolicy::LambdaOptimal)
    }
}

/// Serializable policy description used by configs and the iteration driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Zero,
    Optimal,
    Constant { c: f64 },
    Sine { amplitude: f64 },
    Linear { slope: f64 },
    Ramp { c: f64 },
}

impl PolicySpec {
    /// The policy for a first-stage (`second = false`) or second-stage run.
    pub fn to_policy(self, second: bool) -> ControlPolicy {
        let optimal = if second {
            ControlPolicy::LambdaOptimal
        } else {
            ControlPolicy::ScoreOptimal
        };
        match self {
            PolicySpec::Zero => ControlPolicy::Zero,
            PolicySpec::Optimal => optimal,
            PolicySpec::Constant { c } => ControlPolicy::Perturbed(Perturbation::Constant { c }),
            PolicySpec::Sine { amplitude } => ControlPolicy::Perturbed(Perturbation::Sine { amplitude }),
            PolicySpec::Linear { slope } => ControlPolicy::Perturbed(Perturbation::Linear { slope }),
            PolicySpec::Ramp { c } => ControlPolicy::Perturbed(Perturbation::Ramp { c }),
        }
    }
}

/// Exact sampling from the piecewise-linear interpolant of a nonnegative slice.
#[derive(Debug, Clone)]
pub struct SliceSampler {
    grid: Grid,
    values: Vec<f64>,
    cdf: Vec<f64>,
}

impl SliceSampler {
    pub fn new(grid: &Grid, values: &[f64]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "slice of length {} on a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Numeric(
                "sampling slice has negative or non-finite values".into(),
            ));
        }
        let h = grid.spacing();
        let mut cdf = Vec::with_capacity(values.len());
        cdf.push(0.0);
        for w in values.windows(2) {
            let last = *cdf.last().expect("non-empty");
            cdf.push(last + 0.5 * h * (w[0] + w[1]));
        }
        let total = *cdf.last().expect("non-empty");
        if !(total > 0.0) {
            return Err(Error::Numeric("sampling slice has zero mass".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            values: values.to_vec(),
            cdf,
        })
    }

    /// Inverse CDF at u ∈ [0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        let total = *self.cdf.last().expect("non-empty");
        let target = u * total;
        let j = (self.cdf.partition_point(|&c| c <= target).max(1) - 1).min(self.values.len() - 2);
        let h = self.grid.spacing();
        let r = target - self.cdf[j];
        let (a, b) = (self.values[j], self.values[j + 1]);
        // solve a·y + (b − a)/(2h)·y² = r for y ∈ [0, h]
        let k = (b - a) / (2.0 * h);
        let y = if k.abs() < 1e-300 || (k * r).abs() < 1e-14 * a * a {
            if a > 0.0 {
                r / a
            } else {
                0.0
            }
        } else {
            2.0 * r / (a + (a * a + 4.0 * k * r).max(0.0).sqrt())
        };
        (self.grid.node(j) + y.clamp(0.0, h)).min(self.grid.upper())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }
}

/// One draw from `values` on the stream of particle `index`.
pub fn sample_from_slice(grid: &Grid, values: &[f64], seed: u64, index: usize) -> Result<f64> {
    let sampler = SliceSampler::new(grid, values)?;
    Ok(sampler.sample(&mut particle_rng(seed, index)))
}

/// Initial positions of an ensemble.
#[derive(Debug, Clone)]
pub enum InitialState {
    Point(f64),
    /// One position per particle, e.g. the endpoints of an earlier ensemble.
    Samples(Vec<f64>),
    /// Inverse-CDF draws from a grid density.
    Slice {
        grid: Grid,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub particles: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    /// Record every k-th step; `None` records only the two ends.
    pub record_every: Option<usize>,
    /// Test hook: when false the Brownian increments are zero.
    pub noise: bool,
    /// Reflecting boundary for the forward dynamics.
    pub domain: Option<Interval>,
}

impl SimulationOptions {
    pub fn new(particles: usize, horizon: f64, dt: f64, seed: u64) -> Self {
        Self {
            particles,
            horizon,
            dt,
            seed,
            record_every: None,
            noise: true,
            domain: None,
        }
    }

    pub fn record_every(mut self, k: usize) -> Self {
        self.record_every = Some(k);
        self
    }

    pub fn without_noise(mut self) -> Self {
        self.noise = false;
        self
    }

    pub fn with_domain(mut self, domain: Interval) -> Self {
        self.domain = Some(domain);
        self
    }

    fn steps(&self) -> Result<usize> {
        if self.particles == 0 {
            return Err(Error::Config("ensemble needs at least one particle".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt) {
            return Err(Error::Config(format!(
                "horizon {} must be at least dt = {}",
                self.horizon, self.dt
            )));
        }
        if self.record_every == Some(0) {
            return Err(Error::Config("record stride must be at least 1".into()));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {} must be a multiple of dt = {}",
                self.horizon, self.dt
            )));
        }
        Ok(n as usize)
    }
}

/// N trajectories recorded at a subset of steps, with their Girsanov weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub direction: Direction,
    pub policy: String,
    pub particles: usize,
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    /// Field time corresponding to zero time-to-go (controlled runs only).
    pub anchor: Option<f64>,
    /// Elapsed simulation time of each record.
    pub times: Vec<f64>,
    /// `states[r][i]`: position of particle i at record r.
    pub states: Vec<Vec<f64>>,
    /// log dP/dP^γ per record: the weight that maps the controlled paths back
    /// to the uncontrolled law (≡ 0 when γ ≡ 0).
    pub log_weights: Vec<Vec<f64>>,
    /// ½∫|γ|² per particle.
    pub energy: Vec<f64>,
    /// ½∫|∇L + γ|² per particle.
    pub gap_density: Vec<f64>,
    pub clip_events: u64,
    pub evaluations: u64,
}

impl PathEnsemble {
    pub fn record_index(&self, t: f64) -> Result<usize> {
        let tol = TIME_MATCH_TOL * t.abs().max(1.0);
        self.times
            .iter()
            .position(|s| (s - t).abs() <= tol)
            .ok_or_else(|| Error::Coverage {
                time: t,
                detail: "not a recorded time of the ensemble".into(),
            })
    }

    pub fn states_at(&self, t: f64) -> Result<&[f64]> {
        Ok(&self.states[self.record_index(t)?])
    }

    pub fn final_states(&self) -> &[f64] {
        self.states.last().expect("non-empty")
    }

    pub fn final_log_weights(&self) -> &[f64] {
        self.log_weights.last().expect("non-empty")
    }

    /// Share of score evaluations that hit the clip bound.
    pub fn clip_rate(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.clip_events as f64 / self.evaluations as f64
        }
    }

    /// Mean and standard error of exp(log_weight) at the final record.
    pub fn weight_mean(&self) -> (f64, f64) {
        let w: Vec<f64> = self.final_log_weights().iter().map(|l| l.exp()).collect();
        mean_and_se(&w)
    }

    /// Kish effective sample size of the final weights.
    pub fn effective_sample_size(&self) -> f64 {
        let w: Vec<f64> = self.final_log_weights().iter().map(|l| l.exp()).collect();
        let s: f64 = w.iter().sum();
        let s2: f64 = w.iter().map(|v| v * v).sum();
        s * s / s2
    }

    pub fn summary(&self, grid: &Grid) -> Result<EnsembleSummary> {
        let mut histograms = Vec::with_capacity(self.times.len());
        for t in &self.times {
            histograms.push(empirical_marginal(self, *t, grid, false)?);
        }
        let (weight_mean, weight_se) = self.weight_mean();
        let lw = self.final_log_weights();
        Ok(EnsembleSummary {
            direction: self.direction,
            policy: self.policy.clone(),
            particles: self.particles,
            seed: self.seed,
            dt: self.dt,
            horizon: self.horizon,
            times: self.times.clone(),
            grid: grid.clone(),
            histograms,
            weight_mean,
            weight_se,
            log_weight_min: lw.iter().cloned().fold(f64::INFINITY, f64::min),
            log_weight_max: lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            effective_sample_size: self.effective_sample_size(),
            clip_rate: self.clip_rate(),
        })
    }

    /// CSV with columns `particle,t,x,log_weight`.
    pub fn paths_csv(&self) -> String {
        let mut out = String::from("particle,t,x,log_weight\n");
        for i in 0..self.particles {
            for (r, t) in self.times.iter().enumerate() {
                out.push_str(&csv_record([
                    i.to_string(),
                    format_float(*t),
                    format_float(self.states[r][i]),
                    format_float(self.log_weights[r][i]),
                ]));
            }
        }
        out
    }
}

/// JSON-serializable ensemble digest (no full paths).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub direction: Direction,
    pub policy: String,
    pub particles: usize,
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub grid: Grid,
    pub histograms: Vec<Vec<f64>>,
    pub weight_mean: f64,
    pub weight_se: f64,
    pub log_weight_min: f64,
    pub log_weight_max: f64,
    pub effective_sample_size: f64,
    pub clip_rate: f64,
}

fn reflect(x: f64, domain: Option<Interval>) -> f64 {
    match domain {
        None => x,
        Some(d) => {
            let y = if x > d.upper {
                2.0 * d.upper - x
            } else if x < d.lower {
                2.0 * d.lower - x
            } else {
                x
            };
            y.clamp(d.lower, d.upper)
        }
    }
}

struct ParticlePath {
    states: Vec<f64>,
    log_weights: Vec<f64>,
    energy: f64,
    gap: f64,
    clips: u64,
}

enum Control<'a> {
    None,
    Field {
        field: &'a ScoreField,
        anchor: f64,
        policy: &'a ControlPolicy,
    },
}

enum Start<'a> {
    Point(f64),
    Samples(&'a [f64]),
    Sampler(SliceSampler),
}

impl<'a> Start<'a> {
    fn new(init: &'a InitialState, particles: usize) -> Result<Self> {
        Ok(match init {
            InitialState::Point(x) => Start::Point(*x),
            InitialState::Samples(s) => {
                if s.len() != particles {
                    return Err(Error::Shape(format!(
                        "{} initial samples for {particles} particles",
                        s.len()
                    )));
                }
                Start::Samples(s)
            }
            InitialState::Slice { grid, values } => Start::Sampler(SliceSampler::new(grid, values)?),
        })
    }

    fn draw(&self, i: usize, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Start::Point(x) => *x,
            Start::Samples(s) => s[i],
            Start::Sampler(sampler) => sampler.sample(rng),
        }
    }
}

struct Integrator<'a> {
    pot: &'a Potential,
    control: Control<'a>,
    start: Start<'a>,
    opts: &'a SimulationOptions,
    domain: Option<Interval>,
    steps: usize,
    stride: usize,
}

impl Integrator<'_> {
    fn run_particle(&self, i: usize) -> Result<ParticlePath> {
        let opts = self.opts;
        let dt = opts.dt;
        let sqdt = dt.sqrt();
        let mut rng = particle_rng(opts.seed, i);
        let mut x = self.start.draw(i, &mut rng);
        if !x.is_finite() {
            return Err(Error::Simulation {
                particle: i,
                step: 0,
                reason: "non-finite initial state".into(),
            });
        }
        let records = self.steps / self.stride + 1 + usize::from(self.steps % self.stride != 0);
        let mut path = ParticlePath {
            states: Vec::with_capacity(records),
            log_weights: Vec::with_capacity(records),
            energy: 0.0,
            gap: 0.0,
            clips: 0,
        };
        let mut log_w = 0.0;
        path.states.push(x);
        path.log_weights.push(0.0);
        for k in 0..self.steps {
            let xi: f64 = if opts.noise { rng.sample(StandardNormal) } else { 0.0 };
            let force = -self.pot.gradient(x);
            let drift = match &self.control {
                Control::None => force,
                Control::Field { field, anchor, policy } => {
                    let u = opts.horizon - k as f64 * dt;
                    let (g, clipped) = field.eval_score_clipped(anchor + u, x);
                    path.clips += u64::from(clipped);
                    let gamma = match policy {
                        ControlPolicy::Zero => 0.0,
                        ControlPolicy::ScoreOptimal | ControlPolicy::LambdaOptimal => -g,
                        ControlPolicy::Perturbed(p) => -g + p.eval(u, x),
                        ControlPolicy::Custom { callback, bound, .. } => {
                            let v = callback(u, x);
                            if !(v.is_finite() && v.abs() <= *bound) {
                                return Err(Error::Simulation {
                                    particle: i,
                                    step: k,
                                    reason: format!("control value {v} violates bound {bound}"),
                                });
                            }
                            v
                        }
                    };
                    if gamma != 0.0 {
                        path.energy += 0.5 * gamma * gamma * dt;
                        log_w += -gamma * sqdt * xi - 0.5 * gamma * gamma * dt;
                    }
                    let residual = g + gamma;
                    path.gap += 0.5 * residual * residual * dt;
                    if policy.is_optimal() {
                        force
                    } else {
                        residual + force
                    }
                }
            };
            x = reflect(x + drift * dt + sqdt * xi, self.domain);
            if !(x.is_finite() && log_w.is_finite()) {
                return Err(Error::Simulation {
                    particle: i,
                    step: k + 1,
                    reason: format!("non-finite state {x} or log weight {log_w}"),
                });
            }
            if (k + 1) % self.stride == 0 || k + 1 == self.steps {
                path.states.push(x);
                path.log_weights.push(log_w);
            }
        }
        Ok(path)
    }

    fn run(&self, direction: Direction, policy: String, anchor: Option<f64>) -> Result<PathEnsemble> {
        let n = self.opts.particles;
        #[cfg(feature = "parallel")]
        let paths: Vec<ParticlePath> = {
            use rayon::prelude::*;
            (0..n)
                .into_par_iter()
                .map(|i| self.run_particle(i))
                .collect::<Result<Vec<_>>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let paths: Vec<ParticlePath> = (0..n).map(|i| self.run_particle(i)).collect::<Result<Vec<_>>>()?;

        let dt = self.opts.dt;
        let mut times: Vec<f64> = (0..=self.steps)
            .filter(|k| k % self.stride == 0)
            .map(|k| k as f64 * dt)
            .collect();
        if self.steps % self.stride != 0 {
            times.push(self.steps as f64 * dt);
        }
        let records = times.len();
        let mut states = vec![Vec::with_capacity(n); records];
        let mut log_weights = vec![Vec::with_capacity(n); records];
        let mut energy = Vec::with_capacity(n);
        let mut gap_density = Vec::with_capacity(n);
        let mut clip_events = 0;
        for p in paths {
            for r in 0..records {
                states[r].push(p.states[r]);
                log_weights[r].push(p.log_weights[r]);
            }
            energy.push(p.energy);
            gap_density.push(p.gap);
            clip_events += p.clips;
        }
        let evaluations = match self.control {
            Control::None => 0,
            Control::Field { .. } => (n * self.steps) as u64,
        };
        Ok(PathEnsemble {
            direction,
            policy,
            particles: n,
            seed: self.opts.seed,
            dt,
            horizon: self.opts.horizon,
            anchor,
            times,
            states,
            log_weights,
            energy,
            gap_density,
            clip_events,
            evaluations,
        })
    }
}

fn integrator<'a>(
    pot: &'a Potential,
    control: Control<'a>,
    init: &'a InitialState,
    opts: &'a SimulationOptions,
    domain: Option<Interval>,
) -> Result<Integrator<'a>> {
    let steps = opts.steps()?;
    let stride = opts.record_every.unwrap_or(steps).min(steps);
    Ok(Integrator {
        pot,
        control,
        start: Start::new(init, opts.particles)?,
        opts,
        domain,
        steps,
        stride,
    })
}

/// dX = −Ψ'(X) dt + dW. Reflects at `opts.domain` (or at the grid of a slice
/// initial state when no domain is given).
pub fn simulate_forward(pot: &Potential, init: &InitialState, opts: &SimulationOptions) -> Result<PathEnsemble> {
    let domain = opts.domain.or(match init {
        InitialState::Slice { grid, .. } => Some(grid.domain()),
        _ => None,
    });
    integrator(pot, Control::None, init, opts, domain)?.run(Direction::Forward, "uncontrolled".into(), None)
}

fn check_policy(policy: &ControlPolicy, domain: Interval, horizon: f64, second: bool) -> Result<()> {
    match policy {
        ControlPolicy::ScoreOptimal if second => Err(Error::Config(
            "second-stage runs use lambda_optimal, not score_optimal".into(),
        )),
        ControlPolicy::LambdaOptimal if !second => Err(Error::Config(
            "reversed runs use score_optimal, not lambda_optimal".into(),
        )),
        ControlPolicy::Perturbed(p) if p.bound(domain, horizon) > MAX_PERTURBATION => Err(Error::Config(format!(
            "perturbation {} exceeds |δ| ≤ {MAX_PERTURBATION}",
            p.label()
        ))),
        ControlPolicy::Custom { bound, .. } if !(bound.is_finite() && *bound >= 0.0) => {
            Err(Error::Config("custom control needs a finite bound".into()))
        }
        _ => Ok(()),
    }
}

/// The reversed dynamics from P(T):
/// dX̄ = (∇L(T−s, X̄) + γ − Ψ'(X̄)) ds + dW̄, over s ∈ [0, T] with T = `opts.horizon`.
/// The score is read at field time `sf.start_time() + (T − s)`.
pub fn simulate_reversed(
    pot: &Potential,
    sf: &ScoreField,
    policy: &ControlPolicy,
    init: &InitialState,
    opts: &SimulationOptions,
) -> Result<PathEnsemble> {
    let anchor = sf.start_time();
    sf.require_cover(anchor, anchor + opts.horizon)?;
    check_policy(policy, sf.grid().domain(), opts.horizon, false)?;
    let control = Control::Field {
        field: sf,
        anchor,
        policy,
    };
    integrator(pot, control, init, opts, Some(sf.grid().domain()))?.run(
        Direction::Reversed,
        policy.label(),
        Some(anchor),
    )
}

/// The second-stage dynamics from P(2T):
/// dX = (∇Λ(T−t, X) + β − Ψ'(X)) dt + dW over t ∈ [0, T].
pub fn simulate_second_forward(
    pot: &Potential,
    lf: &LambdaField,
    policy: &ControlPolicy,
    init: &InitialState,
    opts: &SimulationOptions,
) -> Result<PathEnsemble> {
    let sf = lf.source();
    let anchor = lf.offset();
    sf.require_cover(anchor, anchor + opts.horizon)?;
    check_policy(policy, sf.grid().domain(), opts.horizon, true)?;
    let control = Control::Field {
        field: sf,
        anchor,
        policy,
    };
    integrator(pot, control, init, opts, Some(sf.grid().domain()))?.run(
        Direction::Forward,
        policy.label(),
        Some(anchor),
    )
}

/// Node masses of the ensemble at record time `t`, binned to the nearest node,
/// optionally weighted by exp(log_weight) (self-normalized). Sums to 1.
pub fn empirical_masses(ens: &PathEnsemble, t: f64, grid: &Grid, weighted: bool) -> Result<Vec<f64>> {
    let r = ens.record_index(t)?;
    let mut masses = vec![0.0; grid.len()];
    if weighted {
        let lw = &ens.log_weights[r];
        let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (x, l) in ens.states[r].iter().zip(lw) {
            let w = (l - top).exp();
            masses[grid.nearest(*x)] += w;
            total += w;
        }
        masses.iter_mut().for_each(|m| *m /= total);
    } else {
        for x in &ens.states[r] {
            masses[grid.nearest(*x)] += 1.0;
        }
        let total = ens.particles as f64;
        masses.iter_mut().for_each(|m| *m /= total);
    }
    Ok(masses)
}

/// Histogram density of the ensemble at record time `t` on `grid`;
/// integrates to 1 under the trapezoid rule.
pub fn empirical_marginal(ens: &PathEnsemble, t: f64, grid: &Grid, weighted: bool) -> Result<Vec<f64>> {
    let masses = empirical_masses(ens, t, grid, weighted)?;
    Ok(masses.iter().enumerate().map(|(i, m)| m / grid.weight(i)).collect())
}
