//! Browser bindings. Each export takes plain numbers and returns a JSON string
//! that `www/index.html` draws on a canvas.

use entroflow::control::expected_cost_reversed;
use entroflow::entropy::{dissipation_check, relative_entropy, total_variation};
use entroflow::grid::{resample_slice, solve_fokker_planck};
use entroflow::potential::gibbs_on_grid;
use entroflow::score::DEFAULT_FLOOR;
use entroflow::sde::{empirical_marginal, simulate_reversed, ControlPolicy, InitialState, SimulationOptions};
use entroflow::{
    build_score, builtin_potential, DensityField, GibbsMeasure, Grid, InitialDensity, Potential, SolverSettings,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub type Result<T> = std::result::Result<T, entroflow::Error>;

#[derive(Debug, Clone, Copy)]
pub struct Scenario {
    pub double_well: bool,
    pub mean: f64,
    pub variance: f64,
    pub horizon: f64,
    pub resolution: usize,
}

struct Flow {
    pot: Potential,
    gibbs: GibbsMeasure,
    field: DensityField,
}

impl Scenario {
    fn domain(&self) -> (f64, f64) {
        if self.double_well {
            (-3.0, 3.0)
        } else {
            (-8.0, 8.0)
        }
    }

    fn dt(&self) -> f64 {
        self.horizon / (self.horizon / 1e-3).round().max(1.0)
    }

    fn flow(&self, span: f64) -> Result<Flow> {
        let (lo, hi) = self.domain();
        let grid = Grid::new(lo, hi, self.resolution)?;
        let pot = if self.double_well {
            builtin_potential("double_well", &[1.0])?
        } else {
            builtin_potential("quadratic", &[])?
        };
        let gibbs = gibbs_on_grid(&pot, &grid)?;
        let p0 = InitialDensity::Gaussian {
            mean: self.mean,
            variance: self.variance,
        }
        .to_slice(&grid, None)?;
        let field = solve_fokker_planck(&pot, &p0, &grid, span, SolverSettings::new(self.dt()))?;
        Ok(Flow { pot, gibbs, field })
    }
}

#[derive(Debug, Serialize)]
pub struct Frames {
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub times: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
}

/// Density snapshots p(t, ·) at `count` evenly spaced times in [0, T].
pub fn flow_frames(s: Scenario, count: usize) -> Result<Frames> {
    let f = s.flow(s.horizon)?;
    let n = f.field.len();
    let count = count.clamp(2, n);
    let picks: Vec<usize> = (0..count).map(|k| k * (n - 1) / (count - 1)).collect();
    Ok(Frames {
        x: f.field.grid().nodes().collect(),
        q: f.gibbs.node_density().to_vec(),
        times: picks.iter().map(|&k| f.field.times()[k]).collect(),
        frames: picks.iter().map(|&k| f.field.slices()[k].clone()).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct EntropyCurve {
    pub times: Vec<f64>,
    pub entropy: Vec<f64>,
    pub fisher: Vec<f64>,
    /// 2 TV², which lies below H.
    pub pinsker: Vec<f64>,
    /// e^{-2κt} H(0) when the potential is uniformly convex.
    pub exponential: Option<Vec<f64>>,
}

/// H(P(t)|Q), the Fisher information and the two lower/upper envelopes.
pub fn entropy_curve(s: Scenario) -> Result<EntropyCurve> {
    let f = s.flow(s.horizon)?;
    let sf = build_score(&f.field, &f.gibbs, DEFAULT_FLOOR)?;
    let report = dissipation_check(&f.field, &sf, &f.gibbs, 0.0)?;
    let h0 = relative_entropy(&f.field.slices()[0], &f.gibbs)?;
    let exponential = f
        .pot
        .hessian_lower_bound()
        .filter(|k| *k > 0.0)
        .map(|k| report.times.iter().map(|t| (-2.0 * k * t).exp() * h0).collect());
    Ok(EntropyCurve {
        pinsker: report.tv.iter().map(|tv| 2.0 * tv * tv).collect(),
        times: report.times,
        entropy: report.entropy,
        fisher: report.fisher,
        exponential,
    })
}

#[derive(Debug, Serialize)]
pub struct Reincarnation {
    pub centers: Vec<f64>,
    /// Histogram density of the reversed optimally controlled ensemble after time T.
    pub reversed: Vec<f64>,
    /// P(2T) averaged over the same bins.
    pub forward: Vec<f64>,
    pub tv: f64,
    pub cost: f64,
    pub cost_se: f64,
    pub entropy: f64,
}

/// Runs the score-controlled reversal from P(T) and compares where it lands with P(2T).
pub fn reincarnation(s: Scenario, particles: usize, bins: usize, seed: u64) -> Result<Reincarnation> {
    let f = s.flow(2.0 * s.horizon)?;
    let sf = build_score(&f.field, &f.gibbs, DEFAULT_FLOOR)?;
    let init = InitialState::Slice {
        grid: f.field.grid().clone(),
        values: f.field.slice_at(s.horizon)?.to_vec(),
    };
    let opts = SimulationOptions::new(particles, s.horizon, s.dt(), seed);
    let ens = simulate_reversed(&f.pot, &sf, &ControlPolicy::ScoreOptimal, &init, &opts)?;
    let cost = expected_cost_reversed(&ens, &sf, &f.gibbs)?;
    let (lo, hi) = s.domain();
    let coarse = Grid::new(lo, hi, bins.max(16))?;
    let reversed = empirical_marginal(&ens, s.horizon, &coarse, false)?;
    let forward = resample_slice(f.field.grid(), f.field.last(), &coarse)?;
    Ok(Reincarnation {
        centers: coarse.nodes().collect(),
        tv: total_variation(&coarse, &reversed, &forward)?,
        reversed,
        forward,
        cost: cost.total,
        cost_se: cost.std_error,
        entropy: cost.reference_entropy,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("serializable"))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

fn scenario(double_well: bool, mean: f64, variance: f64, horizon: f64) -> Scenario {
    Scenario {
        double_well,
        mean,
        variance,
        horizon,
        resolution: 512,
    }
}

#[wasm_bindgen]
pub fn frames(
    double_well: bool,
    mean: f64,
    variance: f64,
    horizon: f64,
    count: usize,
) -> std::result::Result<String, JsValue> {
    to_js(flow_frames(scenario(double_well, mean, variance, horizon), count))
}

#[wasm_bindgen]
pub fn entropy(double_well: bool, mean: f64, variance: f64, horizon: f64) -> std::result::Result<String, JsValue> {
    to_js(entropy_curve(scenario(double_well, mean, variance, horizon)))
}

#[wasm_bindgen]
pub fn reversal(
    double_well: bool,
    mean: f64,
    variance: f64,
    horizon: f64,
    particles: usize,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(reincarnation(
        scenario(double_well, mean, variance, horizon),
        particles,
        96,
        u64::from(seed),
    ))
}
