//! Likelihood ratio ℓ = p/q, its logarithm L and the score ∇L on the grid,
//! plus the second-stage view Λ(s,·) = L(T+s,·).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{clamped_bracket, DensityField, FieldHeader, Grid, TIME_MATCH_TOL};
use crate::io::{format_float, parse_float};
use crate::potential::GibbsMeasure;

pub const DEFAULT_FLOOR: f64 = 1e-14;
pub const DEFAULT_CLIP: f64 = 1e3;

#[derive(Debug)]
struct ScoreData {
    grid: Grid,
    times: Vec<f64>,
    log_ratio: Vec<Vec<f64>>,
    score: Vec<Vec<f64>>,
    floor: f64,
    floored_nodes: usize,
    log_q: Vec<f64>,
}

/// L and ∇L at the stored times of a density field. Cloning shares storage.
#[derive(Debug, Clone)]
pub struct ScoreField {
    data: Arc<ScoreData>,
    clip_max: f64,
}

/// Derivative of node values: central differences inside, second-order
/// one-sided differences at the two ends.
pub fn node_derivative(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (values[i + 1] - values[i - 1]) / (2.0 * h);
    }
    d[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * h);
    d[n - 1] = (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * h);
    d
}

/// Builds L = log(max(p, εq)/q) and ∇L for every stored slice of `field`.
pub fn build_score(field: &DensityField, gibbs: &GibbsMeasure, floor: f64) -> Result<ScoreField> {
    gibbs.require_probability()?;
    field.grid().check_same(gibbs.grid())?;
    if !(1e-300..=1e-8).contains(&floor) {
        return Err(Error::Config(format!("floor {floor} outside [1e-300, 1e-8]")));
    }
    let grid = field.grid().clone();
    let h = grid.spacing();
    let log_q: Vec<f64> = (0..grid.len()).map(|i| gibbs.node_log_density(i)).collect();
    let log_floor = floor.ln();
    let mut floored_nodes = 0;
    let mut log_ratio = Vec::with_capacity(field.len());
    let mut score = Vec::with_capacity(field.len());
    for slice in field.slices() {
        let l: Vec<f64> = slice
            .iter()
            .zip(&log_q)
            .map(|(&p, &lq)| {
                let lp = p.ln();
                if lp < lq + log_floor {
                    floored_nodes += 1;
                    log_floor
                } else {
                    lp - lq
                }
            })
            .collect();
        score.push(node_derivative(&l, h));
        log_ratio.push(l);
    }
    Ok(ScoreField {
        data: Arc::new(ScoreData {
            grid,
            times: field.times().to_vec(),
            log_ratio,
            score,
            floor,
            floored_nodes,
            log_q,
        }),
        clip_max: DEFAULT_CLIP,
    })
}

impl ScoreField {
    pub fn with_clip(mut self, clip_max: f64) -> Self {
        self.clip_max = clip_max;
        self
    }

    pub fn clip_max(&self) -> f64 {
        self.clip_max
    }

    pub fn grid(&self) -> &Grid {
        &self.data.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.data.times
    }

    pub fn start_time(&self) -> f64 {
        self.data.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.data.times.last().expect("non-empty")
    }

    pub fn floor(&self) -> f64 {
        self.data.floor
    }

    /// Number of (time, node) pairs where p fell below ε·q.
    pub fn floored_nodes(&self) -> usize {
        self.data.floored_nodes
    }

    pub fn log_ratio_slices(&self) -> &[Vec<f64>] {
        &self.data.log_ratio
    }

    pub fn score_slices(&self) -> &[Vec<f64>] {
        &self.data.score
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = TIME_MATCH_TOL * t.abs().max(1.0);
        self.data
            .times
            .iter()
            .position(|s| (s - t).abs() <= tol)
            .ok_or_else(|| Error::Coverage {
                time: t,
                detail: format!(
                    "not a stored time of the score field [{}, {}]",
                    self.start_time(),
                    self.end_time()
                ),
            })
    }

    /// Fails unless [from, to] lies within the stored time range.
    pub fn require_cover(&self, from: f64, to: f64) -> Result<()> {
        for t in [from, to] {
            let tol = TIME_MATCH_TOL * t.abs().max(1.0);
            if t < self.start_time() - tol || t > self.end_time() + tol {
                return Err(Error::Coverage {
                    time: t,
                    detail: format!("score field covers [{}, {}]", self.start_time(), self.end_time()),
                });
            }
        }
        Ok(())
    }

    fn bilinear(&self, slices: &[Vec<f64>], t: f64, x: f64) -> f64 {
        let (j, w) = clamped_bracket(&self.data.times, t);
        let (i, f) = self.data.grid.locate(x);
        let at = |s: &[f64]| s[i] * (1.0 - f) + s[i + 1] * f;
        let a = at(&slices[j]);
        if w == 0.0 {
            a
        } else {
            a * (1.0 - w) + at(&slices[j + 1]) * w
        }
    }

    /// ∇L(t,x) by bilinear interpolation (t and x clamped to the stored
    /// range) and the flag telling whether the clip bound was hit.
    pub fn eval_score_clipped(&self, t: f64, x: f64) -> (f64, bool) {
        let v = self.bilinear(&self.data.score, t, x);
        if v.abs() > self.clip_max {
            (v.signum() * self.clip_max, true)
        } else {
            (v, false)
        }
    }

    pub fn eval_score(&self, t: f64, x: f64) -> f64 {
        self.eval_score_clipped(t, x).0
    }

    /// L(t,x) by bilinear interpolation with clamping.
    pub fn eval_log_ratio(&self, t: f64, x: f64) -> f64 {
        self.bilinear(&self.data.log_ratio, t, x)
    }

    /// p(t,·) = e^L q at the nodes of stored time index `k` (floored values included).
    pub fn density_at(&self, k: usize) -> Vec<f64> {
        self.data.log_ratio[k]
            .iter()
            .zip(&self.data.log_q)
            .map(|(l, lq)| (l + lq).exp())
            .collect()
    }

    /// H(P(t)|Q) = ∫ e^L q L at a stored time.
    pub fn entropy_at(&self, t: f64) -> Result<f64> {
        let k = self.index_of(t)?;
        let grid = &self.data.grid;
        let p = self.density_at(k);
        Ok(p.iter()
            .zip(&self.data.log_ratio[k])
            .enumerate()
            .map(|(i, (p, l))| grid.weight(i) * p * l)
            .sum())
    }

    /// Λ(s,·) = L(offset + s,·) on the same storage.
    pub fn lambda(&self, offset: f64) -> Result<LambdaField> {
        self.index_of(offset)?;
        Ok(LambdaField {
            field: self.clone(),
            offset,
        })
    }

    /// Whether two score fields share their node storage.
    pub fn shares_storage(&self, other: &ScoreField) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// CSV with columns `t,x,L,dL`.
    pub fn to_csv(&self) -> String {
        let grid = &self.data.grid;
        let mut out = String::from("t,x,L,dL\n");
        for (k, t) in self.data.times.iter().enumerate() {
            let ts = format_float(*t);
            for i in 0..grid.len() {
                out.push_str(&format!(
                    "{ts},{},{},{}\n",
                    format_float(grid.node(i)),
                    format_float(self.data.log_ratio[k][i]),
                    format_float(self.data.score[k][i])
                ));
            }
        }
        out
    }

    pub fn header(&self) -> ScoreHeader {
        ScoreHeader {
            field: FieldHeader {
                grid: self.data.grid.clone(),
                times: self.data.times.clone(),
            },
            floor: self.data.floor,
            clip_max: self.clip_max,
        }
    }

    /// Reads back `L` and `dL` columns into their node arrays.
    pub fn read_csv(header: &ScoreHeader, csv: &str) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n = header.field.grid.len();
        let m = header.field.times.len();
        let mut lines = csv.lines();
        if lines.next().map(str::trim) != Some("t,x,L,dL") {
            return Err(Error::Parse("expected header `t,x,L,dL`".into()));
        }
        let (mut l, mut dl) = (vec![Vec::with_capacity(n); m], vec![Vec::with_capacity(n); m]);
        for (row, line) in lines.filter(|s| !s.is_empty()).enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 || row / n >= m {
                return Err(Error::Parse(format!("row {row}: malformed")));
            }
            l[row / n].push(parse_float(cols[2])?);
            dl[row / n].push(parse_float(cols[3])?);
        }
        Ok((l, dl))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHeader {
    pub field: FieldHeader,
    pub floor: f64,
    pub clip_max: f64,
}

/// Λ(s,x) = L(T+s,x), indexed by s ∈ [0, T].
#[derive(Debug, Clone)]
pub struct LambdaField {
    field: ScoreField,
    offset: f64,
}

impl LambdaField {
    /// The time T with Λ(s,·) = L(T+s,·).
    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn source(&self) -> &ScoreField {
        &self.field
    }

    /// Largest s covered.
    pub fn span(&self) -> f64 {
        self.field.end_time() - self.offset
    }

    pub fn eval_score(&self, s: f64, x: f64) -> f64 {
        self.field.eval_score(self.offset + s, x)
    }

    pub fn eval_score_clipped(&self, s: f64, x: f64) -> (f64, bool) {
        self.field.eval_score_clipped(self.offset + s, x)
    }

    pub fn eval_log_ratio(&self, s: f64, x: f64) -> f64 {
        self.field.eval_log_ratio(self.offset + s, x)
    }

    /// Node values of Λ(s,·) for a stored s.
    pub fn log_ratio_at(&self, s: f64) -> Result<&[f64]> {
        let k = self.field.index_of(self.offset + s)?;
        Ok(&self.field.data.log_ratio[k])
    }

    pub fn score_at(&self, s: f64) -> Result<&[f64]> {
        let k = self.field.index_of(self.offset + s)?;
        Ok(&self.field.data.score[k])
    }
}

/// Λ on the leg [T, 2T] of `field` (which must cover it).
pub fn build_lambda(field: &DensityField, gibbs: &GibbsMeasure, horizon: f64, floor: f64) -> Result<LambdaField> {
    let leg = field.window(horizon, 2.0 * horizon)?;
    build_score(&leg, gibbs, floor)?.lambda(horizon)
}
