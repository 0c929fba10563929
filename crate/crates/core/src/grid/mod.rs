//! Uniform 1D grids, time-indexed density fields, and the Fokker-Planck solver
//! that produces the marginal curve p(t,·).

mod fokker_planck;

pub use fokker_planck::{
    solve_fokker_planck, stationary_residual, FokkerPlanckOperator, FokkerPlanckSolver, SolverSettings,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{format_float, parse_float};
use crate::potential::GibbsMeasure;

/// Relative tolerance used when looking up stored times.
pub(crate) const TIME_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// A uniform grid with `points` nodes from `lower` to `upper` inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    lower: f64,
    upper: f64,
    points: usize,
}

impl Grid {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) {
            return Err(Error::Config("grid bounds must be finite".into()));
        }
        if upper <= lower {
            return Err(Error::Config(format!(
                "grid upper bound {upper} must exceed lower bound {lower}"
            )));
        }
        if points < 16 {
            return Err(Error::Config(format!("grid needs at least 16 points, got {points}")));
        }
        Ok(Self { lower, upper, points })
    }

    pub fn from_interval(domain: Interval, points: usize) -> Result<Self> {
        Self::new(domain.lower, domain.upper, points)
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn domain(&self) -> Interval {
        Interval::new(self.lower, self.upper)
    }

    pub fn len(&self) -> usize {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.upper
        } else {
            self.lower + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.points).map(move |i| self.node(i))
    }

    /// Trapezoid weight (control-volume width) of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.points {
            0.5 * self.spacing()
        } else {
            self.spacing()
        }
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.points);
        let interior: f64 = values[1..self.points - 1].iter().sum();
        self.spacing() * (interior + 0.5 * (values[0] + values[self.points - 1]))
    }

    /// ∫ f(x) v(x) dx by trapezoid.
    pub fn integrate_with(&self, values: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| self.weight(i) * v * f(self.node(i)))
            .sum()
    }

    /// Cell index and fractional offset for linear interpolation; clamps to the domain.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let u = ((x - self.lower) / self.spacing()).clamp(0.0, (self.points - 1) as f64);
        let i = (u.floor() as usize).min(self.points - 2);
        (i, u - i as f64)
    }

    /// Index of the nearest node (the control volume containing `x`), clamped.
    pub fn nearest(&self, x: f64) -> usize {
        let u = ((x - self.lower) / self.spacing()).round();
        u.clamp(0.0, (self.points - 1) as f64) as usize
    }

    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (i, f) = self.locate(x);
        values[i] * (1.0 - f) + values[i + 1] * f
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "grid [{}, {}]x{} does not match [{}, {}]x{}",
                self.lower, self.upper, self.points, other.lower, other.upper, other.points
            )))
        }
    }
}

/// Clips negative values to zero and rescales to unit trapezoid mass.
pub fn normalize_slice(grid: &Grid, values: &mut [f64]) -> Result<()> {
    for v in values.iter_mut() {
        if !v.is_finite() {
            return Err(Error::Numeric("density contains non-finite values".into()));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mass = grid.integrate(values);
    if mass <= 0.0 {
        return Err(Error::Numeric("density has zero mass on the grid".into()));
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(())
}

/// Re-expresses a density on a (typically coarser) grid as cell averages over
/// the target control volumes, computed from the linear interpolant.
pub fn resample_slice(from: &Grid, values: &[f64], to: &Grid) -> Result<Vec<f64>> {
    const SUB: usize = 32;
    let h = to.spacing();
    let mut out: Vec<f64> = (0..to.len())
        .map(|i| {
            let x = to.node(i);
            let (a, b) = ((x - 0.5 * h).max(to.lower()), (x + 0.5 * h).min(to.upper()));
            let step = (b - a) / SUB as f64;
            let sum: f64 = (0..SUB)
                .map(|k| {
                    let y = a + (k as f64 + 0.5) * step;
                    if y < from.lower() || y > from.upper() {
                        0.0
                    } else {
                        from.interpolate(values, y)
                    }
                })
                .sum();
            sum / SUB as f64
        })
        .collect();
    normalize_slice(to, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Initial density families accepted by the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensity {
    Gaussian {
        mean: f64,
        variance: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
    /// The Gibbs density itself (stationary start).
    Gibbs,
    /// Raw node values; clipped at 0 and normalized.
    Nodes {
        values: Vec<f64>,
    },
}

fn gaussian_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    (-d * d / (2.0 * variance)).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

impl InitialDensity {
    /// Node values on `grid`, normalized to unit trapezoid mass.
    pub fn to_slice(&self, grid: &Grid, gibbs: Option<&GibbsMeasure>) -> Result<Vec<f64>> {
        let mut values: Vec<f64> = match self {
            InitialDensity::Gaussian { mean, variance } => {
                if !(*variance > 0.0) || !mean.is_finite() {
                    return Err(Error::Config("gaussian initial density needs variance > 0".into()));
                }
                grid.nodes().map(|x| gaussian_pdf(x, *mean, *variance)).collect()
            }
            InitialDensity::Mixture { components } => {
                if components.is_empty() || components.iter().any(|c| !(c.weight > 0.0 && c.variance > 0.0)) {
                    return Err(Error::Config(
                        "mixture components need positive weights and variances".into(),
                    ));
                }
                grid.nodes()
                    .map(|x| {
                        components
                            .iter()
                            .map(|c| c.weight * gaussian_pdf(x, c.mean, c.variance))
                            .sum()
                    })
                    .collect()
            }
            InitialDensity::Gibbs => {
                let g = gibbs
                    .ok_or_else(|| Error::Config("gibbs initial density requires the invariant measure".into()))?;
                g.require_probability()?;
                grid.check_same(g.grid())?;
                g.node_density().to_vec()
            }
            InitialDensity::Nodes { values } => {
                if values.len() != grid.len() {
                    return Err(Error::Shape(format!(
                        "{} node values for a grid of {} points",
                        values.len(),
                        grid.len()
                    )));
                }
                values.clone()
            }
        };
        normalize_slice(grid, &mut values)?;
        Ok(values)
    }
}

/// Marginal densities p(t_i, ·) at increasing stored times.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid,
    times: Vec<f64>,
    slices: Vec<Vec<f64>>,
}

impl DensityField {
    pub fn new(grid: Grid, times: Vec<f64>, slices: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != slices.len() {
            return Err(Error::Shape(format!(
                "{} times for {} slices",
                times.len(),
                slices.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Shape("times must be strictly increasing".into()));
        }
        if let Some(s) = slices.iter().find(|s| s.len() != grid.len()) {
            return Err(Error::Shape(format!(
                "slice of length {} on a grid of {} points",
                s.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, times, slices })
    }

    /// A field holding only the t = 0 slice.
    pub fn single(grid: Grid, slice: Vec<f64>) -> Result<Self> {
        Self::new(grid, vec![0.0], vec![slice])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn slices(&self) -> &[Vec<f64>] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("non-empty field")
    }

    pub fn last(&self) -> &[f64] {
        self.slices.last().expect("non-empty field")
    }

    /// Index of the stored time matching `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = TIME_MATCH_TOL * t.abs().max(1.0);
        let i = self.times.partition_point(|&s| s < t - tol);
        if i < self.times.len() && (self.times[i] - t).abs() <= tol {
            Ok(i)
        } else {
            Err(Error::Coverage {
                time: t,
                detail: format!(
                    "not a stored time of the density field [{}, {}]",
                    self.start_time(),
                    self.end_time()
                ),
            })
        }
    }

    pub fn slice_at(&self, t: f64) -> Result<&[f64]> {
        Ok(&self.slices[self.index_of(t)?])
    }

    /// Density at (t, x), linear in both arguments; `t` must lie within the stored range.
    pub fn interpolate(&self, t: f64, x: f64) -> Result<f64> {
        let (j, w) = time_bracket(&self.times, t)?;
        let a = self.grid.interpolate(&self.slices[j], x);
        if w == 0.0 {
            return Ok(a);
        }
        let b = self.grid.interpolate(&self.slices[j + 1], x);
        Ok(a * (1.0 - w) + b * w)
    }

    /// Stored times within `[from, to]` (inclusive, with lookup tolerance).
    pub fn window(&self, from: f64, to: f64) -> Result<DensityField> {
        let i0 = self.index_of(from)?;
        let i1 = self.index_of(to)?;
        Self::new(
            self.grid.clone(),
            self.times[i0..=i1].to_vec(),
            self.slices[i0..=i1].to_vec(),
        )
    }

    /// Appends a leg whose first time coincides with this field's last time.
    pub fn extend(&mut self, leg: DensityField) -> Result<()> {
        self.grid.check_same(&leg.grid)?;
        let tol = TIME_MATCH_TOL * self.end_time().abs().max(1.0);
        let skip = usize::from((leg.times[0] - self.end_time()).abs() <= tol);
        if leg.times.get(skip).is_some_and(|&t| t <= self.end_time()) {
            return Err(Error::Shape("appended leg overlaps the field".into()));
        }
        self.times.extend_from_slice(&leg.times[skip..]);
        self.slices.extend(leg.slices.into_iter().skip(skip));
        Ok(())
    }

    /// Checks mass, positivity and time ordering.
    pub fn validate(&self, mass_tol: f64) -> Result<()> {
        for (t, s) in self.times.iter().zip(&self.slices) {
            if s.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Numeric(format!("slice at t = {t} has negative or NaN values")));
            }
            let m = self.grid.integrate(s);
            if (m - 1.0).abs() > mass_tol {
                return Err(Error::Numeric(format!("slice at t = {t} has mass {m}")));
            }
        }
        Ok(())
    }

    /// CSV with columns `t,x,p` (17 significant digits).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,p\n");
        for (t, s) in self.times.iter().zip(&self.slices) {
            let ts = format_float(*t);
            for (i, p) in s.iter().enumerate() {
                out.push_str(&format!(
                    "{ts},{},{}\n",
                    format_float(self.grid.node(i)),
                    format_float(*p)
                ));
            }
        }
        out
    }

    pub fn header(&self) -> FieldHeader {
        FieldHeader {
            grid: self.grid.clone(),
            times: self.times.clone(),
        }
    }

    /// Rebuilds a field from its JSON header and `t,x,p` CSV body.
    pub fn from_parts(header: &FieldHeader, csv: &str) -> Result<Self> {
        let n = header.grid.len();
        let mut lines = csv.lines();
        match lines.next() {
            Some(h) if h.trim() == "t,x,p" => {}
            other => return Err(Error::Parse(format!("unexpected CSV header {other:?}"))),
        }
        let mut slices = vec![Vec::with_capacity(n); header.times.len()];
        for (row, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!("row {row}: expected 3 columns")));
            }
            let (k, i) = (row / n, row % n);
            if k >= slices.len() {
                return Err(Error::Parse("more rows than header times".into()));
            }
            let t = parse_float(cols[0])?;
            if t.to_bits() != header.times[k].to_bits() || i != slices[k].len() {
                return Err(Error::Parse(format!("row {row}: time {t} out of order")));
            }
            slices[k].push(parse_float(cols[2])?);
        }
        DensityField::new(header.grid.clone(), header.times.clone(), slices)
    }
}

/// JSON header accompanying a density CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub grid: Grid,
    pub times: Vec<f64>,
}

/// Bracketing index `j` and weight `w` with t = (1−w)·times[j] + w·times[j+1].
pub(crate) fn time_bracket(times: &[f64], t: f64) -> Result<(usize, f64)> {
    let (first, last) = (times[0], *times.last().expect("non-empty"));
    let tol = TIME_MATCH_TOL * t.abs().max(1.0);
    if t < first - tol || t > last + tol {
        return Err(Error::Coverage {
            time: t,
            detail: format!("outside stored range [{first}, {last}]"),
        });
    }
    Ok(clamped_bracket(times, t))
}

pub(crate) fn clamped_bracket(times: &[f64], t: f64) -> (usize, f64) {
    let n = times.len();
    if n == 1 || t <= times[0] {
        return (0, 0.0);
    }
    if t >= times[n - 1] {
        return (n.saturating_sub(2), if n == 1 { 0.0 } else { 1.0 });
    }
    let j = times.partition_point(|&s| s <= t) - 1;
    let w = (t - times[j]) / (times[j + 1] - times[j]);
    (j, w)
}

/// Quadrature moments of a slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    /// Variance (the 1×1 covariance matrix).
    pub covariance: f64,
    pub second_moment: f64,
}

pub fn slice_moments(grid: &Grid, slice: &[f64]) -> Moments {
    let mass = grid.integrate(slice);
    let mean = grid.integrate_with(slice, |x| x) / mass;
    let second_moment = grid.integrate_with(slice, |x| x * x) / mass;
    let covariance = grid.integrate_with(slice, |x| (x - mean) * (x - mean)) / mass;
    Moments {
        mean,
        covariance,
        second_moment,
    }
}

/// Moments of the stored slice at time `t`.
pub fn moments(field: &DensityField, t: f64) -> Result<Moments> {
    Ok(slice_moments(field.grid(), field.slice_at(t)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(-8.0, 8.0, 1024).unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = grid();
        assert!((g.spacing() - 16.0 / 1023.0).abs() < 1e-15);
        assert_eq!(g.node(0), -8.0);
        assert_eq!(g.node(1023), 8.0);
        assert!(Grid::new(0.0, 1.0, 15).is_err());
        assert!(Grid::new(1.0, 1.0, 32).is_err());
        let ones = vec![1.0; g.len()];
        assert!((g.integrate(&ones) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn locate_and_nearest_clamp() {
        let g = Grid::new(0.0, 15.0, 16).unwrap();
        assert_eq!(g.locate(-3.0), (0, 0.0));
        assert_eq!(g.locate(15.0), (14, 1.0));
        let (i, f) = g.locate(2.25);
        assert_eq!(i, 2);
        assert!((f - 0.25).abs() < 1e-15);
        assert_eq!(g.nearest(2.6), 3);
        assert_eq!(g.nearest(99.0), 15);
    }

    #[test]
    fn gaussian_moments() {
        let g = grid();
        let p = InitialDensity::Gaussian {
            mean: 0.0,
            variance: 1.0,
        }
        .to_slice(&g, None)
        .unwrap();
        let m = slice_moments(&g, &p);
        assert!(m.mean.abs() <= 1e-6);
        let p = InitialDensity::Gaussian {
            mean: 1.0,
            variance: 1.0,
        }
        .to_slice(&g, None)
        .unwrap();
        let m = slice_moments(&g, &p);
        // m² + v
        assert!((m.second_moment - 2.0).abs() <= 1e-3);
        assert!((m.covariance - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn moments_lookup_requires_stored_time() {
        let g = grid();
        let p = InitialDensity::Gaussian {
            mean: 0.0,
            variance: 1.0,
        }
        .to_slice(&g, None)
        .unwrap();
        let field = DensityField::new(g, vec![0.0, 0.5], vec![p.clone(), p]).unwrap();
        assert!(moments(&field, 0.5).is_ok());
        assert!(matches!(moments(&field, 0.25), Err(Error::Coverage { .. })));
    }

    #[test]
    fn raw_nodes_are_clipped_and_normalized() {
        let g = Grid::new(0.0, 1.0, 16).unwrap();
        let mut raw = vec![1.0; 16];
        raw[3] = -2.0;
        let p = InitialDensity::Nodes { values: raw }.to_slice(&g, None).unwrap();
        assert_eq!(p[3], 0.0);
        assert!((g.integrate(&p) - 1.0).abs() < 1e-14);
        assert!(matches!(
            InitialDensity::Nodes { values: vec![1.0; 3] }.to_slice(&g, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn field_rejects_bad_shapes() {
        let g = Grid::new(0.0, 1.0, 16).unwrap();
        let s = vec![1.0; 16];
        assert!(DensityField::new(g.clone(), vec![0.0, 0.0], vec![s.clone(), s.clone()]).is_err());
        assert!(DensityField::new(g.clone(), vec![0.0], vec![vec![1.0; 3]]).is_err());
        assert!(DensityField::new(g, vec![0.0, 1.0], vec![s]).is_err());
    }

    #[test]
    fn csv_and_header_round_trip_bit_exact() {
        let g = Grid::new(-1.3, 2.7, 16).unwrap();
        let a = InitialDensity::Gaussian {
            mean: 0.1,
            variance: 0.37,
        }
        .to_slice(&g, None)
        .unwrap();
        let b = InitialDensity::Gaussian {
            mean: 0.4,
            variance: 0.21,
        }
        .to_slice(&g, None)
        .unwrap();
        let field = DensityField::new(g, vec![0.0, 0.1 + 0.2], vec![a, b]).unwrap();
        let json = serde_json::to_string(&field.header()).unwrap();
        let header: FieldHeader = serde_json::from_str(&json).unwrap();
        assert_eq!(header, field.header());
        let back = DensityField::from_parts(&header, &field.to_csv()).unwrap();
        for (x, y) in back.slices().iter().flatten().zip(field.slices().iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn resample_preserves_mass_and_shape() {
        let fine = grid();
        let coarse = Grid::new(-8.0, 8.0, 129).unwrap();
        let p = InitialDensity::Gaussian {
            mean: 0.5,
            variance: 0.7,
        }
        .to_slice(&fine, None)
        .unwrap();
        let c = resample_slice(&fine, &p, &coarse).unwrap();
        assert!((coarse.integrate(&c) - 1.0).abs() < 1e-12);
        let direct = InitialDensity::Gaussian {
            mean: 0.5,
            variance: 0.7,
        }
        .to_slice(&coarse, None)
        .unwrap();
        let l1: f64 = c
            .iter()
            .zip(&direct)
            .enumerate()
            .map(|(i, (a, b))| coarse.weight(i) * (a - b).abs())
            .sum();
        assert!(l1 < 5e-3, "{l1}");
    }

    #[test]
    fn bracket_clamps_and_interpolates() {
        let times = [0.0, 0.1, 0.2, 0.4];
        assert_eq!(clamped_bracket(&times, -1.0), (0, 0.0));
        assert_eq!(clamped_bracket(&times, 9.0), (2, 1.0));
        let (j, w) = clamped_bracket(&times, 0.3);
        assert_eq!(j, 2);
        assert!((w - 0.5).abs() < 1e-12);
        assert!(time_bracket(&times, 0.5).is_err());
    }
}
