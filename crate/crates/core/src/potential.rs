//! Potentials Ψ, their Gibbs measures q = e^{-2Ψ}, and the admissibility checks
//! (coercivity, finite second moment, finite initial relative entropy) that the
//! rest of the pipeline relies on.

use serde::{Deserialize, Serialize};

use crate::entropy;
use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid, Interval};

/// Largest exponent accepted when tabulating e^{-2Ψ}.
const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Family {
    /// Ψ ≡ 0 (Brownian motion; Lebesgue invariant measure).
    Zero,
    /// Ψ(x) = ½ k x² (Ornstein-Uhlenbeck).
    Quadratic { stiffness: f64 },
    /// Ψ(x) = (x² − a²)².
    DoubleWell { a: f64 },
    /// Ψ(x) = Σ c_k x^k, coefficients in increasing degree.
    Polynomial { coefficients: Vec<f64> },
}

/// Config-level description of a potential, e.g.
/// `potential = { name = "double_well", params = [1.0] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl PotentialSpec {
    pub fn build(&self) -> Result<Potential> {
        builtin_potential(&self.name, &self.params)
    }
}

/// A smooth scalar potential with an analytically coded gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    family: Family,
    label: String,
}

impl Potential {
    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, Family::Zero)
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        match &self.family {
            Family::Zero => 0.0,
            Family::Quadratic { stiffness } => 0.5 * stiffness * x * x,
            Family::DoubleWell { a } => {
                let s = x * x - a * a;
                s * s
            }
            Family::Polynomial { coefficients } => coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c),
        }
    }

    pub fn gradient(&self, x: f64) -> f64 {
        match &self.family {
            Family::Zero => 0.0,
            Family::Quadratic { stiffness } => stiffness * x,
            Family::DoubleWell { a } => 4.0 * x * (x * x - a * a),
            Family::Polynomial { coefficients } => coefficients
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c),
        }
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        match &self.family {
            Family::Zero => 0.0,
            Family::Quadratic { stiffness } => *stiffness,
            Family::DoubleWell { a } => 12.0 * x * x - 4.0 * a * a,
            Family::Polynomial { coefficients } => coefficients
                .iter()
                .enumerate()
                .skip(2)
                .rev()
                .fold(0.0, |acc, (k, c)| acc * x + (k * (k - 1)) as f64 * c),
        }
    }

    /// Convexity modulus κ with Ψ'' ≥ κ everywhere, when one is known.
    pub fn hessian_lower_bound(&self) -> Option<f64> {
        match &self.family {
            Family::Zero => Some(0.0),
            Family::Quadratic { stiffness } => Some(*stiffness),
            Family::DoubleWell { .. } => None,
            Family::Polynomial { coefficients } => match coefficients.len() {
                0..=2 => Some(0.0),
                3 => Some(2.0 * coefficients[2]),
                _ => None,
            },
        }
    }
}

/// Builds one of the named potential families.
///
/// `zero` and `quadratic` take no parameters (`quadratic` optionally takes a
/// stiffness k > 0), `double_well` takes `[a]` with a > 0, and `polynomial`
/// takes its coefficients in increasing degree.
pub fn builtin_potential(name: &str, params: &[f64]) -> Result<Potential> {
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Config(format!("potential `{name}`: non-finite parameter")));
    }
    let family = match name {
        "zero" => {
            if !params.is_empty() {
                return Err(Error::Config("potential `zero` takes no parameters".into()));
            }
            Family::Zero
        }
        "quadratic" => match params {
            [] => Family::Quadratic { stiffness: 1.0 },
            [k] if *k > 0.0 => Family::Quadratic { stiffness: *k },
            _ => {
                return Err(Error::Config(
                    "potential `quadratic` takes at most one stiffness parameter > 0".into(),
                ))
            }
        },
        "double_well" => match params {
            [a] if *a > 0.0 => Family::DoubleWell { a: *a },
            _ => {
                return Err(Error::Config(
                    "potential `double_well` requires exactly one parameter a > 0".into(),
                ))
            }
        },
        "polynomial" => {
            if params.is_empty() {
                return Err(Error::Config(
                    "potential `polynomial` requires at least one coefficient".into(),
                ));
            }
            Family::Polynomial {
                coefficients: params.to_vec(),
            }
        }
        other => return Err(Error::Config(format!("unknown potential `{other}`"))),
    };
    let label = if params.is_empty() {
        name.to_string()
    } else {
        let ps: Vec<String> = params.iter().map(|p| p.to_string()).collect();
        format!("{name}({})", ps.join(","))
    };
    Ok(Potential { family, label })
}

/// Whether the invariant measure could be normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    Finite(f64),
    Infinite,
}

/// The invariant measure Q with density q = e^{-2Ψ}, tabulated on a grid.
#[derive(Debug, Clone)]
pub struct GibbsMeasure {
    potential: Potential,
    grid: Grid,
    normalization: Normalization,
    log_z: f64,
    nodes: Vec<f64>,
}

impl GibbsMeasure {
    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn normalizing_constant(&self) -> Option<f64> {
        match self.normalization {
            Normalization::Finite(z) => Some(z),
            Normalization::Infinite => None,
        }
    }

    pub fn is_probability(&self) -> bool {
        matches!(self.normalization, Normalization::Finite(_))
    }

    pub fn require_probability(&self) -> Result<()> {
        if self.is_probability() {
            Ok(())
        } else {
            Err(Error::UnsupportedMeasure(format!(
                "invariant measure of `{}` is not normalizable",
                self.potential.label()
            )))
        }
    }

    pub fn density_unnormalized(&self, x: f64) -> f64 {
        (-2.0 * self.potential.evaluate(x)).exp()
    }

    /// Normalized density q(x)/Z_Q; the unnormalized one when Q is infinite.
    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        -2.0 * self.potential.evaluate(x) - self.log_z
    }

    /// Density at the grid nodes (normalized when Q is finite).
    pub fn node_density(&self) -> &[f64] {
        &self.nodes
    }

    /// Log density at node `i`, computed from Ψ rather than from the tabulated value.
    pub fn node_log_density(&self, i: usize) -> f64 {
        self.log_density(self.grid.node(i))
    }

    /// Q(A) for an interval A, by trapezoid quadrature of the tabulated density.
    pub fn probability_of(&self, set: Interval) -> Result<f64> {
        self.require_probability()?;
        let (a, b) = (set.lower.max(self.grid.lower()), set.upper.min(self.grid.upper()));
        if b <= a {
            return Ok(0.0);
        }
        // Fine sub-quadrature so that the set edges need not sit on nodes.
        let n = ((b - a) / self.grid.spacing()).ceil() as usize * 4 + 1;
        let n = n.max(17);
        let step = (b - a) / (n - 1) as f64;
        let mut acc = 0.0;
        for k in 0..n {
            let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            acc += w * self.density(a + k as f64 * step);
        }
        Ok(acc * step)
    }
}

/// Tabulates q = e^{-2Ψ} on `domain` and normalizes it by composite trapezoid
/// quadrature. The zero potential is flagged as non-normalizable.
pub fn gibbs_measure(pot: &Potential, domain: Interval, resolution: usize) -> Result<GibbsMeasure> {
    if resolution < 16 {
        return Err(Error::Config(format!(
            "Gibbs resolution must be at least 16, got {resolution}"
        )));
    }
    let grid = Grid::new(domain.lower, domain.upper, resolution)?;
    gibbs_on_grid(pot, &grid)
}

/// Same as [`gibbs_measure`] on an existing grid.
pub fn gibbs_on_grid(pot: &Potential, grid: &Grid) -> Result<GibbsMeasure> {
    let exponents: Vec<f64> = grid.nodes().map(|x| -2.0 * pot.evaluate(x)).collect();
    if let Some(bad) = exponents.iter().find(|e| !e.is_finite()) {
        return Err(Error::Numeric(format!("potential is not finite on the grid ({bad})")));
    }
    let max_exp = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max_exp > MAX_EXPONENT {
        return Err(Error::Numeric(format!(
            "e^(-2Ψ) overflows: -2Ψ reaches {max_exp:.3e} on the grid"
        )));
    }
    let unnormalized: Vec<f64> = exponents.iter().map(|e| e.exp()).collect();
    let (normalization, log_z) = if pot.is_zero() {
        (Normalization::Infinite, 0.0)
    } else {
        let z = grid.integrate(&unnormalized);
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::Numeric(format!("normalizing constant is {z}")));
        }
        (Normalization::Finite(z), z.ln())
    };
    let nodes = exponents.iter().map(|e| (e - log_z).exp()).collect();
    Ok(GibbsMeasure {
        potential: pot.clone(),
        grid: grid.clone(),
        normalization,
        log_z,
        nodes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    /// min over nodes with |x| ≥ R of ⟨x, ∇Ψ(x)⟩ + c|x|².
    pub coercivity_margin: f64,
    pub coercivity_ok: bool,
    pub second_moment: f64,
    pub second_moment_ok: bool,
    /// H(P(0)|Q); relative to the unnormalized q when Q is infinite.
    pub initial_entropy: f64,
    pub initial_entropy_ok: bool,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.coercivity_ok && self.second_moment_ok && self.initial_entropy_ok
    }
}

/// Checks the coercivity condition, the second moment of p(0,·) and the
/// finiteness of the initial relative entropy. Report-only.
pub fn check_admissibility(
    pot: &Potential,
    init: &DensityField,
    gibbs: &GibbsMeasure,
    radius: f64,
    constant: f64,
) -> AdmissibilityReport {
    let grid = init.grid();
    let coercivity_margin = grid
        .nodes()
        .filter(|x| x.abs() >= radius)
        .map(|x| x * pot.gradient(x) + constant * x * x)
        .fold(f64::INFINITY, f64::min);
    let p0 = &init.slices()[0];
    let second_moment = grid.integrate_with(p0, |x| x * x);
    let initial_entropy = entropy::relative_entropy_unchecked(p0, gibbs).value;
    AdmissibilityReport {
        coercivity_margin,
        coercivity_ok: coercivity_margin >= -1e-12,
        second_moment,
        second_moment_ok: second_moment.is_finite(),
        initial_entropy,
        initial_entropy_ok: initial_entropy.is_finite(),
    }
}
