//! Resource allocation problem model: agent utilities, coupling constraints on
//! the average allocation, compact feasible sets, and the conservative robust
//! reformulation used when a fraction of uplinks may be compromised.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::vecops::{axpy, dist_sq, dot, mean_rows, norm, norm_sq};

/// Scalar function of a parameter vector.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Gradient of a scalar function of a parameter vector.
pub type GradientFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Utility (cost) of a single agent, minimized by the allocation.
#[derive(Clone)]
pub enum UtilityFunction {
    /// `b * ||theta - target||^2 - offset`
    Quadratic {
        curvature: f64,
        target: Vec<f64>,
        offset: f64,
    },
    /// `-weight * sum_j log(theta_j + shift)`; the shift keeps the origin in the domain.
    LogBarrier { weight: f64, shift: f64 },
    Custom {
        value: ScalarFn,
        gradient: GradientFn,
    },
}

impl fmt::Debug for UtilityFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilityFunction::Quadratic {
                curvature,
                target,
                offset,
            } => f
                .debug_struct("Quadratic")
                .field("curvature", curvature)
                .field("target", target)
                .field("offset", offset)
                .finish(),
            UtilityFunction::LogBarrier { weight, shift } => f
                .debug_struct("LogBarrier")
                .field("weight", weight)
                .field("shift", shift)
                .finish(),
            UtilityFunction::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl UtilityFunction {
    pub fn quadratic(curvature: f64, target: Vec<f64>, offset: f64) -> Result<Self> {
        if !(curvature >= 0.0 && curvature.is_finite()) {
            return Err(Error::invalid(
                "utility.curvature",
                "must be finite and >= 0",
            ));
        }
        if !target.iter().all(|x| x.is_finite()) || !offset.is_finite() {
            return Err(Error::invalid("utility.target", "must be finite"));
        }
        Ok(UtilityFunction::Quadratic {
            curvature,
            target,
            offset,
        })
    }

    pub fn log_barrier(weight: f64, shift: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid("utility.weight", "must be finite and > 0"));
        }
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(Error::invalid("utility.shift", "must be finite and > 0"));
        }
        Ok(UtilityFunction::LogBarrier { weight, shift })
    }

    pub fn custom(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        UtilityFunction::Custom {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match self {
            UtilityFunction::Quadratic {
                curvature,
                target,
                offset,
            } => curvature * dist_sq(theta, target) - offset,
            UtilityFunction::LogBarrier { weight, shift } => {
                -weight * theta.iter().map(|x| (x + shift).ln()).sum::<f64>()
            }
            UtilityFunction::Custom { value, .. } => value(theta),
        }
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            UtilityFunction::Quadratic {
                curvature, target, ..
            } => theta
                .iter()
                .zip(target)
                .map(|(x, a)| 2.0 * curvature * (x - a))
                .collect(),
            UtilityFunction::LogBarrier { weight, shift } => {
                theta.iter().map(|x| -weight / (x + shift)).collect()
            }
            UtilityFunction::Custom { gradient, .. } => gradient(theta),
        }
    }

    /// Constant Hessian scale for quadratic utilities (`2b`), `None` otherwise.
    pub fn quadratic_hessian(&self) -> Option<f64> {
        match self {
            UtilityFunction::Quadratic { curvature, .. } => Some(2.0 * curvature),
            _ => None,
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if let UtilityFunction::Quadratic { target, .. } = self {
            check_dim("utility target", dim, target.len())?;
        }
        Ok(())
    }
}

/// Shape of a coupling constraint `g(x) <= 0` on the average allocation `x`.
#[derive(Clone)]
pub enum ConstraintKind {
    /// `coeffs . x - bound`
    Linear { coeffs: Vec<f64>, bound: f64 },
    /// `curvature / 2 * ||x - center||^2 - level`
    Quadratic {
        curvature: f64,
        center: Vec<f64>,
        level: f64,
    },
    Custom {
        value: ScalarFn,
        gradient: GradientFn,
    },
}

impl fmt::Debug for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintKind::Linear { coeffs, bound } => f
                .debug_struct("Linear")
                .field("coeffs", coeffs)
                .field("bound", bound)
                .finish(),
            ConstraintKind::Quadratic {
                curvature,
                center,
                level,
            } => f
                .debug_struct("Quadratic")
                .field("curvature", curvature)
                .field("center", center)
                .field("level", level)
                .finish(),
            ConstraintKind::Custom { .. } => f.write_str("Custom"),
        }
    }
}

/// A convex coupling constraint together with its declared smoothness constants.
///
/// `grad_bound` (B) bounds the gradient norm and `lipschitz` (L) the gradient's
/// Lipschitz constant. Both are declared, not estimated; `shift` is a constant
/// added to the value and is how conservative offsets are applied.
#[derive(Clone, Debug)]
pub struct ConstraintFunction {
    pub kind: ConstraintKind,
    pub grad_bound: f64,
    pub lipschitz: f64,
    pub shift: f64,
}

impl ConstraintFunction {
    pub fn linear(coeffs: Vec<f64>, bound: f64) -> Result<Self> {
        if !coeffs.iter().all(|x| x.is_finite()) || !bound.is_finite() {
            return Err(Error::invalid("constraint.coeffs", "must be finite"));
        }
        let grad_bound = norm(&coeffs);
        Ok(ConstraintFunction {
            kind: ConstraintKind::Linear { coeffs, bound },
            grad_bound,
            lipschitz: 0.0,
            shift: 0.0,
        })
    }

    /// Quadratic constraint; `grad_bound` must cover the region the engine evaluates it on.
    pub fn quadratic(
        curvature: f64,
        center: Vec<f64>,
        level: f64,
        grad_bound: f64,
    ) -> Result<Self> {
        if !(curvature >= 0.0 && curvature.is_finite()) {
            return Err(Error::invalid(
                "constraint.curvature",
                "must be finite and >= 0",
            ));
        }
        Self::check_constants(grad_bound, curvature)?;
        Ok(ConstraintFunction {
            kind: ConstraintKind::Quadratic {
                curvature,
                center,
                level,
            },
            grad_bound,
            lipschitz: curvature,
            shift: 0.0,
        })
    }

    pub fn custom(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        grad_bound: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        Self::check_constants(grad_bound, lipschitz)?;
        Ok(ConstraintFunction {
            kind: ConstraintKind::Custom {
                value: Arc::new(value),
                gradient: Arc::new(gradient),
            },
            grad_bound,
            lipschitz,
            shift: 0.0,
        })
    }

    fn check_constants(grad_bound: f64, lipschitz: f64) -> Result<()> {
        if !(grad_bound >= 0.0 && grad_bound.is_finite()) {
            return Err(Error::invalid(
                "constraint.grad_bound",
                "must be finite and >= 0",
            ));
        }
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::invalid(
                "constraint.lipschitz",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let raw = match &self.kind {
            ConstraintKind::Linear { coeffs, bound } => dot(coeffs, x) - bound,
            ConstraintKind::Quadratic {
                curvature,
                center,
                level,
            } => 0.5 * curvature * dist_sq(x, center) - level,
            ConstraintKind::Custom { value, .. } => value(x),
        };
        raw + self.shift
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            ConstraintKind::Linear { coeffs, .. } => coeffs.clone(),
            ConstraintKind::Quadratic {
                curvature, center, ..
            } => x
                .iter()
                .zip(center)
                .map(|(a, c)| curvature * (a - c))
                .collect(),
            ConstraintKind::Custom { gradient, .. } => gradient(x),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.kind, ConstraintKind::Linear { .. })
            || matches!(self.kind, ConstraintKind::Quadratic { curvature, .. } if curvature == 0.0)
    }

    /// Same constraint with `offset` added to its value.
    pub fn shifted(&self, offset: f64) -> Self {
        let mut out = self.clone();
        out.shift += offset;
        out
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match &self.kind {
            ConstraintKind::Linear { coeffs, .. } => {
                check_dim("constraint coefficients", dim, coeffs.len())
            }
            ConstraintKind::Quadratic { center, .. } => {
                check_dim("constraint center", dim, center.len())
            }
            ConstraintKind::Custom { .. } => Ok(()),
        }
    }
}

/// Compact convex feasible set of one agent. Always contains the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeasibleSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl FeasibleSet {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let set = FeasibleSet::Box { lower, upper };
        set.validate()?;
        Ok(set)
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let set = FeasibleSet::Ball { center, radius };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeasibleSet::Box { lower, upper } => {
                check_dim("box bounds", lower.len(), upper.len())?;
                for (l, u) in lower.iter().zip(upper) {
                    if !(l.is_finite() && u.is_finite() && l <= u) {
                        return Err(Error::invalid(
                            "set.box",
                            "bounds must be finite with lower <= upper",
                        ));
                    }
                }
            }
            FeasibleSet::Ball { center, radius } => {
                if !(radius.is_finite() && *radius >= 0.0) || !center.iter().all(|x| x.is_finite())
                {
                    return Err(Error::invalid(
                        "set.ball",
                        "center and radius must be finite, radius >= 0",
                    ));
                }
            }
        }
        let origin = vec![0.0; self.dim()];
        if !self.contains(&origin, 1e-12) {
            return Err(Error::invalid(
                "set",
                "feasible set must contain the origin",
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            FeasibleSet::Box { lower, .. } => lower.len(),
            FeasibleSet::Ball { center, .. } => center.len(),
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            FeasibleSet::Box { lower, upper } => dist_sq(lower, upper).sqrt(),
            FeasibleSet::Ball { radius, .. } => 2.0 * radius,
        }
    }

    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        if point.len() != self.dim() {
            return false;
        }
        match self {
            FeasibleSet::Box { lower, upper } => point
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol),
            FeasibleSet::Ball { center, radius } => dist_sq(point, center).sqrt() <= radius + tol,
        }
    }

    /// Nearest point of the set in Euclidean norm.
    pub fn project(&self, point: &[f64]) -> Result<Vec<f64>> {
        check_dim("projection point", self.dim(), point.len())?;
        Ok(self.project_unchecked(point))
    }

    pub(crate) fn project_unchecked(&self, point: &[f64]) -> Vec<f64> {
        match self {
            FeasibleSet::Box { lower, upper } => point
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, u))| x.clamp(*l, *u))
                .collect(),
            FeasibleSet::Ball { center, radius } => {
                let d = dist_sq(point, center).sqrt();
                if d <= *radius {
                    point.to_vec()
                } else {
                    let s = radius / d;
                    center
                        .iter()
                        .zip(point)
                        .map(|(c, x)| c + s * (x - c))
                        .collect()
                }
            }
        }
    }

    /// Uniform sample from the set.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            FeasibleSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| if u > l { rng.gen_range(*l..=*u) } else { *l })
                .collect(),
            FeasibleSet::Ball { center, radius } => {
                let d = center.len();
                let dir: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
                let n = norm(&dir).max(f64::MIN_POSITIVE);
                let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
                center
                    .iter()
                    .zip(&dir)
                    .map(|(c, x)| c + r * x / n)
                    .collect()
            }
        }
    }

    /// Corner points used as extreme samples: box vertices (up to 2^6) or the
    /// ball's axis extremes.
    pub fn extreme_points(&self) -> Vec<Vec<f64>> {
        match self {
            FeasibleSet::Box { lower, upper } => {
                let d = lower.len().min(6);
                (0..1usize << d)
                    .map(|mask| {
                        lower
                            .iter()
                            .zip(upper)
                            .enumerate()
                            .map(|(j, (l, u))| if j < d && mask >> j & 1 == 1 { *u } else { *l })
                            .collect()
                    })
                    .collect()
            }
            FeasibleSet::Ball { center, radius } => {
                let mut out = Vec::with_capacity(2 * center.len());
                for j in 0..center.len() {
                    for sign in [-1.0, 1.0] {
                        let mut p = center.clone();
                        p[j] += sign * radius;
                        out.push(p);
                    }
                }
                out
            }
        }
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// The allocation problem: minimize the average utility subject to coupling
/// constraints on the average allocation and per-agent feasible sets.
#[derive(Clone, Debug)]
pub struct AllocationProblem {
    utilities: Vec<UtilityFunction>,
    constraints: Vec<ConstraintFunction>,
    sets: Vec<FeasibleSet>,
    upsilon: f64,
    radius: f64,
    dim: usize,
}

impl AllocationProblem {
    /// Builds and validates a problem. `radius` is the common diameter bound R;
    /// `None` uses the largest set diameter.
    pub fn new(
        utilities: Vec<UtilityFunction>,
        constraints: Vec<ConstraintFunction>,
        sets: Vec<FeasibleSet>,
        upsilon: f64,
        radius: Option<f64>,
    ) -> Result<Self> {
        if utilities.is_empty() {
            return Err(Error::invalid(
                "utilities",
                "at least one agent is required",
            ));
        }
        check_dim("feasible set count", utilities.len(), sets.len())?;
        let dim = sets[0].dim();
        if dim == 0 {
            return Err(Error::invalid("dim", "parameter dimension must be >= 1"));
        }
        for set in &sets {
            set.validate()?;
            check_dim("feasible set dimension", dim, set.dim())?;
        }
        for u in &utilities {
            u.check_dim(dim)?;
        }
        for c in &constraints {
            c.check_dim(dim)?;
        }
        if !(upsilon >= 0.0 && upsilon.is_finite()) {
            return Err(Error::invalid("upsilon", "must be finite and >= 0"));
        }
        let max_diam = sets.iter().map(FeasibleSet::diameter).fold(0.0, f64::max);
        let radius = radius.unwrap_or(max_diam);
        if !(radius.is_finite() && radius >= max_diam * (1.0 - 1e-12)) {
            return Err(Error::invalid(
                "R",
                format!("diameter bound {radius} is below the largest set diameter {max_diam}"),
            ));
        }
        Ok(AllocationProblem {
            utilities,
            constraints,
            sets,
            upsilon,
            radius,
            dim,
        })
    }

    pub fn agents(&self) -> usize {
        self.utilities.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constraint_count(&self) -> usize {
        self.constraints.len()
    }

    pub fn utilities(&self) -> &[UtilityFunction] {
        &self.utilities
    }

    pub fn constraints(&self) -> &[ConstraintFunction] {
        &self.constraints
    }

    pub fn sets(&self) -> &[FeasibleSet] {
        &self.sets
    }

    pub fn upsilon(&self) -> f64 {
        self.upsilon
    }

    /// Common diameter bound R.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Largest declared gradient bound over constraints.
    pub fn max_grad_bound(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.grad_bound)
            .fold(0.0, f64::max)
    }

    /// Largest declared gradient Lipschitz constant over constraints.
    pub fn max_lipschitz(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.lipschitz)
            .fold(0.0, f64::max)
    }

    /// Same problem with a different regularization weight.
    pub fn with_upsilon(&self, upsilon: f64) -> Result<Self> {
        if !(upsilon >= 0.0 && upsilon.is_finite()) {
            return Err(Error::invalid("upsilon", "must be finite and >= 0"));
        }
        let mut out = self.clone();
        out.upsilon = upsilon;
        Ok(out)
    }

    /// `true` when every utility is quadratic and every constraint affine, so the
    /// saddle map is affine.
    pub fn is_quadratic(&self) -> bool {
        self.utilities
            .iter()
            .all(|u| u.quadratic_hessian().is_some())
            && self.constraints.iter().all(ConstraintFunction::is_affine)
    }

    pub(crate) fn check_theta(&self, theta: &[Vec<f64>]) -> Result<()> {
        check_dim("agent count", self.agents(), theta.len())?;
        for t in theta {
            check_dim("agent parameter", self.dim, t.len())?;
        }
        Ok(())
    }

    /// Exact mean allocation over all agents.
    pub fn mean_allocation(&self, theta: &[Vec<f64>]) -> Vec<f64> {
        mean_rows(theta.iter().map(Vec::as_slice), self.dim)
    }

    /// Draws a feasible allocation for every agent.
    pub fn sample_allocation<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        self.sets.iter().map(|s| s.sample(rng)).collect()
    }

    /// Loads a problem from a TOML file following [`ProblemSpec`].
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ProblemSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        spec.build()
    }
}

/// Euclidean projection of `point` onto `set`.
pub fn project(set: &FeasibleSet, point: &[f64]) -> Result<Vec<f64>> {
    set.project(point)
}

/// Margin `alpha * (R B + L R^2 / 2)` added to a constraint so that it stays
/// satisfied whatever the compromised agents consume.
pub fn conservative_offset(
    alpha: f64,
    radius: f64,
    grad_bound: f64,
    lipschitz: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    for (name, v) in [("R", radius), ("B", grad_bound), ("L", lipschitz)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(name, "must be finite and >= 0"));
        }
    }
    Ok(alpha * (radius * grad_bound + 0.5 * lipschitz * radius * radius))
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::invalid("alpha", "alpha must be < 0.5 (and >= 0)"));
    }
    Ok(())
}

/// `(1/N) sum U_i + sum_t lambda_t g_t(mean) + (v / 2N) sum ||theta_i||^2 - (v/2) ||lambda||^2`.
pub fn regularized_lagrangian(
    problem: &AllocationProblem,
    theta: &[Vec<f64>],
    lambda: &[f64],
) -> Result<f64> {
    problem.check_theta(theta)?;
    check_dim("dual vector", problem.constraint_count(), lambda.len())?;
    if let Some(t) = lambda.iter().position(|l| !(*l >= 0.0)) {
        return Err(Error::invalid(
            format!("lambda[{t}]"),
            "dual prices must be >= 0",
        ));
    }
    let n = problem.agents() as f64;
    let v = problem.upsilon();
    let mean = problem.mean_allocation(theta);
    let utility: f64 = problem
        .utilities()
        .iter()
        .zip(theta)
        .map(|(u, t)| u.value(t))
        .sum::<f64>()
        / n;
    let pricing: f64 = problem
        .constraints()
        .iter()
        .zip(lambda)
        .map(|(g, l)| l * g.value(&mean))
        .sum();
    let primal_reg = v / (2.0 * n) * theta.iter().map(|t| norm_sq(t)).sum::<f64>();
    let dual_reg = 0.5 * v * norm_sq(lambda);
    Ok(utility + pricing + primal_reg - dual_reg)
}

/// Conservative reformulation for a known bound `alpha` on the compromised fraction.
#[derive(Clone, Debug)]
pub struct RobustProblemView {
    base: AllocationProblem,
    alpha: f64,
    offsets: Vec<f64>,
    conservative: AllocationProblem,
}

impl RobustProblemView {
    pub fn base(&self) -> &AllocationProblem {
        &self.base
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Per-constraint offsets `c_t`.
    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// The base problem with every constraint replaced by its shifted version.
    pub fn conservative_problem(&self) -> &AllocationProblem {
        &self.conservative
    }

    pub fn conservative_constraints(&self) -> &[ConstraintFunction] {
        self.conservative.constraints()
    }

    /// Value of the shifted constraint `t` at `x`.
    pub fn conservative_value(&self, t: usize, x: &[f64]) -> f64 {
        self.conservative.constraints()[t].value(x)
    }
}

/// Wraps every constraint with its own conservative offset.
pub fn robust_view(problem: &AllocationProblem, alpha: f64) -> Result<RobustProblemView> {
    check_alpha(alpha)?;
    let offsets = problem
        .constraints()
        .iter()
        .map(|c| conservative_offset(alpha, problem.radius(), c.grad_bound, c.lipschitz))
        .collect::<Result<Vec<_>>>()?;
    let mut conservative = problem.clone();
    conservative.constraints = problem
        .constraints()
        .iter()
        .zip(&offsets)
        .map(|(c, o)| c.shifted(*o))
        .collect();
    Ok(RobustProblemView {
        base: problem.clone(),
        alpha,
        offsets,
        conservative,
    })
}

/// On-disk problem description (TOML).
///
/// ```toml
/// upsilon = 0.1
/// radius = 2.0            # optional, defaults to the largest set diameter
///
/// [[agents]]
/// utility = { kind = "quadratic", curvature = 0.5, target = [1.0], offset = 0.0 }
/// set = { kind = "box", lower = [-1.0], upper = [1.0] }
///
/// [[constraints]]
/// kind = "linear"
/// coeffs = [1.0]
/// bound = 0.5
/// ```
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub upsilon: f64,
    #[serde(default)]
    pub radius: Option<f64>,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub utility: UtilitySpec,
    pub set: FeasibleSet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilitySpec {
    Quadratic {
        curvature: f64,
        target: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    LogBarrier {
        weight: f64,
        shift: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    Linear {
        coeffs: Vec<f64>,
        bound: f64,
    },
    Quadratic {
        curvature: f64,
        center: Vec<f64>,
        level: f64,
        grad_bound: f64,
    },
}

impl ProblemSpec {
    pub fn build(&self) -> Result<AllocationProblem> {
        let mut utilities = Vec::with_capacity(self.agents.len());
        let mut sets = Vec::with_capacity(self.agents.len());
        for agent in &self.agents {
            utilities.push(match &agent.utility {
                UtilitySpec::Quadratic {
                    curvature,
                    target,
                    offset,
                } => UtilityFunction::quadratic(*curvature, target.clone(), *offset)?,
                UtilitySpec::LogBarrier { weight, shift } => {
                    UtilityFunction::log_barrier(*weight, *shift)?
                }
            });
            sets.push(agent.set.clone());
        }
        let constraints = self
            .constraints
            .iter()
            .map(|c| match c {
                ConstraintSpec::Linear { coeffs, bound } => {
                    ConstraintFunction::linear(coeffs.clone(), *bound)
                }
                ConstraintSpec::Quadratic {
                    curvature,
                    center,
                    level,
                    grad_bound,
                } => ConstraintFunction::quadratic(*curvature, center.clone(), *level, *grad_bound),
            })
            .collect::<Result<Vec<_>>>()?;
        AllocationProblem::new(utilities, constraints, sets, self.upsilon, self.radius)
    }
}

/// Central finite-difference gradient, used to cross-check analytic gradients.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Sum of `lambda_t * grad g_t(x)` over constraints.
pub(crate) fn weighted_gradient(
    constraints: &[ConstraintFunction],
    lambda: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let mut acc = vec![0.0; x.len()];
    for (g, l) in constraints.iter().zip(lambda) {
        if *l != 0.0 {
            axpy(&mut acc, *l, &g.gradient(x));
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box(d: usize) -> FeasibleSet {
        FeasibleSet::boxed(vec![-1.0; d], vec![1.0; d]).unwrap()
    }

    #[test]
    fn box_projection_clamps() {
        let p = project(&unit_box(2), &[2.0, 0.5]).unwrap();
        assert_eq!(p, vec![1.0, 0.5]);
    }

    #[test]
    fn ball_projection_scales_radially() {
        let ball = FeasibleSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        let p = project(&ball, &[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn interior_points_are_fixed() {
        let ball = FeasibleSet::ball(vec![0.5, 0.0], 1.0).unwrap();
        assert_eq!(project(&ball, &[0.2, 0.3]).unwrap(), vec![0.2, 0.3]);
        assert_eq!(
            project(&unit_box(2), &[0.2, -0.3]).unwrap(),
            vec![0.2, -0.3]
        );
    }

    #[test]
    fn projection_dimension_mismatch_is_an_error() {
        let err = project(&unit_box(2), &[1.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn sets_must_contain_origin() {
        assert!(FeasibleSet::boxed(vec![1.0], vec![2.0]).is_err());
        assert!(FeasibleSet::ball(vec![3.0], 1.0).is_err());
    }

    #[test]
    fn offset_examples() {
        assert_eq!(conservative_offset(0.0, 2.0, 1.0, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(
            conservative_offset(0.25, 2.0, 1.0, 0.5).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        assert_eq!(conservative_offset(0.1, 1.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(conservative_offset(0.5, 1.0, 1.0, 1.0).is_err());
    }

    fn scalar_problem(upsilon: f64) -> AllocationProblem {
        AllocationProblem::new(
            vec![UtilityFunction::quadratic(0.5, vec![0.0], 0.0).unwrap()],
            vec![ConstraintFunction::linear(vec![1.0], 0.5).unwrap()],
            vec![FeasibleSet::boxed(vec![-2.0], vec![2.0]).unwrap()],
            upsilon,
            None,
        )
        .unwrap()
    }

    #[test]
    fn lagrangian_examples() {
        let p = scalar_problem(0.1);
        let v = regularized_lagrangian(&p, &[vec![1.0]], &[0.0]).unwrap();
        assert_abs_diff_eq!(v, 0.55, epsilon = 1e-15);
        let zero = regularized_lagrangian(&p, &[vec![0.0]], &[0.0]).unwrap();
        assert_eq!(zero, 0.0);
        assert!(regularized_lagrangian(&p, &[vec![0.0]], &[-1.0]).is_err());
    }

    #[test]
    fn lagrangian_decreases_in_upsilon_when_dual_dominates() {
        // ||lambda||^2 = 4 > sum ||theta_i||^2 / N = 1
        let lo = regularized_lagrangian(&scalar_problem(0.1), &[vec![1.0]], &[2.0]).unwrap();
        let hi = regularized_lagrangian(&scalar_problem(0.3), &[vec![1.0]], &[2.0]).unwrap();
        assert!(hi < lo);
    }

    #[test]
    fn robust_view_shifts_constraints() {
        let p = AllocationProblem::new(
            vec![UtilityFunction::quadratic(0.5, vec![0.0], 0.0).unwrap()],
            vec![ConstraintFunction::linear(vec![1.0], 5.0).unwrap()],
            vec![FeasibleSet::boxed(vec![-1.0], vec![1.0]).unwrap()],
            0.1,
            Some(2.0),
        )
        .unwrap();
        let view = robust_view(&p, 0.25).unwrap();
        assert_abs_diff_eq!(view.offsets()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            view.conservative_value(0, &[1.0]),
            1.0 - 5.0 + 0.5,
            epsilon = 1e-15
        );
        let same = robust_view(&p, 0.0).unwrap();
        assert_eq!(
            same.conservative_value(0, &[0.3]),
            p.constraints()[0].value(&[0.3])
        );
        assert!(robust_view(&p, 0.6).is_err());
    }

    #[test]
    fn diameter_bound_is_enforced() {
        let err = AllocationProblem::new(
            vec![UtilityFunction::quadratic(1.0, vec![0.0], 0.0).unwrap()],
            vec![],
            vec![unit_box(1)],
            0.1,
            Some(1.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { .. }));
    }

    #[test]
    fn problem_spec_round_trips_through_toml() {
        let text = r#"
            upsilon = 0.1
            [[agents]]
            utility = { kind = "quadratic", curvature = 0.5, target = [1.0] }
            set = { kind = "box", lower = [-1.0], upper = [1.0] }
            [[agents]]
            utility = { kind = "log_barrier", weight = 1.0, shift = 0.1 }
            set = { kind = "ball", center = [0.0], radius = 1.0 }
            [[constraints]]
            kind = "linear"
            coeffs = [1.0]
            bound = 0.5
        "#;
        let spec: ProblemSpec = toml::from_str(text).unwrap();
        let p = spec.build().unwrap();
        assert_eq!(p.agents(), 2);
        assert_eq!(p.constraint_count(), 1);
        assert_abs_diff_eq!(p.radius(), 2.0, epsilon = 1e-15);
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = crate::vecops::dist(a, b);
        diff / norm(b).max(1.0)
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_nonexpansive(
            x in prop::collection::vec(-5.0f64..5.0, 3),
            y in prop::collection::vec(-5.0f64..5.0, 3),
            use_ball in any::<bool>(),
        ) {
            let set = if use_ball {
                FeasibleSet::ball(vec![0.3, -0.2, 0.1], 1.5).unwrap()
            } else {
                FeasibleSet::boxed(vec![-1.0, -0.5, 0.0], vec![1.0, 2.0, 0.5]).unwrap()
            };
            let px = set.project(&x).unwrap();
            let py = set.project(&y).unwrap();
            let ppx = set.project(&px).unwrap();
            prop_assert!(crate::vecops::dist(&px, &ppx) <= 1e-12);
            prop_assert!(crate::vecops::dist(&px, &py) <= crate::vecops::dist(&x, &y) + 1e-12);
            prop_assert!(set.contains(&px, 1e-12));
        }

        #[test]
        fn analytic_gradients_match_finite_differences(
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let utilities = [
                UtilityFunction::quadratic(rng.gen_range(0.1..2.0), target.clone(), 0.3).unwrap(),
                UtilityFunction::log_barrier(rng.gen_range(0.5..2.0), 0.1).unwrap(),
            ];
            let constraints = [
                ConstraintFunction::linear(target.clone(), 0.2).unwrap(),
                ConstraintFunction::quadratic(0.7, target.clone(), 1.0, 10.0).unwrap(),
            ];
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
            for u in &utilities {
                let fd = finite_difference_gradient(|p| u.value(p), &x, 1e-6);
                prop_assert!(rel_err(&u.gradient(&x), &fd) < 1e-5);
            }
            for g in &constraints {
                let fd = finite_difference_gradient(|p| g.value(p), &x, 1e-6);
                prop_assert!(rel_err(&g.gradient(&x), &fd) < 1e-5);
            }
        }

        #[test]
        fn conservative_gap_is_exactly_the_offset(
            alpha in 0.0f64..0.49,
            x in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let p = AllocationProblem::new(
                vec![UtilityFunction::quadratic(1.0, vec![0.0, 0.0], 0.0).unwrap()],
                vec![
                    ConstraintFunction::linear(vec![1.0, -2.0], 0.5).unwrap(),
                    ConstraintFunction::quadratic(0.5, vec![0.1, 0.1], 1.0, 3.0).unwrap(),
                ],
                vec![FeasibleSet::boxed(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()],
                0.1,
                None,
            ).unwrap();
            let view = robust_view(&p, alpha).unwrap();
            for t in 0..2 {
                let gap = view.conservative_value(t, &x) - p.constraints()[t].value(&x);
                prop_assert!(view.offsets()[t] >= 0.0);
                prop_assert!((gap - view.offsets()[t]).abs() <= 1e-12 * (1.0 + view.offsets()[t]));
            }
        }

        #[test]
        fn declared_constants_hold_on_sampled_points(seed in any::<u64>()) {
            // The quadratic constraint declares B for the radius-5R ball around the origin.
            let r = 2.0_f64;
            let g = ConstraintFunction::quadratic(0.4, vec![0.0, 0.0], 1.0, 0.4 * 5.0 * r).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ball = FeasibleSet::ball(vec![0.0, 0.0], 5.0 * r).unwrap();
            let a = ball.sample(&mut rng);
            let b = ball.sample(&mut rng);
            prop_assert!(norm(&g.gradient(&a)) <= g.grad_bound + 1e-12);
            let gd = crate::vecops::dist(&g.gradient(&a), &g.gradient(&b));
            prop_assert!(gd <= g.lipschitz * crate::vecops::dist(&a, &b) + 1e-12);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            prop_assert!(g.value(&mid) <= 0.5 * g.value(&a) + 0.5 * g.value(&b) + 1e-12);
        }
    }

    #[test]
    fn quadratic_and_log_utilities_are_convex_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let us = [
            UtilityFunction::quadratic(0.8, vec![0.2, -0.1], 1.0).unwrap(),
            UtilityFunction::log_barrier(1.3, 0.05).unwrap(),
        ];
        let set = FeasibleSet::boxed(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        for _ in 0..1000 {
            let a = set.sample(&mut rng);
            let b = set.sample(&mut rng);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            for u in &us {
                assert!(u.value(&mid) <= 0.5 * (u.value(&a) + u.value(&b)) + 1e-12);
            }
        }
    }
}
