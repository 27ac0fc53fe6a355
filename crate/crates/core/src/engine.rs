//! Projected primal-dual iteration on the regularized Lagrangian, the saddle
//! map it descends, and a high-accuracy reference solver for that map.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::problem::{
    weighted_gradient, AllocationProblem, FeasibleSet, RobustProblemView, UtilityFunction,
};
use crate::trace::{RunTrace, TraceRow};
use crate::vecops::{all_finite, dist_sq, mean_rows, norm};

/// Agent parameters and dual prices at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualState {
    pub theta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub iteration: usize,
}

impl PrimalDualState {
    pub fn new(theta: Vec<Vec<f64>>, lambda: Vec<f64>) -> Self {
        PrimalDualState {
            theta,
            lambda,
            iteration: 0,
        }
    }

    /// All-zero state; feasible because every set contains the origin.
    pub fn zeros(problem: &AllocationProblem) -> Self {
        Self::new(
            vec![vec![0.0; problem.dim()]; problem.agents()],
            vec![0.0; problem.constraint_count()],
        )
    }

    pub fn distance_sq(&self, other: &PrimalDualState) -> f64 {
        self.theta
            .iter()
            .zip(&other.theta)
            .map(|(a, b)| dist_sq(a, b))
            .sum::<f64>()
            + dist_sq(&self.lambda, &other.lambda)
    }

    /// Squared distance restricted to the given agents, against a reference
    /// whose `theta` holds exactly those agents in the same order.
    pub fn distance_sq_members(&self, members: &[usize], reference: &PrimalDualState) -> f64 {
        members
            .iter()
            .zip(&reference.theta)
            .map(|(&i, r)| dist_sq(&self.theta[i], r))
            .sum::<f64>()
            + dist_sq(&self.lambda, &reference.lambda)
    }

    fn check_finite(&self) -> Result<()> {
        for (i, t) in self.theta.iter().enumerate() {
            if !all_finite(t) {
                return Err(Error::NonFinite {
                    iteration: self.iteration,
                    quantity: format!("theta[{i}]"),
                });
            }
        }
        if !all_finite(&self.lambda) {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                quantity: "lambda".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub gamma: f64,
    pub max_iters: usize,
    /// Stop once the step norm drops to this value.
    pub stop_tol: f64,
}

impl StepConfig {
    pub fn new(gamma: f64, max_iters: usize, stop_tol: f64) -> Result<Self> {
        let cfg = StepConfig {
            gamma,
            max_iters,
            stop_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma", "step size must be finite and > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be >= 1"));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::invalid("stop_tol", "must be >= 0"));
        }
        Ok(())
    }
}

/// `theta_i - (gamma / n) (grad U_i + v theta_i + g_hat)`, projected onto the set.
pub(crate) fn primal_update(
    utility: &UtilityFunction,
    set: &FeasibleSet,
    theta_i: &[f64],
    g_hat: &[f64],
    upsilon: f64,
    n: f64,
    gamma: f64,
) -> Vec<f64> {
    let grad = utility.gradient(theta_i);
    let moved: Vec<f64> = theta_i
        .iter()
        .zip(grad.iter().zip(g_hat))
        .map(|(x, (gu, gh))| x - gamma * ((gu + upsilon * x + gh) / n))
        .collect();
    set.project_unchecked(&moved)
}

/// `[lambda + gamma (g - v lambda)]_+`, then clipped at `cap`.
pub(crate) fn dual_update(
    lambda: &[f64],
    gvals: &[f64],
    upsilon: f64,
    gamma: f64,
    cap: Option<f64>,
) -> Vec<f64> {
    lambda
        .iter()
        .zip(gvals)
        .map(|(l, g)| {
            let v = (l + gamma * (g - upsilon * l)).max(0.0);
            cap.map_or(v, |c| v.min(c))
        })
        .collect()
}

/// The monotone saddle map of a (possibly restricted and shifted) regularized
/// Lagrangian.
///
/// The map acts on `(theta_m for m in members, lambda)`. Primal blocks are
/// `(1/N)(grad U_m + v theta_m + sum_t lambda_t grad g_t(x))` and the dual block
/// is `-(g(x) - v lambda)`, where `x = s * mean_m theta_m` and `N` is the total
/// agent count. The baseline map uses every agent with `s = 1`; the robust map
/// uses the trusted agents, shifted constraints, and the coordinator's scaling.
#[derive(Clone, Debug)]
pub struct SaddleMap {
    problem: AllocationProblem,
    members: Vec<usize>,
    scale: f64,
    dual_cap: Option<f64>,
}

impl From<&AllocationProblem> for SaddleMap {
    fn from(problem: &AllocationProblem) -> Self {
        SaddleMap::baseline(problem)
    }
}

impl From<&SaddleMap> for SaddleMap {
    fn from(map: &SaddleMap) -> Self {
        map.clone()
    }
}

impl SaddleMap {
    pub fn baseline(problem: &AllocationProblem) -> Self {
        SaddleMap {
            problem: problem.clone(),
            members: (0..problem.agents()).collect(),
            scale: 1.0,
            dual_cap: None,
        }
    }

    /// Map of the conservative problem restricted to `honest` agents.
    pub fn robust(
        view: &RobustProblemView,
        honest: &[usize],
        scale: f64,
        dual_cap: Option<f64>,
    ) -> Result<Self> {
        let n = view.base().agents();
        if honest.is_empty() {
            return Err(Error::invalid(
                "honest",
                "at least one trusted agent is required",
            ));
        }
        let mut sorted = honest.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != honest.len() || sorted.last().is_some_and(|&i| i >= n) {
            return Err(Error::invalid("honest", "indices must be distinct and < N"));
        }
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::invalid("scale", "must lie in (0, 1]"));
        }
        if let Some(c) = dual_cap {
            if !(c > 0.0) {
                return Err(Error::invalid("lambda_bar", "must be > 0"));
            }
        }
        Ok(SaddleMap {
            problem: view.conservative_problem().clone(),
            members: sorted,
            scale,
            dual_cap,
        })
    }

    pub fn with_dual_cap(mut self, cap: Option<f64>) -> Self {
        self.dual_cap = cap;
        self
    }

    pub fn problem(&self) -> &AllocationProblem {
        &self.problem
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dual_cap(&self) -> Option<f64> {
        self.dual_cap
    }

    fn n(&self) -> f64 {
        self.problem.agents() as f64
    }

    /// Dimension of the flattened map variable.
    pub fn size(&self) -> usize {
        self.members.len() * self.problem.dim() + self.problem.constraint_count()
    }

    fn check_state(&self, state: &PrimalDualState) -> Result<()> {
        check_dim("map agents", self.members.len(), state.theta.len())?;
        for t in &state.theta {
            check_dim("agent parameter", self.problem.dim(), t.len())?;
        }
        check_dim(
            "dual vector",
            self.problem.constraint_count(),
            state.lambda.len(),
        )
    }

    /// Constraint argument `s * mean(theta)`.
    pub fn argument(&self, theta: &[Vec<f64>]) -> Vec<f64> {
        let mut x = mean_rows(theta.iter().map(Vec::as_slice), self.problem.dim());
        if self.scale != 1.0 {
            for v in &mut x {
                *v *= self.scale;
            }
        }
        x
    }

    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.problem
            .constraints()
            .iter()
            .map(|g| g.value(x))
            .collect()
    }

    pub fn weighted_gradient(&self, lambda: &[f64], x: &[f64]) -> Vec<f64> {
        weighted_gradient(self.problem.constraints(), lambda, x)
    }

    /// Evaluates the map: primal gradients per member and the dual ascent direction.
    pub fn eval(&self, state: &PrimalDualState) -> (Vec<Vec<f64>>, Vec<f64>) {
        let x = self.argument(&state.theta);
        let g_hat = self.weighted_gradient(&state.lambda, &x);
        let n = self.n();
        let v = self.problem.upsilon();
        let primal = self
            .members
            .iter()
            .zip(&state.theta)
            .map(|(&m, t)| {
                let gu = self.problem.utilities()[m].gradient(t);
                t.iter()
                    .zip(gu.iter().zip(&g_hat))
                    .map(|(x, (a, b))| (a + v * x + b) / n)
                    .collect()
            })
            .collect();
        let dual = self
            .constraint_values(&x)
            .iter()
            .zip(&state.lambda)
            .map(|(g, l)| g - v * l)
            .collect();
        (primal, dual)
    }

    /// One Jacobi projected descent-ascent step with step size `gamma`.
    pub fn step(&self, state: &PrimalDualState, gamma: f64) -> PrimalDualState {
        let x = self.argument(&state.theta);
        let g_hat = self.weighted_gradient(&state.lambda, &x);
        let gvals = self.constraint_values(&x);
        let v = self.problem.upsilon();
        let theta = self
            .members
            .iter()
            .zip(&state.theta)
            .map(|(&m, t)| {
                primal_update(
                    &self.problem.utilities()[m],
                    &self.problem.sets()[m],
                    t,
                    &g_hat,
                    v,
                    self.n(),
                    gamma,
                )
            })
            .collect();
        PrimalDualState {
            theta,
            lambda: dual_update(&state.lambda, &gvals, v, gamma, self.dual_cap),
            iteration: state.iteration + 1,
        }
    }

    fn project_flat(&self, z: &mut [f64]) {
        let d = self.problem.dim();
        for (k, &m) in self.members.iter().enumerate() {
            let p = self.problem.sets()[m].project_unchecked(&z[k * d..(k + 1) * d]);
            z[k * d..(k + 1) * d].copy_from_slice(&p);
        }
        for l in &mut z[self.members.len() * d..] {
            *l = l.max(0.0);
            if let Some(c) = self.dual_cap {
                *l = l.min(c);
            }
        }
    }

    /// Flattened map value with the dual block negated (descent direction).
    pub fn eval_flat(&self, z: &[f64]) -> Vec<f64> {
        let state = self.unflatten(z);
        let (primal, dual) = self.eval(&state);
        let mut out: Vec<f64> = primal.into_iter().flatten().collect();
        out.extend(dual.iter().map(|g| -g));
        out
    }

    pub fn flatten(&self, state: &PrimalDualState) -> Vec<f64> {
        let mut z: Vec<f64> = state.theta.iter().flatten().copied().collect();
        z.extend_from_slice(&state.lambda);
        z
    }

    pub fn unflatten(&self, z: &[f64]) -> PrimalDualState {
        let d = self.problem.dim();
        let m = self.members.len();
        PrimalDualState::new(
            z[..m * d].chunks(d).map(<[f64]>::to_vec).collect(),
            z[m * d..].to_vec(),
        )
    }

    /// Natural residual `||z - P(z - Phi(z))||`; zero exactly at saddle points.
    pub fn natural_residual(&self, state: &PrimalDualState) -> f64 {
        let z = self.flatten(state);
        let f = self.eval_flat(&z);
        let mut moved: Vec<f64> = z.iter().zip(&f).map(|(a, b)| a - b).collect();
        self.project_flat(&mut moved);
        dist_sq(&z, &moved).sqrt()
    }

    /// Exact spectral norm of the Jacobian when the map is affine.
    pub fn exact_lipschitz(&self) -> Option<f64> {
        if !self.problem.is_quadratic() {
            return None;
        }
        let d = self.problem.dim();
        let m = self.members.len();
        let size = self.size();
        let n = self.n();
        let v = self.problem.upsilon();
        let mut j = DMatrix::<f64>::zeros(size, size);
        let origin = vec![0.0; d];
        for (k, &agent) in self.members.iter().enumerate() {
            let h = self.problem.utilities()[agent].quadratic_hessian()?;
            for a in 0..d {
                j[(k * d + a, k * d + a)] = (h + v) / n;
            }
        }
        for (t, g) in self.problem.constraints().iter().enumerate() {
            let grad = g.gradient(&origin);
            let row = m * d + t;
            for k in 0..m {
                for a in 0..d {
                    j[(k * d + a, row)] = grad[a] / n;
                    j[(row, k * d + a)] = -self.scale / m as f64 * grad[a];
                }
            }
            j[(row, row)] = v;
        }
        Some(spectral_norm(&j))
    }

    /// Sup of `|g_t(x)|` over reachable arguments, divided by `v`: the level the
    /// regularized dual update never exceeds from a start below it.
    pub fn default_dual_bound(&self) -> Result<f64> {
        let v = self.problem.upsilon();
        if !(v > 0.0) {
            return Err(Error::invalid("upsilon", "a dual bound needs upsilon > 0"));
        }
        let sup = self
            .argument_extremes()
            .iter()
            .flat_map(|x| self.constraint_values(x))
            .fold(0.0, |m: f64, g| m.max(g.abs()));
        Ok((sup / v).max(f64::MIN_POSITIVE))
    }

    /// Arguments built from support points of every member set, for all sign
    /// patterns (exact vertex enumeration for boxes) plus sampled directions.
    fn argument_extremes(&self) -> Vec<Vec<f64>> {
        let d = self.problem.dim();
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        if d <= 10 {
            for mask in 0..1usize << d {
                dirs.push(
                    (0..d)
                        .map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 })
                        .collect(),
                );
            }
        }
        for g in self.problem.constraints() {
            let a = g.gradient(&vec![0.0; d]);
            dirs.push(a.clone());
            dirs.push(a.iter().map(|x| -x).collect());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5ad_d1e);
        for _ in 0..64 {
            dirs.push(
                (0..d)
                    .map(|_| crate::problem::standard_normal(&mut rng))
                    .collect(),
            );
        }
        let sets = self.problem.sets();
        dirs.iter()
            .map(|u| {
                let pts: Vec<Vec<f64>> = self
                    .members
                    .iter()
                    .map(|&m| support_point(&sets[m], u))
                    .collect();
                self.argument(&pts)
            })
            .collect()
    }

    /// Monotonicity modulus of the symmetric part of the Jacobian at `state`
    /// (central differences): a diagnostic for the strong-monotonicity premise.
    pub fn monotonicity_modulus(&self, state: &PrimalDualState) -> f64 {
        let j = self.finite_difference_jacobian(&self.flatten(state));
        let sym = (&j + j.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    fn finite_difference_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let size = z.len();
        let mut j = DMatrix::<f64>::zeros(size, size);
        let mut probe = z.to_vec();
        for c in 0..size {
            let h = 1e-6 * (1.0 + z[c].abs());
            probe[c] = z[c] + h;
            let up = self.eval_flat(&probe);
            probe[c] = z[c] - h;
            let down = self.eval_flat(&probe);
            probe[c] = z[c];
            for r in 0..size {
                j[(r, c)] = (up[r] - down[r]) / (2.0 * h);
            }
        }
        j
    }

    fn sample_state<R: Rng>(&self, rng: &mut R, lambda_max: f64) -> PrimalDualState {
        let sets = self.problem.sets();
        PrimalDualState::new(
            self.members.iter().map(|&m| sets[m].sample(rng)).collect(),
            (0..self.problem.constraint_count())
                .map(|_| rng.gen::<f64>() * lambda_max)
                .collect(),
        )
    }

    /// Sampled Lipschitz estimate: max of finite-difference Jacobian norms and
    /// pair ratios over feasible states, times a safety factor of 2.
    pub fn sampled_lipschitz(&self, samples: usize, seed: u64) -> f64 {
        let lambda_max = self
            .dual_cap
            .or_else(|| self.default_dual_bound().ok())
            .unwrap_or(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: f64 = 0.0;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        for _ in 0..samples.max(1) {
            let z = self.flatten(&self.sample_state(&mut rng, lambda_max));
            let f = self.eval_flat(&z);
            best = best.max(spectral_norm(&self.finite_difference_jacobian(&z)));
            if let Some((pz, pf)) = &prev {
                let dz = dist_sq(&z, pz).sqrt();
                if dz > 0.0 {
                    best = best.max(dist_sq(&f, pf).sqrt() / dz);
                }
            }
            prev = Some((z, f));
        }
        2.0 * best
    }
}

fn support_point(set: &FeasibleSet, u: &[f64]) -> Vec<f64> {
    match set {
        FeasibleSet::Box { lower, upper } => u
            .iter()
            .zip(lower.iter().zip(upper))
            .map(|(d, (l, h))| {
                if *d > 0.0 {
                    *h
                } else if *d < 0.0 {
                    *l
                } else {
                    0.5 * (l + h)
                }
            })
            .collect(),
        FeasibleSet::Ball { center, radius } => {
            let n = norm(u);
            if n == 0.0 {
                center.clone()
            } else {
                center
                    .iter()
                    .zip(u)
                    .map(|(c, d)| c + radius * d / n)
                    .collect()
            }
        }
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

/// Gradient of the regularized Lagrangian in `theta_i`, at the exact mean.
pub fn primal_gradient(
    problem: &AllocationProblem,
    state: &PrimalDualState,
    i: usize,
) -> Result<Vec<f64>> {
    let map = SaddleMap::baseline(problem);
    map.check_state(state)?;
    if i >= problem.agents() {
        return Err(Error::invalid("i", format!("agent index {i} out of range")));
    }
    let x = map.argument(&state.theta);
    let g_hat = map.weighted_gradient(&state.lambda, &x);
    let gu = problem.utilities()[i].gradient(&state.theta[i]);
    let n = problem.agents() as f64;
    let v = problem.upsilon();
    Ok(state.theta[i]
        .iter()
        .zip(gu.iter().zip(&g_hat))
        .map(|(x, (a, b))| (a + v * x + b) / n)
        .collect())
}

/// `g_t(mean) - v lambda_t` for every constraint.
pub fn dual_gradient(problem: &AllocationProblem, state: &PrimalDualState) -> Result<Vec<f64>> {
    let map = SaddleMap::baseline(problem);
    map.check_state(state)?;
    let x = map.argument(&state.theta);
    Ok(map
        .constraint_values(&x)
        .iter()
        .zip(&state.lambda)
        .map(|(g, l)| g - problem.upsilon() * l)
        .collect())
}

/// One Jacobi projected descent-ascent step from `state`.
pub fn pda_step(
    problem: &AllocationProblem,
    state: &PrimalDualState,
    config: &StepConfig,
) -> Result<PrimalDualState> {
    config.validate()?;
    let map = SaddleMap::baseline(problem);
    map.check_state(state)?;
    let next = map.step(state, config.gamma);
    next.check_finite()?;
    Ok(next)
}

/// Runs the baseline iteration, measuring residuals against the reference saddle point.
pub fn run_pd_dra(
    problem: &AllocationProblem,
    init: &PrimalDualState,
    config: &StepConfig,
) -> Result<RunTrace> {
    let reference = reference_saddle_point(problem)?;
    run_map(&SaddleMap::baseline(problem), init, config, &reference)
}

/// Runs the projected iteration of `map` against a known reference point.
pub fn run_map(
    map: &SaddleMap,
    init: &PrimalDualState,
    config: &StepConfig,
    reference: &PrimalDualState,
) -> Result<RunTrace> {
    config.validate()?;
    map.check_state(init)?;
    map.check_state(reference)?;
    for (k, &m) in map.members.iter().enumerate() {
        if !map.problem.sets()[m].contains(&init.theta[k], 1e-9) {
            return Err(Error::invalid(
                format!("init.theta[{m}]"),
                "initial point must be feasible",
            ));
        }
    }
    if init.lambda.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("init.lambda", "initial prices must be >= 0"));
    }
    let mut trace = RunTrace::new(map.problem.constraint_count());
    let mut state = init.clone();
    state.iteration = 0;
    state.check_finite()?;
    for _ in 0..config.max_iters {
        let next = map.step(&state, config.gamma);
        next.check_finite()?;
        let x = map.argument(&state.theta);
        let step_norm = state.distance_sq(&next).sqrt();
        let residual_sq = state.distance_sq(reference);
        if !residual_sq.is_finite() {
            return Err(Error::NonFinite {
                iteration: state.iteration,
                quantity: "residual".into(),
            });
        }
        trace.rows.push(TraceRow {
            iteration: state.iteration,
            residual_sq,
            lambda: state.lambda.clone(),
            gbar: map.constraint_values(&x),
            step_norm,
            resilient: None,
        });
        state = next;
        if step_norm <= config.stop_tol {
            break;
        }
    }
    trace.final_state = Some(state);
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceConfig {
    /// Target natural residual.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            tol: 1e-10,
            max_iters: 2_000_000,
        }
    }
}

/// Saddle point of `target` to natural residual 1e-10.
pub fn reference_saddle_point(target: impl Into<SaddleMap>) -> Result<PrimalDualState> {
    reference_saddle_point_with(&target.into(), &ReferenceConfig::default())
}

/// Projected extragradient with a block metric (primal step `N eta`, dual step
/// `eta`) and backtracking on `eta`.
pub fn reference_saddle_point_with(
    map: &SaddleMap,
    cfg: &ReferenceConfig,
) -> Result<PrimalDualState> {
    if !(map.problem.upsilon() > 0.0) {
        return Err(Error::invalid(
            "upsilon",
            "the reference solver needs upsilon > 0",
        ));
    }
    let primal_len = map.members.len() * map.problem.dim();
    let n = map.n();
    let metric = |i: usize| if i < primal_len { n } else { 1.0 };
    let mut z = map.flatten(&PrimalDualState::new(
        map.members
            .iter()
            .map(|&m| map.problem.sets()[m].project_unchecked(&vec![0.0; map.problem.dim()]))
            .collect(),
        vec![0.0; map.problem.constraint_count()],
    ));
    let mut eta = 1.0;
    let mut residual = f64::INFINITY;
    let mut f = map.eval_flat(&z);
    for it in 0..cfg.max_iters {
        if it % 16 == 0 {
            residual = natural_residual_flat(map, &z, &f);
            if !residual.is_finite() {
                return Err(Error::NonFinite {
                    iteration: it,
                    quantity: "reference residual".into(),
                });
            }
            if residual <= cfg.tol {
                return Ok(map.unflatten(&z));
            }
        }
        loop {
            let mut half: Vec<f64> = z
                .iter()
                .enumerate()
                .map(|(i, x)| x - eta * metric(i) * f[i])
                .collect();
            map.project_flat(&mut half);
            let fh = map.eval_flat(&half);
            // ||D (F(h) - F(z))||_{D^-1} <= 0.9 ||h - z||_{D^-1}
            let lhs: f64 = (0..z.len())
                .map(|i| eta * metric(i) * (fh[i] - f[i]).powi(2))
                .sum::<f64>()
                * eta;
            let rhs: f64 = (0..z.len())
                .map(|i| (half[i] - z[i]).powi(2) / metric(i))
                .sum::<f64>();
            if lhs <= 0.81 * rhs || rhs == 0.0 {
                let mut next: Vec<f64> = z
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x - eta * metric(i) * fh[i])
                    .collect();
                map.project_flat(&mut next);
                z = next;
                f = map.eval_flat(&z);
                if lhs <= 0.25 * rhs {
                    eta = (eta * 1.2).min(1e6);
                }
                break;
            }
            eta *= 0.5;
            if eta < 1e-300 {
                return Err(Error::NoConvergence {
                    iterations: it,
                    residual,
                });
            }
        }
    }
    let residual = natural_residual_flat(map, &z, &f);
    if residual <= cfg.tol {
        return Ok(map.unflatten(&z));
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iters,
        residual,
    })
}

fn natural_residual_flat(map: &SaddleMap, z: &[f64], f: &[f64]) -> f64 {
    let mut moved: Vec<f64> = z.iter().zip(f).map(|(a, b)| a - b).collect();
    map.project_flat(&mut moved);
    dist_sq(z, &moved).sqrt()
}

/// Lipschitz constant of the saddle map: exact for affine maps, otherwise a
/// sampled upper estimate.
pub fn estimate_lipschitz(target: impl Into<SaddleMap>) -> f64 {
    let map = target.into();
    map.exact_lipschitz()
        .unwrap_or_else(|| map.sampled_lipschitz(64, 0x11ee))
}

/// `1 - 2 gamma mu + gamma^2 L^2`, the squared-distance contraction of a
/// projected step on a `mu`-strongly monotone, `L`-Lipschitz map.
pub fn contraction_factor(gamma: f64, mu: f64, l_phi: f64) -> f64 {
    1.0 - 2.0 * gamma * mu + gamma * gamma * l_phi * l_phi
}

/// The optimizing step `v / L^2` with factor `1 - v^2 / L^2`.
pub fn default_gamma(upsilon: f64, l_phi: f64) -> f64 {
    upsilon / (l_phi * l_phi)
}
