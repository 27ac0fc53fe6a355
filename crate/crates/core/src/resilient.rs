//! Resilient primal-dual loop: the coordinator replaces the naive average with
//! a robust estimate, prices the conservative constraints at that estimate,
//! and broadcasts the price signal over trusted downlinks.
//!
//! Against the saddle point of the conservative problem restricted to the
//! trusted agents, every iteration is an exact projected step plus gradient
//! errors `e_theta`, `e_lambda` that are linear in the estimation error; the
//! trace records both so the perturbed-contraction bound can be checked.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationRule;
use crate::attack::{apply_attack, contamination_stats, AttackHistory, AttackPlan};
use crate::engine::{
    dual_update, estimate_lipschitz, primal_update, reference_saddle_point_with, PrimalDualState,
    ReferenceConfig, SaddleMap, StepConfig,
};
use crate::error::{check_dim, Error, Result};
use crate::problem::{weighted_gradient, RobustProblemView};
use crate::trace::{BoundParams, ResilientColumns, RunTrace, TraceRow};
use crate::vecops::{all_finite, dist, mean_rows, norm, scale};

/// What the coordinator broadcasts each iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSignal {
    pub theta_hat: Vec<f64>,
    /// `sum_t lambda_t grad gbar_t(s * theta_hat)`
    pub g_hat: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Builds the broadcast with every constraint gradient evaluated at `s * theta_hat`.
pub fn price_signal(
    view: &RobustProblemView,
    theta_hat: &[f64],
    lambda: &[f64],
    s: f64,
) -> Result<PriceSignal> {
    check_dim("estimate", view.base().dim(), theta_hat.len())?;
    check_dim("dual vector", view.base().constraint_count(), lambda.len())?;
    let x = scale(theta_hat, s);
    let g_hat = weighted_gradient(view.conservative_constraints(), lambda, &x);
    let signal = PriceSignal {
        theta_hat: theta_hat.to_vec(),
        g_hat,
        lambda: lambda.to_vec(),
    };
    if !all_finite(&signal.g_hat) || !all_finite(&signal.theta_hat) {
        return Err(Error::invalid("price_signal", "entries must be finite"));
    }
    Ok(signal)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub e_theta_norm: f64,
    pub e_lambda_norm: f64,
    /// `e_theta_norm^2 + e_lambda_norm^2`
    pub e_k: f64,
    pub est_error: f64,
}

/// Upper clip on the dual prices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualCap {
    lambda_bar: f64,
}

impl DualCap {
    pub fn new(lambda_bar: f64) -> Result<Self> {
        if !(lambda_bar > 0.0 && lambda_bar.is_finite()) {
            return Err(Error::invalid("lambda_bar", "must be finite and > 0"));
        }
        Ok(DualCap { lambda_bar })
    }

    pub fn value(&self) -> f64 {
        self.lambda_bar
    }
}

/// `P(theta_i - (gamma / N)(g_hat + grad U_i + v theta_i))` for agent `i`.
pub fn resilient_primal_step(
    view: &RobustProblemView,
    i: usize,
    theta_i: &[f64],
    price: &PriceSignal,
    gamma: f64,
) -> Result<Vec<f64>> {
    let p = view.conservative_problem();
    if i >= p.agents() {
        return Err(Error::invalid("i", format!("agent index {i} out of range")));
    }
    check_dim("agent parameter", p.dim(), theta_i.len())?;
    check_dim("price signal", p.dim(), price.g_hat.len())?;
    Ok(primal_update(
        &p.utilities()[i],
        &p.sets()[i],
        theta_i,
        &price.g_hat,
        p.upsilon(),
        p.agents() as f64,
        gamma,
    ))
}

/// `[lambda_t + gamma (gbar_t(s * theta_hat) - v lambda_t)]_+`, clipped at the cap.
pub fn resilient_dual_step(
    view: &RobustProblemView,
    lambda: &[f64],
    theta_hat: &[f64],
    gamma: f64,
    s: f64,
    cap: Option<DualCap>,
) -> Result<Vec<f64>> {
    let p = view.conservative_problem();
    check_dim("dual vector", p.constraint_count(), lambda.len())?;
    check_dim("estimate", p.dim(), theta_hat.len())?;
    if lambda.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("lambda", "dual prices must be >= 0"));
    }
    let x = scale(theta_hat, s);
    let gvals: Vec<f64> = p.constraints().iter().map(|g| g.value(&x)).collect();
    Ok(dual_update(
        lambda,
        &gvals,
        p.upsilon(),
        gamma,
        cap.map(|c| c.value()),
    ))
}

/// Gradient errors caused by using `theta_hat` in place of `theta_bar_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    /// Common block `(1/N) sum_t lambda_t (grad gbar_t(s theta_hat) - grad gbar_t(s theta_bar))`,
    /// repeated for every trusted agent.
    pub e_theta_block: Vec<f64>,
    /// `gbar_t(s theta_hat) - gbar_t(s theta_bar)` per constraint.
    pub e_lambda: Vec<f64>,
}

impl Perturbation {
    /// Norm of the stacked primal error over `honest` agent blocks.
    pub fn e_theta_norm(&self, honest: usize) -> f64 {
        (honest as f64).sqrt() * norm(&self.e_theta_block)
    }

    pub fn e_lambda_norm(&self) -> f64 {
        norm(&self.e_lambda)
    }
}

pub fn perturbation_vectors(
    view: &RobustProblemView,
    theta_hat: &[f64],
    theta_bar_h: &[f64],
    lambda: &[f64],
    s: f64,
) -> Result<Perturbation> {
    let p = view.conservative_problem();
    check_dim("estimate", p.dim(), theta_hat.len())?;
    check_dim("trusted mean", p.dim(), theta_bar_h.len())?;
    check_dim("dual vector", p.constraint_count(), lambda.len())?;
    let xh = scale(theta_hat, s);
    let xb = scale(theta_bar_h, s);
    let gh = weighted_gradient(p.constraints(), lambda, &xh);
    let gb = weighted_gradient(p.constraints(), lambda, &xb);
    let n = p.agents() as f64;
    Ok(Perturbation {
        e_theta_block: gh.iter().zip(&gb).map(|(a, b)| (a - b) / n).collect(),
        e_lambda: p
            .constraints()
            .iter()
            .map(|g| g.value(&xh) - g.value(&xb))
            .collect(),
    })
}

/// `(lambda_bar L T err, B T err)`.
pub fn lemma2_bounds(
    lambda_bar: f64,
    lipschitz: f64,
    grad_bound: f64,
    constraints: usize,
    est_error: f64,
) -> Result<(f64, f64)> {
    for (name, v) in [
        ("lambda_bar", lambda_bar),
        ("L", lipschitz),
        ("B", grad_bound),
        ("est_error", est_error),
    ] {
        if !(v >= 0.0) {
            return Err(Error::invalid(name, "must be >= 0"));
        }
    }
    let t = constraints as f64;
    Ok((
        lambda_bar * lipschitz * t * est_error,
        grad_bound * t * est_error,
    ))
}

/// Per-step contraction `1 - gamma v + 2 gamma^2 L^2` of the perturbed iteration.
pub fn theorem1_rate(upsilon: f64, gamma: f64, l_phi: f64) -> f64 {
    1.0 - gamma * upsilon + 2.0 * gamma * gamma * l_phi * l_phi
}

/// `(4/v + 2 gamma) / (v - 2 gamma L^2) * e_bar`, or `None` outside the
/// contracting regime `gamma < v / (2 L^2)`.
pub fn theorem1_limit_bound(upsilon: f64, gamma: f64, l_phi: f64, e_bar: f64) -> Option<f64> {
    let denom = upsilon - 2.0 * gamma * l_phi * l_phi;
    (denom > 0.0).then(|| (4.0 / upsilon + 2.0 * gamma) / denom * e_bar)
}

pub(crate) fn recursion_holds(
    residual_sq: f64,
    next_residual_sq: f64,
    e_k: f64,
    p: BoundParams,
) -> bool {
    let rhs = theorem1_rate(p.upsilon, p.gamma, p.l_phi) * residual_sq
        + (4.0 * p.gamma / p.upsilon + 2.0 * p.gamma * p.gamma) * e_k
        + 1e-9;
    next_residual_sq <= rhs
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecursionReport {
    /// One entry per transition `k -> k+1`.
    pub per_step: Vec<bool>,
    pub limit_bound: Option<f64>,
}

pub fn theorem1_recursion_check(
    trace: &RunTrace,
    upsilon: f64,
    gamma: f64,
    l_phi: f64,
) -> RecursionReport {
    let params = BoundParams {
        upsilon,
        gamma,
        l_phi,
    };
    let e = |k: usize| trace.rows[k].resilient.as_ref().map_or(0.0, |c| c.e_k);
    let per_step = trace
        .rows
        .windows(2)
        .enumerate()
        .map(|(k, w)| recursion_holds(w[0].residual_sq, w[1].residual_sq, e(k), params))
        .collect();
    let e_bar = (0..trace.len()).map(e).fold(0.0, f64::max);
    RecursionReport {
        per_step,
        limit_bound: theorem1_limit_bound(upsilon, gamma, l_phi, e_bar),
    }
}

/// How the coordinator scales the estimate inside the constraints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `1 - alpha`, available to an oblivious coordinator.
    #[default]
    OneMinusAlpha,
    /// `|H| / N`, known only in simulation.
    TrueFraction,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualCapSetting {
    Off,
    /// Sup of `|gbar_t|` over reachable arguments, divided by `v`.
    #[default]
    Default,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResilientConfig {
    pub step: StepConfig,
    pub scaling: Scaling,
    pub dual_cap: DualCapSetting,
    /// Lipschitz constant for the bound checks; estimated when `None`.
    pub l_phi: Option<f64>,
    /// Seeds the filter's random-column draw.
    pub seed: u64,
    pub reference: ReferenceConfig,
}

impl ResilientConfig {
    pub fn new(step: StepConfig) -> Self {
        ResilientConfig {
            step,
            scaling: Scaling::default(),
            dual_cap: DualCapSetting::default(),
            l_phi: None,
            seed: 0,
            reference: ReferenceConfig::default(),
        }
    }
}

/// Trace plus the quantities it was measured against.
#[derive(Clone, Debug)]
pub struct ResilientRun {
    pub trace: RunTrace,
    pub reference: PrimalDualState,
    pub honest: Vec<usize>,
    pub scale: f64,
    pub lambda_bar: Option<f64>,
    pub l_phi: f64,
}

impl ResilientRun {
    pub fn bound_params(&self, upsilon: f64, gamma: f64) -> BoundParams {
        BoundParams {
            upsilon,
            gamma,
            l_phi: self.l_phi,
        }
    }
}

/// Resolves scaling and dual cap and builds the map whose saddle point the run targets.
pub fn robust_map(
    view: &RobustProblemView,
    plan: &AttackPlan,
    config: &ResilientConfig,
) -> Result<SaddleMap> {
    let n = view.base().agents();
    let honest = plan.honest();
    let s = match config.scaling {
        Scaling::OneMinusAlpha => 1.0 - view.alpha(),
        Scaling::TrueFraction => honest.len() as f64 / n as f64,
        Scaling::Fixed(s) => s,
    };
    let map = SaddleMap::robust(view, &honest, s, None)?;
    let cap = match config.dual_cap {
        DualCapSetting::Off => None,
        DualCapSetting::Default => Some(map.default_dual_bound()?),
        DualCapSetting::Fixed(c) => Some(DualCap::new(c)?.value()),
    };
    Ok(map.with_dual_cap(cap))
}

/// Runs the resilient loop from `init` (parameters of all `N` agents).
pub fn run_resilient_pd_dra(
    view: &RobustProblemView,
    init: &PrimalDualState,
    plan: &AttackPlan,
    rule: &AggregationRule,
    config: &ResilientConfig,
) -> Result<ResilientRun> {
    let map = robust_map(view, plan, config)?;
    let reference = reference_saddle_point_with(&map, &config.reference)?;
    let l_phi = config.l_phi.unwrap_or_else(|| estimate_lipschitz(&map));
    run_resilient_against(view, init, plan, rule, config, &map, reference, l_phi)
}

/// Same as [`run_resilient_pd_dra`] with a precomputed map, reference point and
/// Lipschitz constant.
#[allow(clippy::too_many_arguments)]
pub fn run_resilient_against(
    view: &RobustProblemView,
    init: &PrimalDualState,
    plan: &AttackPlan,
    rule: &AggregationRule,
    config: &ResilientConfig,
    map: &SaddleMap,
    reference: PrimalDualState,
    l_phi: f64,
) -> Result<ResilientRun> {
    config.step.validate()?;
    rule.validate()?;
    let p = view.conservative_problem();
    p.check_theta(&init.theta)?;
    check_dim("dual vector", p.constraint_count(), init.lambda.len())?;
    check_dim("attack plan agents", p.agents(), plan.agents())?;
    if let Some(a) = rule.alpha() {
        if (a - view.alpha()).abs() > 1e-12 {
            return Err(Error::invalid(
                "rule.alpha",
                "must match the robust view's alpha",
            ));
        }
    }
    for (i, (t, set)) in init.theta.iter().zip(p.sets()).enumerate() {
        if !set.contains(t, 1e-9) {
            return Err(Error::invalid(
                format!("init.theta[{i}]"),
                "initial point must be feasible",
            ));
        }
    }
    let cap = map.dual_cap();
    if init
        .lambda
        .iter()
        .any(|l| !(*l >= 0.0) || cap.is_some_and(|c| *l > c))
    {
        return Err(Error::invalid(
            "init.lambda",
            "initial prices must lie in [0, lambda_bar]",
        ));
    }
    let honest = map.members().to_vec();
    let s = map.scale();
    let n = p.agents() as f64;
    let d = p.dim();
    let v = p.upsilon();
    let gamma = config.step.gamma;
    let t_count = p.constraint_count();
    let l_max = p.max_lipschitz();
    let b_max = p.max_grad_bound();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = AttackHistory::for_plan(plan);
    let mut trace = RunTrace::new(t_count);
    let mut state = init.clone();
    state.iteration = 0;
    for _ in 0..config.step.max_iters {
        history.record(&state.theta);
        let batch = apply_attack(&state.theta, plan, &history)?;
        let estimate = rule.estimate(&batch, &mut rng)?;
        let theta_hat = estimate.value.clone();
        if !all_finite(&theta_hat) {
            return Err(Error::NonFinite {
                iteration: state.iteration,
                quantity: "theta_hat".into(),
            });
        }
        let theta_bar = mean_rows(honest.iter().map(|&i| state.theta[i].as_slice()), d);
        let est_error = dist(&theta_hat, &theta_bar);

        let price = price_signal(view, &theta_hat, &state.lambda, s)?;
        let x_hat = scale(&theta_hat, s);
        let gvals: Vec<f64> = p.constraints().iter().map(|g| g.value(&x_hat)).collect();
        let pert = perturbation_vectors(view, &theta_hat, &theta_bar, &state.lambda, s)?;
        let e_theta_norm = pert.e_theta_norm(honest.len());
        let e_lambda_norm = pert.e_lambda_norm();
        let lambda_bar = cap.unwrap_or_else(|| state.lambda.iter().copied().fold(0.0, f64::max));
        let (e_theta_bound, e_lambda_bound) =
            lemma2_bounds(lambda_bar, l_max, b_max, t_count, est_error)?;
        let contamination = contamination_stats(&batch, plan)?;

        let theta: Vec<Vec<f64>> = state
            .theta
            .iter()
            .enumerate()
            .map(|(i, t)| {
                primal_update(
                    &p.utilities()[i],
                    &p.sets()[i],
                    t,
                    &price.g_hat,
                    v,
                    n,
                    gamma,
                )
            })
            .collect();
        let next = PrimalDualState {
            theta,
            lambda: dual_update(&state.lambda, &gvals, v, gamma, cap),
            iteration: state.iteration + 1,
        };
        for (i, t) in next.theta.iter().enumerate() {
            if !all_finite(t) {
                return Err(Error::NonFinite {
                    iteration: next.iteration,
                    quantity: format!("theta[{i}]"),
                });
            }
        }
        if !all_finite(&next.lambda) {
            return Err(Error::NonFinite {
                iteration: next.iteration,
                quantity: "lambda".into(),
            });
        }
        let residual_sq = state.distance_sq_members(&honest, &reference);
        let step_norm = {
            let here: PrimalDualState = PrimalDualState::new(
                honest.iter().map(|&i| next.theta[i].clone()).collect(),
                next.lambda.clone(),
            );
            state.distance_sq_members(&honest, &here).sqrt()
        };
        trace.rows.push(TraceRow {
            iteration: state.iteration,
            residual_sq,
            lambda: state.lambda.clone(),
            gbar: gvals,
            step_norm,
            resilient: Some(ResilientColumns {
                est_error,
                e_theta_norm,
                e_lambda_norm,
                e_k: e_theta_norm * e_theta_norm + e_lambda_norm * e_lambda_norm,
                recursion_ok: None,
                naive_displacement: contamination.displacement,
                radius_max: estimate.radius_max(),
                filter_iters: estimate.diagnostics.filter_iters,
                removed_count: estimate.diagnostics.removed.len(),
                e_theta_bound,
                e_lambda_bound,
            }),
        });
        state = next;
        if step_norm <= config.step.stop_tol {
            break;
        }
    }
    trace.final_state = Some(state);
    let run = ResilientRun {
        trace,
        reference,
        honest,
        scale: s,
        lambda_bar: cap,
        l_phi,
    };
    let mut run = run;
    let params = run.bound_params(v, gamma);
    run.trace.annotate_recursion(params);
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Strategy;
    use crate::engine::run_map;
    use crate::problem::{
        robust_view, AllocationProblem, ConstraintFunction, FeasibleSet, UtilityFunction,
    };
    use approx::assert_abs_diff_eq;

    fn scalar_view(
        constraint: ConstraintFunction,
        alpha: f64,
        lo: f64,
        hi: f64,
    ) -> RobustProblemView {
        let p = AllocationProblem::new(
            vec![UtilityFunction::quadratic(0.5, vec![0.0], 0.0).unwrap()],
            vec![constraint],
            vec![FeasibleSet::boxed(vec![lo], vec![hi]).unwrap()],
            0.1,
            None,
        )
        .unwrap();
        robust_view(&p, alpha).unwrap()
    }

    #[test]
    fn primal_step_examples() {
        let view = scalar_view(
            ConstraintFunction::linear(vec![1.0], 0.5).unwrap(),
            0.0,
            -1.0,
            1.0,
        );
        let price = PriceSignal {
            theta_hat: vec![1.0],
            g_hat: vec![0.5],
            lambda: vec![0.5],
        };
        assert_abs_diff_eq!(
            resilient_primal_step(&view, 0, &[1.0], &price, 0.1).unwrap()[0],
            0.84,
            epsilon = 1e-15
        );

        let flat = AllocationProblem::new(
            vec![UtilityFunction::quadratic(0.0, vec![0.0], 0.0).unwrap()],
            vec![],
            vec![FeasibleSet::boxed(vec![-1.0], vec![1.0]).unwrap()],
            0.0,
            None,
        )
        .unwrap();
        let still = PriceSignal {
            theta_hat: vec![0.3],
            g_hat: vec![0.0],
            lambda: vec![],
        };
        let v = robust_view(&flat, 0.0).unwrap();
        assert_eq!(
            resilient_primal_step(&v, 0, &[0.3], &still, 0.7).unwrap(),
            vec![0.3]
        );
    }

    #[test]
    fn dual_step_examples() {
        // offset view: g = theta - 5, alpha = 0.25, R = 2, B = 1 gives +0.5; use 0.75 via R = 3
        let p = AllocationProblem::new(
            vec![UtilityFunction::quadratic(0.5, vec![0.0], 0.0).unwrap()],
            vec![ConstraintFunction::linear(vec![1.0], 5.0).unwrap()],
            vec![FeasibleSet::boxed(vec![-1.5], vec![1.5]).unwrap()],
            0.1,
            Some(3.0),
        )
        .unwrap();
        let view = robust_view(&p, 0.25).unwrap();
        assert_abs_diff_eq!(view.offsets()[0], 0.75, epsilon = 1e-15);
        assert_eq!(
            resilient_dual_step(&view, &[0.0], &[1.0], 0.1, 1.0, None).unwrap(),
            vec![0.0]
        );
        // equilibrium: gbar(s theta_hat) = v lambda
        let lam = view.conservative_value(0, &[1.5]) / 0.1;
        let out = resilient_dual_step(&view, &[lam.max(0.0)], &[1.5], 0.1, 1.0, None).unwrap();
        assert_abs_diff_eq!(out[0], lam.max(0.0), epsilon = 1e-12);
        let eq_view = scalar_view(
            ConstraintFunction::linear(vec![1.0], -1.0).unwrap(),
            0.0,
            -1.0,
            1.0,
        );
        // g(1) = 2 = 0.1 * 20
        let out = resilient_dual_step(&eq_view, &[20.0], &[1.0], 0.3, 1.0, None).unwrap();
        assert_abs_diff_eq!(out[0], 20.0, epsilon = 1e-12);
        let capped = resilient_dual_step(
            &eq_view,
            &[20.0],
            &[1.0],
            0.3,
            1.0,
            Some(DualCap::new(5.0).unwrap()),
        )
        .unwrap();
        assert_eq!(capped, vec![5.0]);
    }

    #[test]
    fn perturbation_examples() {
        let q = ConstraintFunction::quadratic(1.0, vec![0.0], 0.0, 10.0).unwrap();
        let view = scalar_view(q, 0.0, -2.0, 2.0);
        let e = perturbation_vectors(&view, &[1.1], &[1.0], &[2.0], 1.0).unwrap();
        assert_abs_diff_eq!(e.e_theta_block[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(e.e_lambda[0], 0.105, epsilon = 1e-12);
        let lin = scalar_view(
            ConstraintFunction::linear(vec![2.0], 0.0).unwrap(),
            0.0,
            -2.0,
            2.0,
        );
        let e = perturbation_vectors(&lin, &[1.1], &[1.0], &[2.0], 1.0).unwrap();
        assert_eq!(e.e_theta_block, vec![0.0]);
        assert!(e.e_lambda_norm() > 0.0);
        let zero = perturbation_vectors(&view, &[0.7], &[0.7], &[3.0], 0.8).unwrap();
        assert_eq!(zero.e_theta_norm(4), 0.0);
        assert_eq!(zero.e_lambda_norm(), 0.0);
    }

    #[test]
    fn lemma2_examples() {
        assert_eq!(lemma2_bounds(2.0, 0.5, 1.0, 1, 0.0).unwrap(), (0.0, 0.0));
        let (a, b) = lemma2_bounds(2.0, 0.5, 1.0, 1, 0.1).unwrap();
        assert_abs_diff_eq!(a, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(b, 0.1, epsilon = 1e-15);
        let (a3, b3) = lemma2_bounds(2.0, 0.5, 1.0, 3, 0.1).unwrap();
        assert_abs_diff_eq!(a3, 3.0 * a, epsilon = 1e-15);
        assert_abs_diff_eq!(b3, 3.0 * b, epsilon = 1e-15);
    }

    #[test]
    fn limit_bound_examples() {
        assert_abs_diff_eq!(
            theorem1_limit_bound(1.0, 0.1, 2.0, 0.01).unwrap(),
            0.21,
            epsilon = 1e-12
        );
        assert!(theorem1_limit_bound(1.0, 0.125, 2.0, 0.01).is_none());
    }

    #[test]
    fn step_size_trade_off_shape() {
        let (v, l) = (0.5, 2.0);
        let grid: Vec<f64> = (1..=12)
            .map(|j| j as f64 / 13.0 * v / (2.0 * l * l))
            .collect();
        let rates: Vec<f64> = grid.iter().map(|g| theorem1_rate(v, *g, l)).collect();
        let best = rates
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let star = v / (4.0 * l * l);
        assert!((grid[best] - star).abs() <= grid[0] + 1e-15);
        let bounds: Vec<f64> = grid
            .iter()
            .map(|g| theorem1_limit_bound(v, *g, l, 1.0).unwrap())
            .collect();
        assert!(bounds.windows(2).all(|w| w[1] > w[0]));
    }

    fn small_view(alpha: f64) -> RobustProblemView {
        let p = AllocationProblem::new(
            (0..5)
                .map(|i| UtilityFunction::quadratic(0.5, vec![i as f64], 0.0).unwrap())
                .collect(),
            vec![ConstraintFunction::linear(vec![1.0], 1.2).unwrap()],
            vec![FeasibleSet::boxed(vec![-5.0], vec![5.0]).unwrap(); 5],
            0.1,
            None,
        )
        .unwrap();
        robust_view(&p, alpha).unwrap()
    }

    #[test]
    fn attack_free_naive_run_matches_baseline() {
        let view = small_view(0.2);
        let plan = AttackPlan::none(5);
        let step = StepConfig::new(0.3, 200, 0.0).unwrap();
        let mut cfg = ResilientConfig::new(step);
        cfg.scaling = Scaling::TrueFraction;
        cfg.dual_cap = DualCapSetting::Off;
        let init = PrimalDualState::zeros(view.base());
        let run =
            run_resilient_pd_dra(&view, &init, &plan, &AggregationRule::NaiveMean, &cfg).unwrap();
        let base_map = SaddleMap::baseline(view.conservative_problem());
        let base = run_map(&base_map, &init, &step, &run.reference).unwrap();
        assert_eq!(base.len(), run.trace.len());
        for (a, b) in base.rows.iter().zip(&run.trace.rows) {
            assert!((a.residual_sq - b.residual_sq).abs() <= 1e-12);
            assert_eq!(a.lambda, b.lambda);
        }
        assert_eq!(base.final_state, run.trace.final_state);
        assert!(run
            .trace
            .rows
            .iter()
            .all(|r| r.resilient.as_ref().unwrap().e_k == 0.0));
    }

    #[test]
    fn median_run_respects_lemma2_and_recursion() {
        let view = small_view(0.2);
        let plan = AttackPlan::new(
            5,
            0.2,
            vec![4],
            Strategy::CoordinatedShift {
                target: vec![100.0],
            },
            3,
        )
        .unwrap();
        let mut cfg = ResilientConfig::new(StepConfig::new(0.05, 300, 0.0).unwrap());
        cfg.seed = 3;
        let map = robust_map(&view, &plan, &cfg).unwrap();
        let l = estimate_lipschitz(&map);
        cfg.step.gamma = 0.1 / (4.0 * l * l);
        let init = PrimalDualState::zeros(view.base());
        let run = run_resilient_pd_dra(
            &view,
            &init,
            &plan,
            &AggregationRule::MedianNeighborhood { alpha: 0.2 },
            &cfg,
        )
        .unwrap();
        for row in &run.trace.rows {
            let c = row.resilient.as_ref().unwrap();
            assert!(c.lemma2_ok());
            assert_ne!(c.recursion_ok, Some(false));
            assert!(row
                .lambda
                .iter()
                .all(|l| *l >= 0.0 && *l <= run.lambda_bar.unwrap()));
        }
        let summary = run
            .trace
            .summarize(Some(run.bound_params(0.1, cfg.step.gamma)));
        assert_eq!(summary.recursion_violations, Some(0));
    }
}
