//! Iterative filtering estimator: reweight points by their residuals under the
//! worst-case unit-trace quadratic form until the weighted residual mass is
//! consistent with the declared spread, then read the mean off the
//! reconstruction matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{check_batch, coordinate_median_of, neighborhood_size, Diagnostics, Estimate};
use crate::attack::UplinkBatch;
use crate::error::{Error, Result};
use crate::vecops::{dist_sq, mean_rows};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterBudget {
    /// Outer reweighting rounds.
    pub max_rounds: usize,
    /// Accelerated projected-gradient iterations per saddle solve.
    pub solver_iters: usize,
}

impl Default for FilterBudget {
    fn default() -> Self {
        FilterBudget {
            max_rounds: 64,
            solver_iters: 10_000,
        }
    }
}

impl FilterBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 || self.solver_iters == 0 {
            return Err(Error::invalid("rule.budget", "budgets must be >= 1"));
        }
        Ok(())
    }
}

/// Entry cap of the reconstruction matrix for an active set of size `n`:
/// `(3 + a) / ((1 - a)(3 - a) n)`. It equals `1/n` at `a = 0`, which forces
/// every column to the uniform average.
pub fn filter_cap(alpha: f64, n: usize) -> f64 {
    (3.0 + alpha) / ((1.0 - alpha) * (3.0 - alpha) * n as f64)
}

/// Euclidean projection onto `{0 <= x <= cap, sum x = 1}`.
pub fn capped_simplex_project(v: &[f64], cap: f64) -> Result<Vec<f64>> {
    let n = v.len();
    if n == 0 || !(cap > 0.0) || !cap.is_finite() || cap * (n as f64) < 1.0 - 1e-12 {
        return Err(Error::invalid(
            "cap",
            "capped simplex is empty (need cap * n >= 1)",
        ));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("v", "must be finite"));
    }
    if (cap * n as f64 - 1.0).abs() <= 1e-15 {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let mass = |tau: f64| v.iter().map(|x| (x - tau).clamp(0.0, cap)).sum::<f64>();
    let mut lo = v.iter().copied().fold(f64::INFINITY, f64::min) - cap;
    let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + hi.abs()) {
            break;
        }
    }
    let mut tau = 0.5 * (lo + hi);
    // exact shift on the active piece
    let (mut free_sum, mut free, mut upper) = (0.0, 0usize, 0usize);
    for x in v {
        let y = x - tau;
        if y >= cap {
            upper += 1;
        } else if y > 0.0 {
            free += 1;
            free_sum += x;
        }
    }
    if free > 0 {
        let exact = (free_sum + cap * upper as f64 - 1.0) / free as f64;
        let trial: f64 = mass(exact);
        if (trial - 1.0).abs() <= (mass(tau) - 1.0).abs() {
            tau = exact;
        }
    }
    Ok(v.iter().map(|x| (x - tau).clamp(0.0, cap)).collect())
}

/// Output of the inner max-min problem.
#[derive(Clone, Debug)]
pub struct SaddleSolution {
    /// Unit-trace PSD maximizer, `d x d`.
    pub y: DMatrix<f64>,
    /// Column-stochastic reconstruction matrix, `n x n`; column `i` reconstructs point `i`.
    pub w: DMatrix<f64>,
    pub tau: Vec<f64>,
    /// `sum_i c_i tau_i`.
    pub objective: f64,
    pub iterations: usize,
    /// `false` when the iteration budget ran out first.
    pub converged: bool,
}

struct Smoothed {
    value: f64,
    y: DMatrix<f64>,
}

fn residuals(x: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    x - x * w
}

fn weighted_scatter(delta: &DMatrix<f64>, c: &[f64]) -> DMatrix<f64> {
    let mut scaled = delta.clone();
    for (j, cj) in c.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*cj);
    }
    &scaled * delta.transpose()
}

/// Entropic smoothing `mu log tr exp(M / mu)` of the top eigenvalue and its
/// gradient, the softmax-weighted eigenprojector.
fn smoothed_max_eig(m: &DMatrix<f64>, mu: f64) -> Smoothed {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.max();
    let weights: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|l| ((l - top) / mu).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let d = m.nrows();
    let mut y = DMatrix::<f64>::zeros(d, d);
    for (k, wk) in weights.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        y += (v * v.transpose()) * (wk / total);
    }
    Smoothed {
        value: top + mu * total.ln(),
        y,
    }
}

fn project_columns(w: &mut DMatrix<f64>, cap: f64) -> Result<()> {
    for j in 0..w.ncols() {
        let col: Vec<f64> = w.column(j).iter().copied().collect();
        let p = capped_simplex_project(&col, cap)?;
        w.column_mut(j).copy_from_slice(&p);
    }
    Ok(())
}

/// Solves `max_Y min_W sum_i c_i (x_i - X w_i)' Y (x_i - X w_i)` over unit-trace
/// PSD `Y` and column-stochastic `W` with entries in `[0, cap]`.
///
/// The inner value is `lambda_max(M(W))` with `M(W) = sum_i c_i d_i d_i'`, a convex
/// function of `W`; it is minimized by accelerated projected gradient with
/// restarts and backtracking on an entropic smoothing of `lambda_max`, and `Y`
/// is the smoothed eigenprojector.
pub fn saddle_solve(
    points: &[Vec<f64>],
    c: &[f64],
    cap: f64,
    budget: usize,
) -> Result<SaddleSolution> {
    let n = points.len();
    let d = check_batch(points)?;
    crate::error::check_dim("filter weights", n, c.len())?;
    if cap * (n as f64) < 1.0 - 1e-12 {
        return Err(Error::invalid("cap", "need cap * n >= 1"));
    }
    let raw = DMatrix::from_fn(d, n, |r, col| points[col][r]);
    let x = DMatrix::from_fn(d, n, |r, col| raw[(r, col)] - raw.row(r).mean());
    let mut w = DMatrix::from_element(n, n, 1.0 / n as f64);
    let scatter0 = weighted_scatter(&residuals(&x, &w), c);
    let scale = SymmetricEigen::new(scatter0.clone())
        .eigenvalues
        .max()
        .max(0.0);
    let mu = 1e-4 * scale.max(f64::MIN_POSITIVE);
    let eval = |w: &DMatrix<f64>| smoothed_max_eig(&weighted_scatter(&residuals(&x, w), c), mu);
    let mut cur = eval(&w);
    let mut step = 1.0
        / (2.0 * c.iter().copied().fold(0.0, f64::max).max(1e-300) * (x.norm_squared() + 1e-300));
    let mut converged = scale == 0.0;
    let mut iterations = 0;
    let mut momentum = 1.0f64;
    let mut w_prev = w.clone();
    while !converged && iterations < budget {
        iterations += 1;
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let probe = &w + (&w - &w_prev) * ((momentum - 1.0) / next_momentum);
        let at_probe = eval(&probe);
        // grad wrt w_i is -2 c_i X' Y d_i
        let delta = residuals(&x, &probe);
        let mut grad = x.transpose() * (&at_probe.y * &delta) * -2.0;
        for (j, cj) in c.iter().enumerate() {
            grad.column_mut(j).scale_mut(*cj);
        }
        let mut t = step * 2.0;
        let (next, cand) = loop {
            let mut next = &probe - &grad * t;
            project_columns(&mut next, cap)?;
            let diff = &next - &probe;
            let cand = eval(&next);
            let model = at_probe.value + grad.dot(&diff) + diff.norm_squared() / (2.0 * t);
            if cand.value <= model + 1e-15 * at_probe.value.abs() || t < 1e-300 {
                step = t;
                break (next, cand);
            }
            t *= 0.5;
        };
        if cand.value > cur.value {
            // restart from the last iterate without momentum
            momentum = 1.0;
            w_prev = w.clone();
            continue;
        }
        let change = cur.value - cand.value;
        let mapping = (&next - &probe).norm_squared() / step;
        let level = 1e-11 * cur.value.abs().max(f64::MIN_POSITIVE);
        converged = (change <= level && mapping <= level) || (&next - &w).norm() == 0.0;
        w_prev = std::mem::replace(&mut w, next);
        cur = cand;
        momentum = next_momentum;
    }
    let delta = residuals(&x, &w);
    let tau: Vec<f64> = (0..n)
        .map(|i| {
            let di = delta.column(i);
            (di.transpose() * &cur.y * di)[(0, 0)].max(0.0)
        })
        .collect();
    let objective = tau.iter().zip(c).map(|(t, ci)| t * ci).sum();
    Ok(SaddleSolution {
        y: cur.y,
        w,
        tau,
        objective,
        iterations,
        converged,
    })
}

/// Fallback spread: `sqrt(lambda_max)` of the covariance of the `m` points
/// nearest the coordinate median.
pub(crate) fn fallback_sigma(points: &[Vec<f64>], alpha: f64) -> f64 {
    let d = points[0].len();
    let median = coordinate_median_of(points, d);
    let m = neighborhood_size(alpha, points.len());
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        dist_sq(&points[a], &median)
            .total_cmp(&dist_sq(&points[b], &median))
            .then(a.cmp(&b))
    });
    let chosen = &order[..m];
    let mean = mean_rows(chosen.iter().map(|&i| points[i].as_slice()), d);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for &i in chosen {
        let v = DVector::from_iterator(d, points[i].iter().zip(&mean).map(|(a, b)| a - b));
        cov += &v * v.transpose();
    }
    cov /= m as f64;
    SymmetricEigen::new(cov).eigenvalues.max().max(0.0).sqrt()
}

/// Filtering estimate of the trusted mean.
///
/// `sigma` bounds the square root of the top eigenvalue of the honest sample
/// covariance; `None` uses [`fallback_sigma`]. The random-column branch draws
/// from `rng`.
pub fn filter_mean(
    batch: &UplinkBatch,
    alpha: f64,
    sigma: Option<f64>,
    budget: &FilterBudget,
    rng: &mut dyn RngCore,
) -> Result<Estimate> {
    if !(0.0..0.25).contains(&alpha) {
        return Err(Error::invalid(
            "alpha",
            "filter rule needs 0 <= alpha < 0.25",
        ));
    }
    budget.validate()?;
    let points = batch.messages();
    let d = check_batch(points)?;
    let sigma = match sigma {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(_) => return Err(Error::invalid("sigma", "must be finite and > 0")),
        None => fallback_sigma(points, alpha),
    };
    let mut active: Vec<usize> = (0..points.len()).collect();
    let mut weights = vec![1.0; points.len()];
    let mut removed = Vec::new();
    let mut inexact = false;
    let mut rounds = 0;
    let solution = loop {
        if rounds == budget.max_rounds {
            let sub: Vec<Vec<f64>> = active.iter().map(|&i| points[i].clone()).collect();
            let c: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
            let sol = saddle_solve(
                &sub,
                &c,
                filter_cap(alpha, active.len()),
                budget.solver_iters,
            )?;
            return Err(Error::FilterBudget {
                rounds,
                score: sol.objective,
                threshold: 4.0 * active.len() as f64 * sigma * sigma,
                active: active.len(),
            });
        }
        rounds += 1;
        let n = active.len();
        let sub: Vec<Vec<f64>> = active.iter().map(|&i| points[i].clone()).collect();
        let c: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
        let sol = saddle_solve(&sub, &c, filter_cap(alpha, n), budget.solver_iters)?;
        inexact |= !sol.converged;
        if sol.objective <= 4.0 * n as f64 * sigma * sigma {
            break (sub, sol);
        }
        let tau_max = sol.tau.iter().copied().fold(0.0, f64::max);
        let mut keep = Vec::with_capacity(n);
        for (k, &i) in active.iter().enumerate() {
            weights[i] *= 1.0 - sol.tau[k] / tau_max;
            if weights[i] < 0.5 {
                removed.push(i);
            } else {
                keep.push(i);
            }
        }
        active = keep;
    };
    let (sub, sol) = solution;
    let value = reconstruct(&sub, &sol.w, rng)?;
    removed.sort_unstable();
    Ok(Estimate {
        value: value.unwrap_or_else(|| mean_rows(sub.iter().map(Vec::as_slice), d)),
        diagnostics: Diagnostics {
            filter_iters: rounds,
            removed,
            inexact,
            ..Diagnostics::default()
        },
    })
}

/// Splits `W` at singular value 0.9 and forms `Z = X (W - W1)(I - W1)^-1`.
/// Returns `None` when `Z` has rank at most one (the column-mean branch) and
/// a random column of `Z` otherwise.
fn reconstruct(
    points: &[Vec<f64>],
    w: &DMatrix<f64>,
    rng: &mut dyn RngCore,
) -> Result<Option<Vec<f64>>> {
    let n = points.len();
    let d = points[0].len();
    let svd = w.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Singular("reconstruction SVD")),
    };
    let kept = svd.singular_values.map(|s| if s > 0.9 { 0.0 } else { s });
    let w1 = &u * DMatrix::from_diagonal(&kept) * &vt;
    let a = DMatrix::<f64>::identity(n, n) - &w1;
    let sv = a.clone().singular_values();
    let cond = sv.max() / sv.min().max(f64::MIN_POSITIVE);
    let rhs = (w - &w1).transpose();
    // W0 = (W - W1) A^-1, i.e. A' W0' = (W - W1)'
    let w0t = if cond <= 1e12 {
        a.transpose()
            .lu()
            .solve(&rhs)
            .ok_or(Error::Singular("I - W1"))?
    } else {
        let at = a.transpose();
        let normal = a.clone() * &at + DMatrix::<f64>::identity(n, n) * 1e-10;
        normal
            .cholesky()
            .ok_or(Error::Singular("I - W1 (ridge)"))?
            .solve(&(a * rhs))
    };
    let x = DMatrix::from_fn(d, n, |r, col| points[col][r]);
    let z = x * w0t.transpose();
    let zs = z.clone().singular_values();
    let mut s: Vec<f64> = zs.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let s1 = s.first().copied().unwrap_or(0.0);
    let s2 = s.get(1).copied().unwrap_or(0.0);
    if s1 == 0.0 || s2 / s1 < 1e-8 {
        return Ok(None);
    }
    let col = rng.gen_range(0..n);
    Ok(Some(z.column(col).iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_examples() {
        assert_eq!(
            capped_simplex_project(&[0.2, 0.3, 0.5], 0.6).unwrap(),
            vec![0.2, 0.3, 0.5]
        );
        let p = capped_simplex_project(&[2.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        let third = 1.0 / 3.0;
        let q = capped_simplex_project(&[third; 3], 1.0).unwrap();
        for v in q {
            assert_abs_diff_eq!(v, third, epsilon = 1e-15);
        }
        assert!(capped_simplex_project(&[0.5, 0.5], 0.4).is_err());
    }

    #[test]
    fn cap_reading() {
        assert_abs_diff_eq!(filter_cap(0.0, 10) * 10.0, 1.0, epsilon = 1e-15);
        for a in [0.01, 0.1, 0.2, 0.24] {
            assert!(filter_cap(a, 7) * 7.0 > 1.0);
        }
    }

    #[test]
    fn identical_rows_give_zero_objective() {
        let pts = vec![vec![1.0, -2.0]; 6];
        let sol = saddle_solve(&pts, &[1.0; 6], 0.5, 100).unwrap();
        assert!(sol.objective <= 1e-24);
        assert!(sol.tau.iter().all(|t| *t <= 1e-24));
    }

    #[test]
    fn two_points_reconstruct_themselves() {
        let pts = vec![vec![0.0], vec![1.0]];
        let sol = saddle_solve(&pts, &[1.0, 1.0], 1.0, 2000).unwrap();
        assert!(sol.objective < 1e-6, "objective {}", sol.objective);
    }

    #[test]
    fn identical_points_filter_to_the_point() {
        let v = vec![0.3, -1.2, 4.0];
        let batch = UplinkBatch::honest(&vec![v.clone(); 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = filter_mean(&batch, 0.1, Some(1.0), &FilterBudget::default(), &mut rng).unwrap();
        for (a, b) in est.value.iter().zip(&v) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(est.diagnostics.filter_iters, 1);
    }

    #[test]
    fn fallback_sigma_matches_cluster_spread() {
        let pts = vec![
            vec![-1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 0.0],
            vec![50.0, 50.0],
        ];
        // nearest three are on the x axis with variance 2/3
        assert_abs_diff_eq!(
            fallback_sigma(&pts, 0.25),
            (2.0f64 / 3.0).sqrt(),
            epsilon = 1e-12
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn projection_is_feasible_and_idempotent(
            v in prop::collection::vec(-3.0f64..3.0, 1..12),
            slack in 0.0f64..2.0,
        ) {
            let n = v.len();
            let cap = (1.0 + slack) / n as f64;
            let p = capped_simplex_project(&v, cap).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0 && *x <= cap));
            let again = capped_simplex_project(&p, cap).unwrap();
            prop_assert!(dist_sq(&p, &again).sqrt() <= 1e-12);
            // optimality: no feasible vertex-pair exchange decreases the distance
            let dist_p = dist_sq(&v, &p);
            let probe = capped_simplex_project(&v.iter().map(|x| x + 0.37).collect::<Vec<_>>(), cap).unwrap();
            prop_assert!(dist_sq(&p, &probe).sqrt() <= 1e-9, "shift invariance");
            prop_assert!(dist_p <= dist_sq(&v, &vec![1.0 / n as f64; n]) + 1e-12);
        }

        #[test]
        fn objective_is_translation_invariant(seed in any::<u64>(), shift in -20.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..6).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|x| x + shift).collect()).collect();
            let a = saddle_solve(&pts, &[1.0; 6], 0.3, 20_000).unwrap();
            let b = saddle_solve(&moved, &[1.0; 6], 0.3, 20_000).unwrap();
            prop_assert!((a.objective - b.objective).abs() <= 1e-6 * (1.0 + a.objective));
        }
    }
}
