//! Robust estimates of the trusted mean from a contaminated batch of messages.
//!
//! Estimators only ever see [`UplinkBatch::messages`]; the withheld truth is
//! reserved for scoring.

mod filter;

pub use filter::{
    capped_simplex_project, filter_cap, filter_mean, saddle_solve, FilterBudget, SaddleSolution,
};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attack::UplinkBatch;
use crate::error::{check_dim, Error, Result};
use crate::vecops::{all_finite, dist_sq, mean_rows};

/// Which estimator the coordinator applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationRule {
    NaiveMean,
    MedianNeighborhood {
        alpha: f64,
    },
    Filter {
        alpha: f64,
        /// Spread bound; `None` selects the fallback estimate.
        #[serde(default)]
        sigma: Option<f64>,
        #[serde(default)]
        budget: FilterBudget,
    },
}

impl AggregationRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            AggregationRule::NaiveMean => Ok(()),
            AggregationRule::MedianNeighborhood { alpha } => {
                if !(*alpha > 0.0 && *alpha < 0.5) {
                    return Err(Error::invalid(
                        "rule.alpha",
                        "median rule needs 0 < alpha < 0.5",
                    ));
                }
                Ok(())
            }
            AggregationRule::Filter {
                alpha,
                sigma,
                budget,
            } => {
                if !(*alpha >= 0.0 && *alpha < 0.25) {
                    return Err(Error::invalid(
                        "rule.alpha",
                        "filter rule needs 0 <= alpha < 0.25, the regime of its error guarantee",
                    ));
                }
                if let Some(s) = sigma {
                    if !(*s > 0.0 && s.is_finite()) {
                        return Err(Error::invalid("rule.sigma", "must be finite and > 0"));
                    }
                }
                budget.validate()
            }
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            AggregationRule::NaiveMean => None,
            AggregationRule::MedianNeighborhood { alpha }
            | AggregationRule::Filter { alpha, .. } => Some(*alpha),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationRule::NaiveMean => "naive_mean",
            AggregationRule::MedianNeighborhood { .. } => "median_neighborhood",
            AggregationRule::Filter { .. } => "filter",
        }
    }

    /// Applies the rule to the received messages. `rng` is used only by the filter.
    pub fn estimate(&self, batch: &UplinkBatch, rng: &mut dyn RngCore) -> Result<Estimate> {
        match self {
            AggregationRule::NaiveMean => naive_mean(batch),
            AggregationRule::MedianNeighborhood { alpha } => {
                median_neighborhood_mean(batch, *alpha)
            }
            AggregationRule::Filter {
                alpha,
                sigma,
                budget,
            } => filter_mean(batch, *alpha, *sigma, budget, rng),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Median rule: realized neighborhood radius per coordinate.
    pub radii: Vec<f64>,
    /// Median rule: selected message indices per coordinate, ascending.
    pub selected: Vec<Vec<usize>>,
    /// Filter rule: outer reweighting rounds performed.
    pub filter_iters: usize,
    /// Filter rule: indices dropped from the active set.
    pub removed: Vec<usize>,
    /// Filter rule: some saddle solve stopped on its budget.
    pub inexact: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub value: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl Estimate {
    fn plain(value: Vec<f64>) -> Self {
        Estimate {
            value,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn radius_max(&self) -> f64 {
        self.diagnostics.radii.iter().copied().fold(0.0, f64::max)
    }
}

pub(crate) fn check_batch(messages: &[Vec<f64>]) -> Result<usize> {
    let first = messages
        .first()
        .ok_or_else(|| Error::invalid("batch", "at least one message is required"))?;
    let d = first.len();
    for m in messages {
        check_dim("message", d, m.len())?;
        if !all_finite(m) {
            return Err(Error::invalid("batch", "messages must be finite"));
        }
    }
    Ok(d)
}

pub fn naive_mean(batch: &UplinkBatch) -> Result<Estimate> {
    let d = check_batch(batch.messages())?;
    Ok(Estimate::plain(mean_rows(
        batch.messages().iter().map(Vec::as_slice),
        d,
    )))
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn coordinate_median_of(messages: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut column = Vec::with_capacity(messages.len());
    (0..d)
        .map(|j| {
            column.clear();
            column.extend(messages.iter().map(|m| m[j]));
            column.sort_by(f64::total_cmp);
            median_of_sorted(&column)
        })
        .collect()
}

/// Per-coordinate median; even counts average the two middle values.
pub fn coordinate_median(batch: &UplinkBatch) -> Result<Vec<f64>> {
    let d = check_batch(batch.messages())?;
    Ok(coordinate_median_of(batch.messages(), d))
}

/// Neighborhood size `round((1 - alpha) N)`, clamped to `[1, N]`.
pub fn neighborhood_size(alpha: f64, n: usize) -> usize {
    (((1.0 - alpha) * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Per coordinate, the mean of the `round((1 - alpha) N)` messages closest to
/// the coordinate median (ties keep the lower index).
pub fn median_neighborhood_mean(batch: &UplinkBatch, alpha: f64) -> Result<Estimate> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::invalid("alpha", "median rule needs 0 < alpha < 0.5"));
    }
    let messages = batch.messages();
    let d = check_batch(messages)?;
    let n = messages.len();
    let m = neighborhood_size(alpha, n);
    let median = coordinate_median_of(messages, d);
    let mut value = Vec::with_capacity(d);
    let mut radii = Vec::with_capacity(d);
    let mut selected = Vec::with_capacity(d);
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..d {
        let dev = |i: usize| (messages[i][j] - median[j]).abs();
        order.sort_by(|&a, &b| dev(a).total_cmp(&dev(b)).then(a.cmp(&b)));
        let mut chosen = order[..m].to_vec();
        chosen.sort_unstable();
        value.push(chosen.iter().map(|&i| messages[i][j]).sum::<f64>() / m as f64);
        radii.push(chosen.iter().map(|&i| dev(i)).fold(0.0, f64::max));
        selected.push(chosen);
    }
    Ok(Estimate {
        value,
        diagnostics: Diagnostics {
            radii,
            selected,
            ..Diagnostics::default()
        },
    })
}

/// `alpha / (1 - alpha) * (2 + sqrt((1 - alpha)^2 / (1 - 2 alpha))) * r * sqrt(d)`.
pub fn prop1_error_bound(alpha: f64, spread: f64, dim: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::invalid("alpha", "bound requires 0 < alpha < 0.5"));
    }
    if !(spread >= 0.0) {
        return Err(Error::invalid("r", "spread must be >= 0"));
    }
    let a = alpha;
    let factor = a / (1.0 - a) * (2.0 + ((1.0 - a).powi(2) / (1.0 - 2.0 * a)).sqrt());
    Ok(factor * spread * (dim as f64).sqrt())
}

/// Largest sup-norm deviation of the listed points from their mean.
pub fn honest_spread(points: &[Vec<f64>], members: &[usize]) -> f64 {
    let d = points.first().map_or(0, Vec::len);
    let mean = mean_rows(members.iter().map(|&i| points[i].as_slice()), d);
    members
        .iter()
        .map(|&i| crate::vecops::sup_norm(&crate::vecops::sub(&points[i], &mean)))
        .fold(0.0, f64::max)
}

/// Mean of the tightest subset of size `ceil((1 - alpha) N)`, by maximal
/// pairwise distance. Ties go to the smaller total pairwise spread, then to
/// the first subset in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleMean {
    pub value: Vec<f64>,
    pub subset: Vec<usize>,
    pub diameter: f64,
}

pub const BRUTEFORCE_MAX_N: usize = 20;

pub fn bruteforce_trusted_mean(batch: &UplinkBatch, alpha: f64) -> Result<OracleMean> {
    let messages = batch.messages();
    let d = check_batch(messages)?;
    let n = messages.len();
    if n > BRUTEFORCE_MAX_N {
        return Err(Error::invalid(
            "batch",
            format!("exhaustive oracle is limited to N <= {BRUTEFORCE_MAX_N}"),
        ));
    }
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::invalid("alpha", "must lie in [0, 0.5)"));
    }
    let k = (((1.0 - alpha) * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut pair = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let v = dist_sq(&messages[a], &messages[b]);
            pair[a * n + b] = v;
            pair[b * n + a] = v;
        }
    }
    let spread = |subset: &[usize]| -> f64 {
        let mut total = 0.0;
        for (x, &a) in subset.iter().enumerate() {
            for &b in &subset[x + 1..] {
                total += pair[a * n + b];
            }
        }
        total
    };
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let mut diam: f64 = 0.0;
        let bound = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        'outer: for (x, &a) in subset.iter().enumerate() {
            for &b in &subset[x + 1..] {
                diam = diam.max(pair[a * n + b]);
                if diam > bound {
                    break 'outer;
                }
            }
        }
        if diam < bound {
            best = Some((diam, spread(&subset), subset.clone()));
        } else if diam == bound {
            let total = spread(&subset);
            if best.as_ref().is_some_and(|b| total < b.1) {
                best = Some((diam, total, subset.clone()));
            }
        }
        // next k-combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                let (diam, _, subset) = best.expect("at least one subset");
                let value = mean_rows(subset.iter().map(|&i| messages[i].as_slice()), d);
                return Ok(OracleMean {
                    value,
                    subset,
                    diameter: diam.sqrt(),
                });
            }
            i -= 1;
            if subset[i] < n - k + i {
                subset[i] += 1;
                for j in i + 1..k {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn batch(values: &[f64]) -> UplinkBatch {
        UplinkBatch::honest(&values.iter().map(|v| vec![*v]).collect::<Vec<_>>())
    }

    #[test]
    fn naive_examples() {
        assert_abs_diff_eq!(
            naive_mean(&batch(&[0.0, 1.0, 2.0, 3.0, 100.0]))
                .unwrap()
                .value[0],
            21.2,
            epsilon = 1e-12
        );
        assert_eq!(naive_mean(&batch(&[4.0; 3])).unwrap().value, vec![4.0]);
    }

    #[test]
    fn median_examples() {
        assert_eq!(
            coordinate_median(&batch(&[0.0, 1.0, 2.0, 3.0, 100.0])).unwrap(),
            vec![2.0]
        );
        assert_eq!(
            coordinate_median(&batch(&[0.0, 1.0, 2.0, 3.0])).unwrap(),
            vec![1.5]
        );
        assert_eq!(coordinate_median(&batch(&[7.0; 4])).unwrap(), vec![7.0]);
    }

    #[test]
    fn neighborhood_recovers_trusted_mean() {
        let est = median_neighborhood_mean(&batch(&[0.0, 1.0, 2.0, 3.0, 100.0]), 0.2).unwrap();
        assert_abs_diff_eq!(est.value[0], 1.5, epsilon = 1e-15);
        assert_eq!(est.diagnostics.selected[0], vec![0, 1, 2, 3]);
        assert_eq!(est.radius_max(), 2.0);
        let oracle = bruteforce_trusted_mean(&batch(&[0.0, 1.0, 2.0, 3.0, 100.0]), 0.2).unwrap();
        assert_eq!(oracle.subset, vec![0, 1, 2, 3]);
        assert_abs_diff_eq!(oracle.value[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn full_neighborhood_is_plain_mean() {
        // round(0.95 * 4) = 4
        let b = batch(&[0.0, 1.0, 5.0, 6.0]);
        let est = median_neighborhood_mean(&b, 0.05).unwrap();
        assert_abs_diff_eq!(est.value[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn ties_keep_lower_index() {
        // median 1, both 0 and 2 are at distance 1; m = round(0.6 * 3) = 2
        let est = median_neighborhood_mean(&batch(&[2.0, 1.0, 0.0]), 0.4).unwrap();
        assert_eq!(est.diagnostics.selected[0], vec![0, 1]);
    }

    #[test]
    fn prop1_examples() {
        assert_abs_diff_eq!(
            prop1_error_bound(0.2, 1.0, 1).unwrap(),
            0.25 * (2.0 + (0.64f64 / 0.6).sqrt()),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            prop1_error_bound(0.2, 1.0, 1).unwrap(),
            0.75820,
            epsilon = 1e-5
        );
        assert_eq!(prop1_error_bound(0.3, 0.0, 4).unwrap(), 0.0);
        assert!(prop1_error_bound(0.5, 1.0, 1).is_err());
        let grid: Vec<f64> = (1..500)
            .map(|k| prop1_error_bound(k as f64 / 1000.0, 1.0, 1).unwrap())
            .collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn oracle_refuses_large_batches() {
        assert!(bruteforce_trusted_mean(&batch(&[0.0; 21]), 0.1).is_err());
    }

    #[test]
    fn rule_validation() {
        assert!(AggregationRule::MedianNeighborhood { alpha: 0.0 }
            .validate()
            .is_err());
        assert!(AggregationRule::Filter {
            alpha: 0.3,
            sigma: None,
            budget: FilterBudget::default()
        }
        .validate()
        .is_err());
        assert!(AggregationRule::Filter {
            alpha: 0.0,
            sigma: Some(1.0),
            budget: FilterBudget::default()
        }
        .validate()
        .is_ok());
    }

    fn points(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn estimators_are_permutation_invariant(seed in any::<u64>(), rot in 1usize..9) {
            let p = points(seed, 9, 3);
            let mut q = p.clone();
            q.rotate_left(rot);
            let (a, b) = (UplinkBatch::honest(&p), UplinkBatch::honest(&q));
            let close = |x: &[f64], y: &[f64]| dist_sq(x, y).sqrt() <= 1e-12;
            prop_assert!(close(&naive_mean(&a).unwrap().value, &naive_mean(&b).unwrap().value));
            prop_assert_eq!(coordinate_median(&a).unwrap(), coordinate_median(&b).unwrap());
            // distinct continuous values make the neighborhoods tie-free
            prop_assert!(close(&median_neighborhood_mean(&a, 0.3).unwrap().value,
                               &median_neighborhood_mean(&b, 0.3).unwrap().value));
            prop_assert!(close(&bruteforce_trusted_mean(&a, 0.3).unwrap().value,
                               &bruteforce_trusted_mean(&b, 0.3).unwrap().value));
        }

        #[test]
        fn estimators_are_translation_equivariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let p = points(seed, 7, 2);
            let q: Vec<Vec<f64>> = p.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
            let (a, b) = (UplinkBatch::honest(&p), UplinkBatch::honest(&q));
            let shifted = |x: Vec<f64>| x.into_iter().map(|v| v + shift).collect::<Vec<_>>();
            let close = |x: &[f64], y: &[f64]| dist_sq(x, y).sqrt() <= 1e-9;
            prop_assert!(close(&shifted(naive_mean(&a).unwrap().value), &naive_mean(&b).unwrap().value));
            prop_assert!(close(&shifted(coordinate_median(&a).unwrap()), &coordinate_median(&b).unwrap()));
            prop_assert!(close(&shifted(median_neighborhood_mean(&a, 0.2).unwrap().value),
                               &median_neighborhood_mean(&b, 0.2).unwrap().value));
        }

        #[test]
        fn neighborhood_matches_oracle_with_one_far_outlier(seed in any::<u64>(), n in 5usize..=10) {
            // m = round(0.9 n) = n - 1 = ceil(0.9 n) for these n
            let mut p = points(seed, n, 1);
            let bad = (seed as usize) % n;
            p[bad] = vec![1e4];
            let b = UplinkBatch::honest(&p);
            let alpha = 1.0 / n as f64;
            let est = median_neighborhood_mean(&b, alpha).unwrap();
            let oracle = bruteforce_trusted_mean(&b, alpha).unwrap();
            prop_assert_eq!(&est.diagnostics.selected[0], &oracle.subset);
            prop_assert!((est.value[0] - oracle.value[0]).abs() <= 1e-12);
        }
    }
}
