//! Simulated uplink channels. Compromised channels replace the agent's message
//! with an adversarial payload; honest channels pass it through untouched.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::vecops::{dist, mean_rows};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// Uniform payload in `[-M, M]^d`, fresh every iteration.
    LargeRandom { magnitude: f64 },
    /// Sends `-scale * theta_j`.
    SignFlip { scale: f64 },
    /// Every compromised channel sends the same vector.
    CoordinatedShift { target: Vec<f64> },
    /// Replays the agent's own parameter from `delay` iterations ago.
    StaleReplay { delay: usize },
}

impl Strategy {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Strategy::LargeRandom { magnitude } => magnitude.is_finite() && *magnitude >= 0.0,
            Strategy::SignFlip { scale } => scale.is_finite(),
            Strategy::CoordinatedShift { target } => target.iter().all(|x| x.is_finite()),
            Strategy::StaleReplay { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "attack.strategy",
                "parameters must be finite (magnitude >= 0)",
            ))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::LargeRandom { .. } => "large_random",
            Strategy::SignFlip { .. } => "sign_flip",
            Strategy::CoordinatedShift { .. } => "coordinated_shift",
            Strategy::StaleReplay { .. } => "stale_replay",
        }
    }
}

/// Which channels are compromised and what they send. Membership is fixed for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackPlan {
    agents: usize,
    alpha: f64,
    compromised: Vec<usize>,
    strategy: Strategy,
    seed: u64,
}

impl AttackPlan {
    /// Explicit membership. Rejected when more than `alpha * N` channels are listed.
    pub fn new(
        agents: usize,
        alpha: f64,
        compromised: Vec<usize>,
        strategy: Strategy,
        seed: u64,
    ) -> Result<Self> {
        crate::problem::check_alpha(alpha)?;
        strategy.validate()?;
        let mut members = compromised;
        members.sort_unstable();
        let before = members.len();
        members.dedup();
        if members.len() != before {
            return Err(Error::invalid(
                "attack.compromised",
                "indices must be distinct",
            ));
        }
        if let Some(&bad) = members.iter().find(|&&i| i >= agents) {
            return Err(Error::invalid(
                "attack.compromised",
                format!("index {bad} out of range for N = {agents}"),
            ));
        }
        if members.len() as f64 > alpha * agents as f64 + 1e-9 {
            return Err(Error::invalid(
                "attack.compromised",
                format!(
                    "{} compromised channels exceed alpha * N = {}",
                    members.len(),
                    alpha * agents as f64
                ),
            ));
        }
        Ok(AttackPlan {
            agents,
            alpha,
            compromised: members,
            strategy,
            seed,
        })
    }

    /// `count` channels drawn without replacement using `seed`.
    pub fn sampled(
        agents: usize,
        alpha: f64,
        count: usize,
        strategy: Strategy,
        seed: u64,
    ) -> Result<Self> {
        if count > agents {
            return Err(Error::invalid("attack.count", "cannot exceed N"));
        }
        let mut idx: Vec<usize> = (0..agents).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(count);
        Self::new(agents, alpha, idx, strategy, seed)
    }

    /// No compromised channels.
    pub fn none(agents: usize) -> Self {
        AttackPlan {
            agents,
            alpha: 0.0,
            compromised: Vec::new(),
            strategy: Strategy::SignFlip { scale: 1.0 },
            seed: 0,
        }
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn compromised(&self) -> &[usize] {
        &self.compromised
    }

    pub fn honest(&self) -> Vec<usize> {
        (0..self.agents)
            .filter(|i| !self.is_compromised(*i))
            .collect()
    }

    pub fn is_compromised(&self, i: usize) -> bool {
        self.compromised.binary_search(&i).is_ok()
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Past agent parameters kept for replay attacks.
#[derive(Clone, Debug, Default)]
pub struct AttackHistory {
    initial: Option<Vec<Vec<f64>>>,
    recent: VecDeque<Vec<Vec<f64>>>,
    capacity: usize,
    iteration: usize,
}

impl AttackHistory {
    /// History able to serve replays up to `max_delay` iterations back.
    pub fn new(max_delay: usize) -> Self {
        AttackHistory {
            initial: None,
            recent: VecDeque::with_capacity(max_delay + 1),
            capacity: max_delay + 1,
            iteration: 0,
        }
    }

    pub fn for_plan(plan: &AttackPlan) -> Self {
        match plan.strategy {
            Strategy::StaleReplay { delay } => Self::new(delay),
            _ => Self::new(0),
        }
    }

    /// Records the parameters of the current iteration; the first call is iteration 0.
    pub fn record(&mut self, theta: &[Vec<f64>]) {
        if self.initial.is_none() {
            self.initial = Some(theta.to_vec());
        } else {
            self.iteration += 1;
        }
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(theta.to_vec());
    }

    /// Iteration of the latest recorded snapshot.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Snapshot from `delay` iterations ago, or the initial one when that predates the run.
    fn lookback(&self, delay: usize) -> Option<&Vec<Vec<f64>>> {
        if delay > self.iteration {
            return self.initial.as_ref();
        }
        let back = self.recent.len().checked_sub(1 + delay)?;
        self.recent.get(back)
    }
}

/// Messages received by the coordinator, with the true parameters kept aside
/// for metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct UplinkBatch {
    messages: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
}

impl UplinkBatch {
    /// Batch with no attack: messages equal the parameters.
    pub fn honest(theta: &[Vec<f64>]) -> Self {
        UplinkBatch {
            messages: theta.to_vec(),
            truth: theta.to_vec(),
        }
    }

    pub fn from_parts(messages: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> Result<Self> {
        check_dim("batch truth", messages.len(), truth.len())?;
        Ok(UplinkBatch { messages, truth })
    }

    pub fn messages(&self) -> &[Vec<f64>] {
        &self.messages
    }

    /// Withheld honest parameters; for scoring only.
    pub fn truth(&self) -> &[Vec<f64>] {
        &self.truth
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.messages.first().map_or(0, Vec::len)
    }
}

/// Builds the received batch for the iteration recorded last in `history`.
pub fn apply_attack(
    theta: &[Vec<f64>],
    plan: &AttackPlan,
    history: &AttackHistory,
) -> Result<UplinkBatch> {
    check_dim("attack plan agents", plan.agents, theta.len())?;
    let d = theta.first().map_or(0, Vec::len);
    let mut messages = theta.to_vec();
    if plan.compromised.is_empty() {
        return Ok(UplinkBatch {
            messages,
            truth: theta.to_vec(),
        });
    }
    match &plan.strategy {
        Strategy::LargeRandom { magnitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(history.iteration() as u64);
            for &j in &plan.compromised {
                messages[j] = (0..d)
                    .map(|_| {
                        if *magnitude > 0.0 {
                            rng.gen_range(-magnitude..=*magnitude)
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        Strategy::SignFlip { scale } => {
            for &j in &plan.compromised {
                messages[j] = theta[j].iter().map(|x| -scale * x).collect();
            }
        }
        Strategy::CoordinatedShift { target } => {
            check_dim("coordinated shift target", d, target.len())?;
            for &j in &plan.compromised {
                messages[j] = target.clone();
            }
        }
        Strategy::StaleReplay { delay } => {
            let past = history.lookback(*delay);
            for &j in &plan.compromised {
                if let Some(snapshot) = past {
                    messages[j] = snapshot[j].clone();
                }
            }
        }
    }
    Ok(UplinkBatch {
        messages,
        truth: theta.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContaminationStats {
    pub compromised: usize,
    pub honest: usize,
    /// `||naive mean of messages - mean of honest parameters||`
    pub displacement: f64,
}

pub fn contamination_stats(batch: &UplinkBatch, plan: &AttackPlan) -> Result<ContaminationStats> {
    check_dim("batch size", plan.agents, batch.len())?;
    let d = batch.dim();
    let naive = mean_rows(batch.messages.iter().map(Vec::as_slice), d);
    let honest = plan.honest();
    let trusted = mean_rows(honest.iter().map(|&i| batch.truth[i].as_slice()), d);
    Ok(ContaminationStats {
        compromised: plan.compromised.len(),
        honest: honest.len(),
        displacement: dist(&naive, &trusted),
    })
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn line(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|v| vec![*v]).collect()
    }

    #[test]
    fn empty_plan_is_identity() {
        let theta = line(&[0.0, 1.0, 2.0]);
        let plan = AttackPlan::none(3);
        let batch = apply_attack(&theta, &plan, &AttackHistory::new(0)).unwrap();
        assert_eq!(batch.messages(), &theta[..]);
        assert_eq!(
            contamination_stats(&batch, &plan).unwrap().displacement,
            0.0
        );
    }

    #[test]
    fn sign_flip_negates_only_compromised() {
        let theta = vec![vec![1.0, -2.0], vec![3.0, 4.0], vec![0.5, 0.5]];
        let plan = AttackPlan::new(3, 0.34, vec![1], Strategy::SignFlip { scale: 1.0 }, 0).unwrap();
        let batch = apply_attack(&theta, &plan, &AttackHistory::new(0)).unwrap();
        assert_eq!(batch.messages()[1], vec![-3.0, -4.0]);
        assert_eq!(batch.messages()[0], theta[0]);
        assert_eq!(batch.messages()[2], theta[2]);
    }

    #[test]
    fn coordinated_shift_displacement() {
        let theta = line(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let plan = AttackPlan::new(
            5,
            0.2,
            vec![4],
            Strategy::CoordinatedShift {
                target: vec![100.0],
            },
            0,
        )
        .unwrap();
        let batch = apply_attack(&theta, &plan, &AttackHistory::new(0)).unwrap();
        let naive = mean_rows(batch.messages().iter().map(Vec::as_slice), 1)[0];
        let all = mean_rows(theta.iter().map(Vec::as_slice), 1)[0];
        assert_abs_diff_eq!(naive - all, (100.0 - 4.0) / 5.0, epsilon = 1e-12);
        let stats = contamination_stats(&batch, &plan).unwrap();
        assert_eq!((stats.compromised, stats.honest), (1, 4));
        assert_abs_diff_eq!(naive, 21.2, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.displacement, 19.7, epsilon = 1e-12);
    }

    #[test]
    fn fraction_cap_is_enforced() {
        let s = Strategy::SignFlip { scale: 1.0 };
        assert!(AttackPlan::new(10, 0.2, vec![0, 1, 2], s.clone(), 0).is_err());
        assert!(AttackPlan::new(10, 0.2, vec![0, 1], s.clone(), 0).is_ok());
        assert!(AttackPlan::new(10, 0.5, vec![], s.clone(), 0).is_err());
        assert!(AttackPlan::new(10, 0.2, vec![0, 0], s.clone(), 0).is_err());
        assert!(AttackPlan::new(
            10,
            0.2,
            vec![],
            Strategy::LargeRandom {
                magnitude: f64::NAN
            },
            0
        )
        .is_err());
    }

    #[test]
    fn stale_replay_uses_delayed_or_initial_snapshot() {
        let plan =
            AttackPlan::new(3, 0.34, vec![0], Strategy::StaleReplay { delay: 2 }, 0).unwrap();
        let mut history = AttackHistory::for_plan(&plan);
        let mut sent = Vec::new();
        for k in 0..5 {
            let theta = line(&[k as f64, 10.0 + k as f64, -1.0]);
            history.record(&theta);
            sent.push(apply_attack(&theta, &plan, &history).unwrap().messages()[0][0]);
        }
        assert_eq!(sent, vec![0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn large_random_is_seeded_and_bounded() {
        let theta = vec![vec![0.0; 3]; 4];
        let plan = AttackPlan::new(
            4,
            0.25,
            vec![2],
            Strategy::LargeRandom { magnitude: 5.0 },
            9,
        )
        .unwrap();
        let mut history = AttackHistory::new(0);
        history.record(&theta);
        let a = apply_attack(&theta, &plan, &history).unwrap();
        let b = apply_attack(&theta, &plan, &history).unwrap();
        assert_eq!(a, b);
        assert!(a.messages()[2].iter().all(|x| x.abs() <= 5.0));
        history.record(&theta);
        let c = apply_attack(&theta, &plan, &history).unwrap();
        assert_ne!(a.messages()[2], c.messages()[2]);
    }

    #[test]
    fn large_random_displacement_grows_linearly() {
        let theta = vec![vec![0.0; 2]; 10];
        let mean_disp = |m: f64| {
            (0..400u64)
                .map(|seed| {
                    let plan = AttackPlan::new(
                        10,
                        0.2,
                        vec![3, 7],
                        Strategy::LargeRandom { magnitude: m },
                        seed,
                    )
                    .unwrap();
                    let mut h = AttackHistory::new(0);
                    h.record(&theta);
                    let b = apply_attack(&theta, &plan, &h).unwrap();
                    contamination_stats(&b, &plan).unwrap().displacement
                })
                .sum::<f64>()
                / 400.0
        };
        let ratio = mean_disp(80.0) / mean_disp(10.0);
        // honest points sit at the origin, so the displacement is exactly proportional
        assert_abs_diff_eq!(ratio, 8.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn honest_channels_pass_through_bitwise(
            values in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 2), 6),
            which in 0usize..4,
            seed in any::<u64>(),
        ) {
            let strategies = [
                Strategy::LargeRandom { magnitude: 1e3 },
                Strategy::SignFlip { scale: 2.5 },
                Strategy::CoordinatedShift { target: vec![7.0, -7.0] },
                Strategy::StaleReplay { delay: 1 },
            ];
            let plan = AttackPlan::sampled(6, 0.34, 2, strategies[which].clone(), seed).unwrap();
            let mut h = AttackHistory::for_plan(&plan);
            h.record(&values);
            let batch = apply_attack(&values, &plan, &h).unwrap();
            for i in plan.honest() {
                prop_assert_eq!(batch.messages()[i].iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                                values[i].iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            }
            prop_assert_eq!(batch.truth(), &values[..]);
        }
    }
}
