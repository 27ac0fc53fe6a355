//! Named problem instances with their default attack plans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackPlan, Strategy};
use crate::error::{Error, Result};
use crate::problem::{AllocationProblem, ConstraintFunction, FeasibleSet, UtilityFunction};

pub const FIXTURE_NAMES: [&str; 3] = ["demand_response", "data_network", "unit_test_small"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureName {
    /// 20 households, two appliances each, a shared capacity cap and a
    /// quadratic load-shape budget.
    DemandResponse,
    /// 10 flows sharing one link, logarithmic rate utilities.
    DataNetwork,
    /// Five scalar agents with targets `0..=4`; agent 4 is compromised.
    UnitTestSmall,
}

impl FixtureName {
    pub fn as_str(self) -> &'static str {
        match self {
            FixtureName::DemandResponse => "demand_response",
            FixtureName::DataNetwork => "data_network",
            FixtureName::UnitTestSmall => "unit_test_small",
        }
    }
}

impl std::str::FromStr for FixtureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "demand_response" => Ok(FixtureName::DemandResponse),
            "data_network" => Ok(FixtureName::DataNetwork),
            "unit_test_small" => Ok(FixtureName::UnitTestSmall),
            other => Err(Error::Unknown {
                kind: "fixture",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: FixtureName,
    pub problem: AllocationProblem,
    pub plan: AttackPlan,
}

/// Builds a fixture by name. Randomized fixtures draw everything from `seed`.
///
/// ```
/// use resilient_pdra::experiment::build_fixture;
///
/// let f = build_fixture("unit_test_small", 0).unwrap();
/// assert_eq!(f.problem.agents(), 5);
/// assert_eq!(f.plan.compromised(), &[4]);
/// assert!(build_fixture("nope", 0).is_err());
/// ```
pub fn build_fixture(name: &str, seed: u64) -> Result<Fixture> {
    match name.parse::<FixtureName>()? {
        FixtureName::DemandResponse => demand_response(seed),
        FixtureName::DataNetwork => data_network(seed),
        FixtureName::UnitTestSmall => unit_test_small(),
    }
}

pub const DEMAND_AGENTS: usize = 20;
pub const DEMAND_UPSILON: f64 = 0.05;
pub const DEMAND_CURVATURE: f64 = 0.1;
pub const DEMAND_CAPACITY: f64 = 2.0;

pub fn demand_response(seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = DEMAND_AGENTS;
    let mut utilities = Vec::with_capacity(n);
    let mut sets = Vec::with_capacity(n);
    for _ in 0..n {
        let b = rng.gen_range(0.5..=1.0);
        let target = vec![rng.gen_range(0.5..=2.0), rng.gen_range(0.5..=2.0)];
        utilities.push(UtilityFunction::quadratic(b, target, 0.0)?);
        sets.push(FeasibleSet::boxed(vec![0.0, 0.0], vec![2.0, 2.0])?);
    }
    let radius = sets[0].diameter();
    // the gradient bound covers the ball of radius 2R around the center
    let constraints = vec![
        ConstraintFunction::linear(vec![1.0, 1.0], DEMAND_CAPACITY)?,
        ConstraintFunction::quadratic(
            DEMAND_CURVATURE,
            vec![0.0, 0.0],
            1.6,
            DEMAND_CURVATURE * 2.0 * radius,
        )?,
    ];
    let problem = AllocationProblem::new(utilities, constraints, sets, DEMAND_UPSILON, None)?;
    let plan = AttackPlan::sampled(n, 0.2, 4, Strategy::LargeRandom { magnitude: 1e3 }, seed)?;
    Ok(Fixture {
        name: FixtureName::DemandResponse,
        problem,
        plan,
    })
}

pub const NETWORK_AGENTS: usize = 10;
pub const NETWORK_UPSILON: f64 = 0.01;
pub const NETWORK_SHIFT: f64 = 0.1;

pub fn data_network(seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = NETWORK_AGENTS;
    let utilities = (0..n)
        .map(|_| UtilityFunction::log_barrier(rng.gen_range(1.0..=2.0), NETWORK_SHIFT))
        .collect::<Result<Vec<_>>>()?;
    let sets = (0..n)
        .map(|_| FeasibleSet::boxed(vec![0.0], vec![3.0]))
        .collect::<Result<Vec<_>>>()?;
    let constraints = vec![ConstraintFunction::linear(vec![1.0], 1.0)?];
    let problem = AllocationProblem::new(utilities, constraints, sets, NETWORK_UPSILON, None)?;
    let plan = AttackPlan::sampled(n, 0.2, 2, Strategy::SignFlip { scale: 1.0 }, seed)?;
    Ok(Fixture {
        name: FixtureName::DataNetwork,
        problem,
        plan,
    })
}

pub fn unit_test_small() -> Result<Fixture> {
    let n = 5;
    let utilities = (0..n)
        .map(|i| UtilityFunction::quadratic(0.5, vec![i as f64], 0.0))
        .collect::<Result<Vec<_>>>()?;
    let sets = (0..n)
        .map(|_| FeasibleSet::boxed(vec![-5.0], vec![5.0]))
        .collect::<Result<Vec<_>>>()?;
    let constraints = vec![ConstraintFunction::linear(vec![1.0], 1.2)?];
    let problem = AllocationProblem::new(utilities, constraints, sets, 0.1, None)?;
    let plan = AttackPlan::new(
        n,
        0.2,
        vec![4],
        Strategy::CoordinatedShift {
            target: vec![100.0],
        },
        0,
    )?;
    Ok(Fixture {
        name: FixtureName::UnitTestSmall,
        problem,
        plan,
    })
}
