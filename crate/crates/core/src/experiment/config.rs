//! Run configuration: TOML schema, defaults and eager validation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::fixtures::{build_fixture, FixtureName};
use crate::aggregate::{AggregationRule, FilterBudget};
use crate::attack::{AttackPlan, Strategy};
use crate::error::{Error, Result};
use crate::problem::{AllocationProblem, ProblemSpec};
use crate::resilient::{DualCapSetting, Scaling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    AttackedNaive,
    Resilient,
    SweepGamma,
    SweepAlpha,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::AttackedNaive => "attacked_naive",
            Mode::Resilient => "resilient",
            Mode::SweepGamma => "sweep_gamma",
            Mode::SweepAlpha => "sweep_alpha",
        }
    }

    pub fn is_sweep(self) -> bool {
        matches!(self, Mode::SweepGamma | Mode::SweepAlpha)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "attacked_naive" => Ok(Mode::AttackedNaive),
            "resilient" => Ok(Mode::Resilient),
            "sweep_gamma" => Ok(Mode::SweepGamma),
            "sweep_alpha" => Ok(Mode::SweepAlpha),
            other => Err(Error::Unknown {
                kind: "mode",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ProblemSource {
    Fixture(FixtureName),
    File(PathBuf),
    Inline(ProblemSpec),
}

impl ProblemSource {
    pub fn label(&self) -> String {
        match self {
            ProblemSource::Fixture(f) => f.as_str().to_string(),
            ProblemSource::File(p) => p.display().to_string(),
            ProblemSource::Inline(_) => "inline".to_string(),
        }
    }
}

/// Attack overrides; without them a fixture keeps its own plan and other
/// problems run unattacked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    pub alpha: f64,
    pub strategy: Strategy,
    /// Explicit compromised channels; sampled from the seed when absent.
    #[serde(default)]
    pub compromised: Option<Vec<usize>>,
    /// Number of sampled channels, `floor(alpha N)` when absent.
    #[serde(default)]
    pub count: Option<usize>,
}

/// Aggregation rule without its `alpha`, which follows the attack settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleSpec {
    NaiveMean,
    MedianNeighborhood,
    Filter {
        sigma: Option<f64>,
        budget: FilterBudget,
    },
}

impl RuleSpec {
    pub fn rule(&self, alpha: f64) -> AggregationRule {
        match self {
            RuleSpec::NaiveMean => AggregationRule::NaiveMean,
            RuleSpec::MedianNeighborhood => AggregationRule::MedianNeighborhood { alpha },
            RuleSpec::Filter { sigma, budget } => AggregationRule::Filter {
                alpha,
                sigma: *sigma,
                budget: *budget,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepSettings {
    /// `None` picks `v / L^2` for the baseline and `v / (4 L^2)` otherwise.
    pub gamma: Option<f64>,
    pub max_iters: usize,
    pub stop_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSettings {
    /// Absolute step sizes; `None` uses `(j / (points + 1)) v / (2 L^2)`, `j = 1..=points`.
    pub gammas: Option<Vec<f64>>,
    pub points: usize,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub problem: ProblemSource,
    pub attack: Option<AttackSettings>,
    pub rule: RuleSpec,
    pub step: StepSettings,
    pub scaling: Scaling,
    pub dual_cap: DualCapSetting,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub sweep: SweepSettings,
}

pub const DEFAULT_MAX_ITERS: usize = 6000;
pub const DEFAULT_SWEEP_POINTS: usize = 12;
pub const DEFAULT_SWEEP_ALPHAS: [f64; 3] = [0.1, 0.2, 0.3];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    mode: Option<Mode>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    problem: RawProblem,
    #[serde(default)]
    attack: Option<AttackSettings>,
    #[serde(default)]
    aggregation: Option<RawRule>,
    #[serde(default)]
    step: Option<RawStep>,
    #[serde(default)]
    dual: Option<RawDual>,
    #[serde(default)]
    sweep: Option<RawSweep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    fixture: Option<String>,
    file: Option<PathBuf>,
    spec: Option<ProblemSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    kind: String,
    alpha: Option<f64>,
    sigma: Option<f64>,
    budget: Option<FilterBudget>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    gamma: Option<f64>,
    max_iters: Option<usize>,
    stop_tol: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDual {
    clipping: Option<bool>,
    cap: Option<f64>,
    scaling: Option<Scaling>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    gammas: Option<Vec<f64>>,
    points: Option<usize>,
    alphas: Option<Vec<f64>>,
}

/// Reads and validates a config file. Relative problem paths resolve against
/// the config's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Parses and validates config text; `base` anchors relative paths.
///
/// ```
/// use resilient_pdra::experiment::{parse_config, Mode};
///
/// let cfg = parse_config("[problem]\nfixture = \"unit_test_small\"\n", ".".as_ref()).unwrap();
/// assert_eq!(cfg.mode, Mode::Resilient);
/// assert_eq!(cfg.seeds, vec![0]);
///
/// let err = parse_config(
///     "[problem]\nfixture = \"unit_test_small\"\n[attack]\nalpha = 0.6\nstrategy = { kind = \"sign_flip\", scale = 1.0 }\n",
///     ".".as_ref(),
/// )
/// .unwrap_err();
/// assert!(err.to_string().contains("alpha must be < 0.5"));
/// ```
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;

    let problem =
        match (raw.problem.fixture, raw.problem.file, raw.problem.spec) {
            (Some(name), None, None) => ProblemSource::Fixture(name.parse().map_err(|_| {
                Error::invalid("problem.fixture", format!("unknown fixture `{name}`"))
            })?),
            (None, Some(file), None) => {
                let full = if file.is_absolute() {
                    file
                } else {
                    base.join(file)
                };
                if !full.is_file() {
                    return Err(Error::invalid(
                        "problem.file",
                        format!("{} does not exist", full.display()),
                    ));
                }
                ProblemSource::File(full)
            }
            (None, None, Some(spec)) => ProblemSource::Inline(spec),
            _ => {
                return Err(Error::invalid(
                    "problem",
                    "set exactly one of `fixture`, `file` or `spec`",
                ))
            }
        };

    let seeds = raw.seeds.unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "at least one seed is required"));
    }

    if let Some(a) = &raw.attack {
        check_alpha_field("attack.alpha", a.alpha)?;
    }

    let rule_raw = raw.aggregation.unwrap_or(RawRule {
        kind: "median_neighborhood".into(),
        alpha: None,
        sigma: None,
        budget: None,
    });
    let rule = match rule_raw.kind.as_str() {
        "naive_mean" => RuleSpec::NaiveMean,
        "median_neighborhood" => RuleSpec::MedianNeighborhood,
        "filter" => RuleSpec::Filter {
            sigma: rule_raw.sigma,
            budget: rule_raw.budget.unwrap_or_default(),
        },
        other => {
            return Err(Error::invalid(
                "aggregation.kind",
                format!("unknown rule `{other}`"),
            ))
        }
    };
    if rule_raw.kind != "filter" && (rule_raw.sigma.is_some() || rule_raw.budget.is_some()) {
        return Err(Error::invalid(
            "aggregation",
            "`sigma` and `budget` apply to the filter rule only",
        ));
    }
    if let Some(a) = rule_raw.alpha {
        check_alpha_field("aggregation.alpha", a)?;
        if let Some(att) = &raw.attack {
            if (a - att.alpha).abs() > 1e-12 {
                return Err(Error::invalid(
                    "aggregation.alpha",
                    "must equal attack.alpha",
                ));
            }
        }
    }

    let raw_step = raw.step.unwrap_or_default();
    let step = StepSettings {
        gamma: raw_step.gamma,
        max_iters: raw_step.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
        stop_tol: raw_step.stop_tol.unwrap_or(0.0),
    };
    if let Some(g) = step.gamma {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::invalid("step.gamma", "must be finite and > 0"));
        }
    }
    if step.max_iters == 0 {
        return Err(Error::invalid("step.max_iters", "must be >= 1"));
    }
    if !(step.stop_tol >= 0.0 && step.stop_tol.is_finite()) {
        return Err(Error::invalid("step.stop_tol", "must be finite and >= 0"));
    }

    let raw_dual = raw.dual.unwrap_or_default();
    let dual_cap = match (raw_dual.clipping.unwrap_or(true), raw_dual.cap) {
        (false, Some(_)) => {
            return Err(Error::invalid(
                "dual.cap",
                "set together with clipping = false",
            ))
        }
        (false, None) => DualCapSetting::Off,
        (true, None) => DualCapSetting::Default,
        (true, Some(c)) if c > 0.0 && c.is_finite() => DualCapSetting::Fixed(c),
        (true, Some(c)) => {
            return Err(Error::invalid(
                "dual.cap",
                format!("infeasible cap {c}: must be finite and > 0"),
            ))
        }
    };
    let scaling = raw_dual.scaling.unwrap_or_default();
    if let Scaling::Fixed(s) = scaling {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::invalid(
                "dual.scaling",
                "fixed scale must lie in (0, 1]",
            ));
        }
    }

    let raw_sweep = raw.sweep.unwrap_or_default();
    let sweep = SweepSettings {
        gammas: raw_sweep.gammas,
        points: raw_sweep.points.unwrap_or(DEFAULT_SWEEP_POINTS),
        alphas: raw_sweep
            .alphas
            .unwrap_or_else(|| DEFAULT_SWEEP_ALPHAS.to_vec()),
    };
    if let Some(gs) = &sweep.gammas {
        if gs.is_empty() || gs.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::invalid(
                "sweep.gammas",
                "must be non-empty, finite and > 0",
            ));
        }
    }
    if sweep.points < 2 {
        return Err(Error::invalid("sweep.points", "must be >= 2"));
    }
    if sweep.alphas.is_empty() {
        return Err(Error::invalid("sweep.alphas", "must be non-empty"));
    }
    for a in &sweep.alphas {
        check_alpha_field("sweep.alphas", *a)?;
    }

    let config = RunConfig {
        problem,
        attack: raw.attack,
        rule,
        step,
        scaling,
        dual_cap,
        seeds,
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        mode: raw.mode.unwrap_or(Mode::Resilient),
        sweep,
    };
    config.validate()?;
    Ok(config)
}

fn check_alpha_field(field: &str, alpha: f64) -> Result<()> {
    if !(alpha < 0.5) {
        return Err(Error::invalid(field, "alpha must be < 0.5"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid(field, "alpha must be >= 0"));
    }
    Ok(())
}

impl RunConfig {
    /// Checks every module precondition that does not need a run: the problem
    /// builds, the attack plan fits it and the rule accepts each alpha used.
    pub fn validate(&self) -> Result<()> {
        let seed = self.seeds[0];
        let problem = self.build_problem(seed)?;
        let alphas: Vec<f64> = match self.mode {
            Mode::Baseline => Vec::new(),
            Mode::SweepAlpha => self.sweep.alphas.clone(),
            _ => vec![self.plan(&problem, seed, None)?.alpha()],
        };
        for a in alphas {
            let plan = self.plan(&problem, seed, Some(a))?;
            let rule = match self.mode {
                Mode::AttackedNaive => AggregationRule::NaiveMean,
                _ => self.rule.rule(plan.alpha()),
            };
            rule.validate().map_err(|e| match e {
                Error::InvalidParameter { message, .. } => {
                    Error::invalid("aggregation.alpha", message)
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn build_problem(&self, seed: u64) -> Result<AllocationProblem> {
        match &self.problem {
            ProblemSource::Fixture(f) => Ok(build_fixture(f.as_str(), seed)?.problem),
            ProblemSource::File(p) => AllocationProblem::from_toml_file(p),
            ProblemSource::Inline(spec) => spec.build(),
        }
    }

    /// Attack plan for `seed`; `alpha` overrides the configured fraction, as
    /// the alpha sweep does.
    pub fn plan(
        &self,
        problem: &AllocationProblem,
        seed: u64,
        alpha: Option<f64>,
    ) -> Result<AttackPlan> {
        let n = problem.agents();
        let settings = match (&self.attack, &self.problem) {
            (Some(a), _) => a.clone(),
            (None, ProblemSource::Fixture(f)) => {
                let plan = build_fixture(f.as_str(), seed)?.plan;
                match alpha {
                    None => return Ok(plan),
                    Some(a) => AttackSettings {
                        alpha: a,
                        strategy: plan.strategy().clone(),
                        compromised: None,
                        count: None,
                    },
                }
            }
            (None, _) => match alpha {
                None => return Ok(AttackPlan::none(n)),
                Some(a) => {
                    return Err(Error::invalid(
                        "attack",
                        format!("alpha {a} needs an [attack] section to pick a strategy"),
                    ))
                }
            },
        };
        let a = alpha.unwrap_or(settings.alpha);
        let explicit = alpha.is_none() || (a - settings.alpha).abs() <= 1e-12;
        let plan = match (&settings.compromised, explicit) {
            (Some(list), true) => {
                AttackPlan::new(n, a, list.clone(), settings.strategy.clone(), seed)
            }
            _ => {
                let count = match (settings.count, explicit) {
                    (Some(c), true) => c,
                    _ => (a * n as f64 + 1e-9).floor() as usize,
                };
                AttackPlan::sampled(n, a, count, settings.strategy.clone(), seed)
            }
        };
        plan.map_err(|e| match e {
            Error::InvalidParameter { field, message } => {
                Error::invalid(format!("attack.{field}"), message)
            }
            other => other,
        })
        .and_then(|p| {
            if let Strategy::CoordinatedShift { target } = p.strategy() {
                if target.len() != problem.dim() {
                    return Err(Error::invalid(
                        "attack.strategy.target",
                        format!("needs {} entries", problem.dim()),
                    ));
                }
            }
            Ok(p)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config(text, Path::new("."))
    }

    fn field_of(e: Error) -> String {
        match e {
            Error::InvalidParameter { field, .. } => field,
            other => panic!("expected a field error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse("[problem]\nfixture = \"demand_response\"\n").unwrap();
        assert_eq!(cfg.mode, Mode::Resilient);
        assert_eq!(cfg.step.gamma, None);
        assert_eq!(cfg.step.max_iters, DEFAULT_MAX_ITERS);
        assert_eq!(cfg.dual_cap, DualCapSetting::Default);
        assert_eq!(cfg.scaling, Scaling::OneMinusAlpha);
        assert_eq!(cfg.rule, RuleSpec::MedianNeighborhood);
        assert_eq!(cfg.sweep.points, 12);
    }

    #[test]
    fn alpha_out_of_range_names_the_field() {
        let e = parse(
            "[problem]\nfixture = \"demand_response\"\n[attack]\nalpha = 0.6\nstrategy = { kind = \"large_random\", magnitude = 1.0 }\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("alpha must be < 0.5"), "{e}");
        assert_eq!(field_of(e), "attack.alpha");
    }

    #[test]
    fn filter_rule_outside_its_regime_is_rejected() {
        let e = parse(
            "[problem]\nfixture = \"demand_response\"\n[attack]\nalpha = 0.3\ncount = 6\nstrategy = { kind = \"large_random\", magnitude = 1.0 }\n[aggregation]\nkind = \"filter\"\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("0.25"), "{e}");
        assert_eq!(field_of(e), "aggregation.alpha");
    }

    #[test]
    fn infeasible_cap_and_missing_problem_are_field_errors() {
        let e =
            parse("[problem]\nfixture = \"demand_response\"\n[dual]\ncap = -1.0\n").unwrap_err();
        assert_eq!(field_of(e), "dual.cap");
        let e = parse("[problem]\n").unwrap_err();
        assert_eq!(field_of(e), "problem");
        let e = parse("[problem]\nfile = \"/nonexistent/p.toml\"\n").unwrap_err();
        assert_eq!(field_of(e), "problem.file");
        let e = parse("seeds = []\n[problem]\nfixture = \"demand_response\"\n").unwrap_err();
        assert_eq!(field_of(e), "seeds");
    }

    #[test]
    fn missing_section_is_reported_by_name() {
        let e = parse("mode = \"baseline\"\n").unwrap_err();
        assert!(e.to_string().contains("problem"), "{e}");
        let e =
            parse("[problem]\nfixture = \"demand_response\"\n[step]\ngama = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("gama"), "{e}");
    }

    #[test]
    fn too_many_compromised_channels_are_rejected() {
        let e = parse(
            "[problem]\nfixture = \"unit_test_small\"\n[attack]\nalpha = 0.2\ncompromised = [3, 4]\nstrategy = { kind = \"sign_flip\", scale = 1.0 }\n",
        )
        .unwrap_err();
        assert!(field_of(e).starts_with("attack."));
    }

    #[test]
    fn sweep_alpha_resamples_channel_counts() {
        let cfg =
            parse("mode = \"sweep_alpha\"\n[problem]\nfixture = \"demand_response\"\n").unwrap();
        let p = cfg.build_problem(3).unwrap();
        let counts: Vec<usize> = cfg
            .sweep
            .alphas
            .iter()
            .map(|a| cfg.plan(&p, 3, Some(*a)).unwrap().compromised().len())
            .collect();
        assert_eq!(counts, vec![2, 4, 6]);
    }

    #[test]
    fn fixture_plan_is_used_without_attack_section() {
        let cfg = parse("[problem]\nfixture = \"unit_test_small\"\n").unwrap();
        let p = cfg.build_problem(0).unwrap();
        assert_eq!(cfg.plan(&p, 0, None).unwrap().compromised(), &[4]);
    }
}
