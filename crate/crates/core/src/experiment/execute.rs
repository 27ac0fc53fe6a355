//! Executes a validated configuration and writes its artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use crate::aggregate::AggregationRule;
use crate::attack::AttackPlan;
use crate::engine::{
    default_gamma, estimate_lipschitz, reference_saddle_point_with, run_map, PrimalDualState,
    ReferenceConfig, SaddleMap, StepConfig,
};
use crate::error::{Error, Result};
use crate::problem::{robust_view, AllocationProblem, RobustProblemView};
use crate::resilient::{robust_map, run_resilient_against, theorem1_rate, ResilientConfig};
use crate::trace::{BoundParams, RunSummary, RunTrace, BURN_IN};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_BOUND_VIOLATION: i32 = 2;

pub const SUMMARY_FILE: &str = "summary.json";

/// Relative and absolute slack of the baseline monotone-decay check.
const DECAY_REL_SLACK: f64 = 1e-9;
const DECAY_ABS_SLACK: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub label: String,
    pub trace_file: String,
    pub alpha: Option<f64>,
    pub rule: Option<String>,
    pub strategy: Option<String>,
    pub upsilon: f64,
    pub gamma: f64,
    pub l_phi: f64,
    pub summary: RunSummary,
    pub checks: BTreeMap<String, bool>,
    pub passed: bool,
}

impl RunRecord {
    pub fn params(&self) -> BoundParams {
        BoundParams {
            upsilon: self.upsilon,
            gamma: self.gamma,
            l_phi: self.l_phi,
        }
    }
}

/// One sweep point, aggregated over seeds by the median.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub gamma: f64,
    /// `gamma L^2 / v`; the contraction factor is smallest at 0.25.
    pub gamma_l2_over_upsilon: f64,
    pub alpha: f64,
    pub contraction_factor: f64,
    pub steady_state_residual_sq: f64,
    pub theorem_bound: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub mode: Mode,
    pub problem: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub grid: Option<Vec<GridRow>>,
    pub grid_file: Option<String>,
    /// Checks over the whole sweep, on top of the per-run ones.
    pub checks: BTreeMap<String, bool>,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: ExperimentSummary,
    pub exit_code: i32,
    pub output_dir: PathBuf,
}

/// Everything a resilient run needs except its step size.
pub struct Prepared {
    pub problem: AllocationProblem,
    pub view: RobustProblemView,
    pub plan: AttackPlan,
    pub rule: AggregationRule,
    pub map: SaddleMap,
    pub reference: PrimalDualState,
    pub l_phi: f64,
    pub config: ResilientConfig,
}

impl Prepared {
    pub fn new(config: &RunConfig, seed: u64, alpha: Option<f64>, naive: bool) -> Result<Self> {
        let problem = config.build_problem(seed)?;
        let plan = config.plan(&problem, seed, alpha)?;
        let view = robust_view(&problem, plan.alpha())?;
        let rule = if naive {
            AggregationRule::NaiveMean
        } else {
            config.rule.rule(plan.alpha())
        };
        let mut rc = ResilientConfig::new(StepConfig::new(
            1.0,
            config.step.max_iters,
            config.step.stop_tol,
        )?);
        rc.scaling = config.scaling;
        rc.dual_cap = config.dual_cap;
        rc.seed = seed;
        let map = robust_map(&view, &plan, &rc)?;
        let reference = reference_saddle_point_with(&map, &rc.reference)?;
        let l_phi = estimate_lipschitz(&map);
        rc.l_phi = Some(l_phi);
        Ok(Prepared {
            problem,
            view,
            plan,
            rule,
            map,
            reference,
            l_phi,
            config: rc,
        })
    }

    pub fn default_gamma(&self) -> f64 {
        self.problem.upsilon() / (4.0 * self.l_phi * self.l_phi)
    }

    pub fn run(&self, gamma: f64) -> Result<RunTrace> {
        let mut cfg = self.config.clone();
        cfg.step.gamma = gamma;
        let run = run_resilient_against(
            &self.view,
            &PrimalDualState::zeros(&self.problem),
            &self.plan,
            &self.rule,
            &cfg,
            &self.map,
            self.reference.clone(),
            self.l_phi,
        )?;
        Ok(run.trace)
    }
}

/// Residual² never increases after burn-in, up to rounding slack.
pub fn baseline_decay_ok(trace: &RunTrace) -> bool {
    let r = trace.residuals_sq();
    r.windows(2)
        .skip(BURN_IN)
        .all(|w| w[1] <= w[0] * (1.0 + DECAY_REL_SLACK) + DECAY_ABS_SLACK)
}

/// Per-run checks: monotone decay for baseline traces; perturbation bounds,
/// the one-step recursion and the limit bound for resilient ones.
pub fn run_checks(trace: &RunTrace, summary: &RunSummary) -> BTreeMap<String, bool> {
    let mut checks = BTreeMap::new();
    if !trace.is_resilient() {
        checks.insert(
            "residual_nonincreasing".to_string(),
            baseline_decay_ok(trace),
        );
        return checks;
    }
    if let Some(ok) = summary.lemma2_ok {
        checks.insert("lemma2".to_string(), ok);
    }
    if let Some(v) = summary.recursion_violations {
        checks.insert("recursion".to_string(), v == 0);
    }
    if let Some(ok) = summary.bound_satisfied {
        checks.insert("limit_bound".to_string(), ok);
    }
    checks
}

fn record(
    config: &RunConfig,
    mode: Mode,
    seed: u64,
    label: String,
    trace: &RunTrace,
    params: BoundParams,
    attack: Option<(&AttackPlan, &AggregationRule)>,
) -> Result<RunRecord> {
    let trace_file = format!("{label}.csv");
    trace.write_csv_file(config.output_dir.join(&trace_file))?;
    let summary = trace.summarize(trace.is_resilient().then_some(params));
    let checks = run_checks(trace, &summary);
    Ok(RunRecord {
        mode,
        seed,
        label,
        trace_file,
        alpha: attack.map(|(p, _)| p.alpha()),
        rule: attack.map(|(_, r)| r.name().to_string()),
        strategy: attack.map(|(p, _)| p.strategy().name().to_string()),
        upsilon: params.upsilon,
        gamma: params.gamma,
        l_phi: params.l_phi,
        passed: checks.values().all(|b| *b),
        summary,
        checks,
    })
}

fn run_baseline(config: &RunConfig, seed: u64) -> Result<RunRecord> {
    let problem = config.build_problem(seed)?;
    let map = SaddleMap::baseline(&problem);
    let reference = reference_saddle_point_with(&map, &ReferenceConfig::default())?;
    let l_phi = estimate_lipschitz(&map);
    let gamma = config
        .step
        .gamma
        .unwrap_or_else(|| default_gamma(problem.upsilon(), l_phi));
    let step = StepConfig::new(gamma, config.step.max_iters, config.step.stop_tol)?;
    let trace = run_map(&map, &PrimalDualState::zeros(&problem), &step, &reference)?;
    let params = BoundParams {
        upsilon: problem.upsilon(),
        gamma,
        l_phi,
    };
    record(
        config,
        Mode::Baseline,
        seed,
        format!("baseline_seed{seed}"),
        &trace,
        params,
        None,
    )
}

fn run_single(config: &RunConfig, mode: Mode, seed: u64) -> Result<RunRecord> {
    let prep = Prepared::new(config, seed, None, mode == Mode::AttackedNaive)?;
    let gamma = config.step.gamma.unwrap_or_else(|| prep.default_gamma());
    let trace = prep.run(gamma)?;
    let params = BoundParams {
        upsilon: prep.problem.upsilon(),
        gamma,
        l_phi: prep.l_phi,
    };
    let label = format!("{}_seed{seed}", mode.as_str());
    record(
        config,
        mode,
        seed,
        label,
        &trace,
        params,
        Some((&prep.plan, &prep.rule)),
    )
}

struct Point {
    gamma: f64,
    alpha: f64,
    upsilon: f64,
    l_phi: f64,
    steady: f64,
    bound: Option<f64>,
}

fn sweep_gamma(config: &RunConfig, runs: &mut Vec<RunRecord>) -> Result<Vec<Vec<Point>>> {
    let count = config
        .sweep
        .gammas
        .as_ref()
        .map_or(config.sweep.points, Vec::len);
    let mut grid: Vec<Vec<Point>> = (0..count).map(|_| Vec::new()).collect();
    for &seed in &config.seeds {
        let prep = Prepared::new(config, seed, None, false)?;
        let v = prep.problem.upsilon();
        let l = prep.l_phi;
        for (j, cell) in grid.iter_mut().enumerate() {
            let gamma = match &config.sweep.gammas {
                Some(gs) => gs[j],
                None => (j + 1) as f64 / (count + 1) as f64 * v / (2.0 * l * l),
            };
            let trace = prep.run(gamma)?;
            let params = BoundParams {
                upsilon: v,
                gamma,
                l_phi: l,
            };
            let label = format!("sweep_gamma_{:02}_seed{seed}", j + 1);
            let rec = record(
                config,
                Mode::SweepGamma,
                seed,
                label,
                &trace,
                params,
                Some((&prep.plan, &prep.rule)),
            )?;
            cell.push(Point {
                gamma,
                alpha: prep.plan.alpha(),
                upsilon: v,
                l_phi: l,
                steady: rec.summary.steady_state_residual_sq,
                bound: rec.summary.theorem_bound,
            });
            runs.push(rec);
        }
    }
    Ok(grid)
}

fn sweep_alpha(config: &RunConfig, runs: &mut Vec<RunRecord>) -> Result<Vec<Vec<Point>>> {
    let mut grid: Vec<Vec<Point>> = config.sweep.alphas.iter().map(|_| Vec::new()).collect();
    for &seed in &config.seeds {
        for (j, (&alpha, cell)) in config.sweep.alphas.iter().zip(grid.iter_mut()).enumerate() {
            let prep = Prepared::new(config, seed, Some(alpha), false)?;
            let gamma = config.step.gamma.unwrap_or_else(|| prep.default_gamma());
            let trace = prep.run(gamma)?;
            let params = BoundParams {
                upsilon: prep.problem.upsilon(),
                gamma,
                l_phi: prep.l_phi,
            };
            let label = format!("sweep_alpha_{:02}_seed{seed}", j + 1);
            let rec = record(
                config,
                Mode::SweepAlpha,
                seed,
                label,
                &trace,
                params,
                Some((&prep.plan, &prep.rule)),
            )?;
            cell.push(Point {
                gamma,
                alpha,
                upsilon: params.upsilon,
                l_phi: params.l_phi,
                steady: rec.summary.steady_state_residual_sq,
                bound: rec.summary.theorem_bound,
            });
            runs.push(rec);
        }
    }
    Ok(grid)
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn grid_rows(grid: &[Vec<Point>]) -> Vec<GridRow> {
    grid.iter()
        .enumerate()
        .map(|(j, cell)| {
            let col = |f: &dyn Fn(&Point) -> f64| median(&cell.iter().map(f).collect::<Vec<_>>());
            let bounds: Vec<f64> = cell.iter().filter_map(|p| p.bound).collect();
            GridRow {
                index: j + 1,
                gamma: col(&|p| p.gamma),
                gamma_l2_over_upsilon: col(&|p| p.gamma * p.l_phi * p.l_phi / p.upsilon),
                alpha: col(&|p| p.alpha),
                contraction_factor: col(&|p| theorem1_rate(p.upsilon, p.gamma, p.l_phi)),
                steady_state_residual_sq: col(&|p| p.steady),
                theorem_bound: (!bounds.is_empty()).then(|| median(&bounds)),
                runs: cell.len(),
            }
        })
        .collect()
}

/// The grid cell holding the smallest contraction factor has the optimum
/// `gamma L^2 / v = 1/4` between its neighbors.
pub fn contraction_argmin_ok(rows: &[GridRow]) -> bool {
    let Some(k) = (0..rows.len()).min_by(|&a, &b| {
        rows[a]
            .contraction_factor
            .total_cmp(&rows[b].contraction_factor)
    }) else {
        return false;
    };
    let lo = if k == 0 {
        0.0
    } else {
        rows[k - 1].gamma_l2_over_upsilon
    };
    let hi = rows
        .get(k + 1)
        .map_or(f64::INFINITY, |r| r.gamma_l2_over_upsilon);
    lo <= 0.25 && 0.25 <= hi
}

/// Steady-state residual² is non-decreasing along the rows, restricted to
/// the contracting range `gamma L^2 / v < 1/2`.
pub fn residual_monotone(rows: &[GridRow]) -> bool {
    let stable: Vec<f64> = rows
        .iter()
        .filter(|r| r.gamma_l2_over_upsilon < 0.5)
        .map(|r| r.steady_state_residual_sq)
        .collect();
    stable.windows(2).all(|w| w[1] >= w[0])
}

fn write_grid(path: &Path, rows: &[GridRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record([
        "index",
        "gamma",
        "gamma_l2_over_upsilon",
        "alpha",
        "contraction_factor",
        "steady_state_residual_sq",
        "theorem_bound",
        "runs",
    ])?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            format!("{:?}", r.gamma),
            format!("{:?}", r.gamma_l2_over_upsilon),
            format!("{:?}", r.alpha),
            format!("{:?}", r.contraction_factor),
            format!("{:?}", r.steady_state_residual_sq),
            r.theorem_bound.map_or(String::new(), |b| format!("{b:?}")),
            r.runs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Runs every (mode, seed) job of `config`, writing one trace CSV per run,
/// a grid CSV for sweeps and `summary.json`.
pub fn execute(config: &RunConfig) -> Result<Outcome> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut runs = Vec::new();
    let mut checks = BTreeMap::new();
    let mut grid = None;
    let mut grid_file = None;
    match config.mode {
        Mode::Baseline => {
            for &seed in &config.seeds {
                runs.push(run_baseline(config, seed)?);
            }
        }
        Mode::AttackedNaive | Mode::Resilient => {
            for &seed in &config.seeds {
                runs.push(run_single(config, config.mode, seed)?);
            }
        }
        Mode::SweepGamma | Mode::SweepAlpha => {
            let points = if config.mode == Mode::SweepGamma {
                sweep_gamma(config, &mut runs)?
            } else {
                sweep_alpha(config, &mut runs)?
            };
            let rows = grid_rows(&points);
            let name = format!("{}_grid.csv", config.mode.as_str());
            write_grid(&dir.join(&name), &rows)?;
            if config.mode == Mode::SweepGamma {
                if config.sweep.gammas.is_none() {
                    checks.insert(
                        "contraction_argmin".to_string(),
                        contraction_argmin_ok(&rows),
                    );
                }
                checks.insert(
                    "residual_monotone_in_gamma".to_string(),
                    residual_monotone(&rows),
                );
            } else {
                let steady: Vec<f64> = rows.iter().map(|r| r.steady_state_residual_sq).collect();
                checks.insert(
                    "residual_monotone_in_alpha".to_string(),
                    steady.windows(2).all(|w| w[1] >= w[0]),
                );
            }
            grid = Some(rows);
            grid_file = Some(name);
        }
    }
    let passed = runs.iter().all(|r| r.passed) && checks.values().all(|b| *b);
    let summary = ExperimentSummary {
        mode: config.mode,
        problem: config.problem.label(),
        seeds: config.seeds.clone(),
        runs,
        grid,
        grid_file,
        checks,
        passed,
    };
    let path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(Outcome {
        exit_code: if passed {
            EXIT_PASS
        } else {
            EXIT_BOUND_VIOLATION
        },
        summary,
        output_dir: dir.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub trace: String,
    pub rows: usize,
    /// The run entry found in a sibling `summary.json`, if any.
    pub recorded: Option<RunRecord>,
    pub recomputed: RunSummary,
    /// Recorded summary and recursion flags equal their recomputation.
    pub consistent: bool,
    pub checks: BTreeMap<String, bool>,
    pub exit_code: i32,
}

/// Re-checks a trace CSV. With a sibling `summary.json` naming the trace, the
/// recursion flags and summary are recomputed from the rows and compared with
/// the recorded ones; otherwise the flags stored in the trace are trusted.
pub fn check_trace(path: impl AsRef<Path>) -> Result<CheckReport> {
    let path = path.as_ref();
    let trace = RunTrace::read_csv_file(path)?;
    if trace.is_empty() {
        return Err(Error::Config(format!("{} has no rows", path.display())));
    }
    let file_name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let summary_path = path.with_file_name(SUMMARY_FILE);
    let recorded = if summary_path.is_file() {
        let text =
            std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        let summary: ExperimentSummary = serde_json::from_str(&text)?;
        summary.runs.into_iter().find(|r| r.trace_file == file_name)
    } else {
        None
    };
    let (recomputed, consistent) = match &recorded {
        Some(rec) if trace.is_resilient() => {
            let mut fresh = trace.clone();
            fresh.annotate_recursion(rec.params());
            let flags_match = fresh.rows.iter().zip(&trace.rows).all(|(a, b)| {
                a.resilient.as_ref().map(|c| c.recursion_ok)
                    == b.resilient.as_ref().map(|c| c.recursion_ok)
            });
            let s = fresh.summarize(Some(rec.params()));
            let same = s == rec.summary;
            (s, flags_match && same)
        }
        Some(rec) => {
            let s = trace.summarize(None);
            let same = s == rec.summary;
            (s, same)
        }
        None => (trace.summarize(None), true),
    };
    let checks = run_checks(&trace, &recomputed);
    let exit_code = if !consistent {
        EXIT_FAILURE
    } else if checks.values().all(|b| *b) {
        EXIT_PASS
    } else {
        EXIT_BOUND_VIOLATION
    };
    Ok(CheckReport {
        trace: path.display().to_string(),
        rows: trace.len(),
        recorded,
        recomputed,
        consistent,
        checks,
        exit_code,
    })
}
