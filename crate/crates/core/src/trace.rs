//! Per-iteration run traces, their CSV form, and the summary statistics
//! derived from them.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::PrimalDualState;
use crate::error::{Error, Result};

/// Iterations excluded from steady-state statistics.
pub const BURN_IN: usize = 50;
/// Fraction of the post-burn-in rows used as the steady-state window.
pub const STEADY_FRACTION: f64 = 0.1;
/// Absolute slack of the limit-bound comparison, above the reference solver's accuracy floor.
pub const LIMIT_SLACK: f64 = 1e-12;

/// Columns recorded only by the resilient engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResilientColumns {
    pub est_error: f64,
    pub e_theta_norm: f64,
    pub e_lambda_norm: f64,
    pub e_k: f64,
    /// Recursion check for the transition out of this row; `None` on the last row
    /// or when the check was not configured.
    pub recursion_ok: Option<bool>,
    pub naive_displacement: f64,
    pub radius_max: f64,
    pub filter_iters: usize,
    pub removed_count: usize,
    pub e_theta_bound: f64,
    pub e_lambda_bound: f64,
}

impl ResilientColumns {
    /// Perturbation norms within their per-iteration bounds (1e-12 slack).
    pub fn lemma2_ok(&self) -> bool {
        self.e_theta_norm <= self.e_theta_bound + 1e-12
            && self.e_lambda_norm <= self.e_lambda_bound + 1e-12
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Squared distance of the iterate to the reference saddle point.
    pub residual_sq: f64,
    pub lambda: Vec<f64>,
    /// Constraint values used by the dual update at this iterate.
    pub gbar: Vec<f64>,
    /// Norm of the step taken from this iterate.
    pub step_norm: f64,
    pub resilient: Option<ResilientColumns>,
}

#[derive(Clone, Debug)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub constraint_count: usize,
    /// Iterate after the last recorded step.
    pub final_state: Option<PrimalDualState>,
}

/// Constants needed to evaluate the perturbed-contraction checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub upsilon: f64,
    pub gamma: f64,
    pub l_phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rows: usize,
    pub final_residual_sq: f64,
    pub steady_state_residual_sq: f64,
    pub max_e_k: Option<f64>,
    pub theorem_bound: Option<f64>,
    pub bound_satisfied: Option<bool>,
    pub recursion_violations: Option<usize>,
    pub lemma2_ok: Option<bool>,
}

impl RunTrace {
    pub fn new(constraint_count: usize) -> Self {
        RunTrace {
            rows: Vec::new(),
            constraint_count,
            final_state: None,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_resilient(&self) -> bool {
        self.rows.first().is_some_and(|r| r.resilient.is_some())
    }

    pub fn residuals_sq(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.residual_sq).collect()
    }

    /// Max residual² over the last tenth of the rows after burn-in.
    pub fn steady_state_residual_sq(&self) -> f64 {
        steady_state(&self.residuals_sq())
    }

    pub fn max_e_k(&self) -> Option<f64> {
        if !self.is_resilient() {
            return None;
        }
        Some(
            self.rows
                .iter()
                .filter_map(|r| r.resilient.as_ref().map(|c| c.e_k))
                .fold(0.0, f64::max),
        )
    }

    /// Fills `recursion_ok` on every row but the last.
    pub fn annotate_recursion(&mut self, params: BoundParams) {
        let n = self.rows.len();
        for k in 0..n {
            let ok = if k + 1 < n {
                let e_k = self.rows[k].resilient.as_ref().map_or(0.0, |c| c.e_k);
                Some(crate::resilient::recursion_holds(
                    self.rows[k].residual_sq,
                    self.rows[k + 1].residual_sq,
                    e_k,
                    params,
                ))
            } else {
                None
            };
            if let Some(c) = self.rows[k].resilient.as_mut() {
                c.recursion_ok = ok;
            }
        }
    }

    pub fn summarize(&self, params: Option<BoundParams>) -> RunSummary {
        let steady = self.steady_state_residual_sq();
        let max_e_k = self.max_e_k();
        let theorem_bound = match (params, max_e_k) {
            (Some(p), Some(e)) => {
                crate::resilient::theorem1_limit_bound(p.upsilon, p.gamma, p.l_phi, e)
            }
            _ => None,
        };
        let resilient = self.is_resilient();
        let recursion_violations = resilient.then(|| {
            self.rows
                .iter()
                .filter(|r| r.resilient.as_ref().and_then(|c| c.recursion_ok) == Some(false))
                .count()
        });
        let lemma2_ok = resilient.then(|| {
            self.rows
                .iter()
                .all(|r| r.resilient.as_ref().is_none_or(|c| c.lemma2_ok()))
        });
        RunSummary {
            rows: self.rows.len(),
            final_residual_sq: self.rows.last().map_or(f64::NAN, |r| r.residual_sq),
            steady_state_residual_sq: steady,
            max_e_k,
            theorem_bound,
            bound_satisfied: theorem_bound.map(|b| steady <= b + LIMIT_SLACK),
            recursion_violations,
            lemma2_ok,
        }
    }

    fn header(&self) -> Vec<String> {
        let t = self.constraint_count;
        let mut h = vec!["iteration".to_string(), "residual_sq".to_string()];
        h.extend((1..=t).map(|i| format!("lambda_{i}")));
        h.extend((1..=t).map(|i| format!("gbar_{i}")));
        h.push("step_norm".into());
        if self.is_resilient() {
            h.extend(RESILIENT_COLUMNS.iter().map(|s| s.to_string()));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for row in &self.rows {
            let mut rec = vec![row.iteration.to_string(), fmt_f64(row.residual_sq)];
            rec.extend(row.lambda.iter().copied().map(fmt_f64));
            rec.extend(row.gbar.iter().copied().map(fmt_f64));
            rec.push(fmt_f64(row.step_norm));
            if let Some(c) = &row.resilient {
                rec.extend([
                    fmt_f64(c.est_error),
                    fmt_f64(c.e_theta_norm),
                    fmt_f64(c.e_lambda_norm),
                    fmt_f64(c.e_k),
                    c.recursion_ok.map_or(String::new(), |b| b.to_string()),
                    fmt_f64(c.naive_displacement),
                    fmt_f64(c.radius_max),
                    c.filter_iters.to_string(),
                    c.removed_count.to_string(),
                    fmt_f64(c.e_theta_bound),
                    fmt_f64(c.e_lambda_bound),
                ]);
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let t = header.iter().filter(|h| h.starts_with("lambda_")).count();
        let expected_base = 3 + 2 * t;
        if header.len() < expected_base || header[0] != "iteration" || header[1] != "residual_sq" {
            return Err(Error::Config(
                "trace header is not a recognised schema".into(),
            ));
        }
        let resilient = header.len() > expected_base;
        if resilient && header[expected_base..] != RESILIENT_COLUMNS[..] {
            return Err(Error::Config("unrecognised resilient trace columns".into()));
        }
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |j: usize| -> Result<&str> {
                rec.get(j).ok_or_else(|| {
                    Error::Config(format!("row {} is missing column {}", line + 1, header[j]))
                })
            };
            let num = |j: usize| -> Result<f64> {
                field(j)?.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "row {}: column {} is not a number",
                        line + 1,
                        header[j]
                    ))
                })
            };
            let int = |j: usize| -> Result<usize> {
                field(j)?.parse::<usize>().map_err(|_| {
                    Error::Config(format!(
                        "row {}: column {} is not an integer",
                        line + 1,
                        header[j]
                    ))
                })
            };
            let lambda = (0..t).map(|j| num(2 + j)).collect::<Result<Vec<_>>>()?;
            let gbar = (0..t).map(|j| num(2 + t + j)).collect::<Result<Vec<_>>>()?;
            let resilient_cols = if resilient {
                let b = expected_base;
                let recursion_ok = match field(b + 4)? {
                    "" => None,
                    "true" => Some(true),
                    "false" => Some(false),
                    other => {
                        return Err(Error::Config(format!(
                            "row {}: bad recursion_ok `{other}`",
                            line + 1
                        )))
                    }
                };
                Some(ResilientColumns {
                    est_error: num(b)?,
                    e_theta_norm: num(b + 1)?,
                    e_lambda_norm: num(b + 2)?,
                    e_k: num(b + 3)?,
                    recursion_ok,
                    naive_displacement: num(b + 5)?,
                    radius_max: num(b + 6)?,
                    filter_iters: int(b + 7)?,
                    removed_count: int(b + 8)?,
                    e_theta_bound: num(b + 9)?,
                    e_lambda_bound: num(b + 10)?,
                })
            } else {
                None
            };
            rows.push(TraceRow {
                iteration: int(0)?,
                residual_sq: num(1)?,
                lambda,
                gbar,
                step_norm: num(2 + 2 * t)?,
                resilient: resilient_cols,
            });
        }
        Ok(RunTrace {
            rows,
            constraint_count: t,
            final_state: None,
        })
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

const RESILIENT_COLUMNS: [&str; 11] = [
    "est_error",
    "e_theta_norm",
    "e_lambda_norm",
    "E_k",
    "recursion_ok",
    "naive_displacement",
    "radius_max",
    "filter_iters",
    "removed_count",
    "e_theta_bound",
    "e_lambda_bound",
];

/// Shortest representation that parses back to the same bits.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Max over the last tenth (at least one value) of the series after burn-in;
/// short series fall back to the final value.
pub fn steady_state(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let window = if values.len() > BURN_IN {
        &values[BURN_IN..]
    } else {
        &values[values.len() - 1..]
    };
    let take = ((window.len() as f64 * STEADY_FRACTION).ceil() as usize).max(1);
    window[window.len() - take..]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace(resilient: bool) -> RunTrace {
        let mut trace = RunTrace::new(2);
        for k in 0..5 {
            trace.rows.push(TraceRow {
                iteration: k,
                residual_sq: 1.0 / (k + 1) as f64,
                lambda: vec![0.1 * k as f64, 0.0],
                gbar: vec![-1.0, 1e-20],
                step_norm: 0.3,
                resilient: resilient.then(|| ResilientColumns {
                    est_error: 0.01,
                    e_theta_norm: 0.0,
                    e_lambda_norm: 0.02,
                    e_k: 0.0004,
                    recursion_ok: (k < 4).then_some(true),
                    naive_displacement: 12.5,
                    radius_max: 0.7,
                    filter_iters: 0,
                    removed_count: 0,
                    e_theta_bound: 0.0,
                    e_lambda_bound: 0.03,
                }),
            });
        }
        trace
    }

    #[test]
    fn csv_round_trip_is_exact() {
        for resilient in [false, true] {
            let trace = sample_trace(resilient);
            let mut buf = Vec::new();
            trace.write_csv(&mut buf).unwrap();
            let back = RunTrace::read_csv(buf.as_slice()).unwrap();
            assert_eq!(back.rows, trace.rows);
            assert_eq!(back.constraint_count, 2);
        }
    }

    #[test]
    fn header_follows_schema() {
        let mut buf = Vec::new();
        sample_trace(false).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("iteration,residual_sq,lambda_1,lambda_2,gbar_1,gbar_2,step_norm\n")
        );
    }

    #[test]
    fn steady_state_uses_tail_after_burn_in() {
        let mut v: Vec<f64> = (0..150).map(|k| 1000.0 - k as f64).collect();
        v[60] = 1e9;
        // window is rows 50..150 and the tail is its last 10 rows
        assert_eq!(steady_state(&v), 1000.0 - 140.0);
        assert_eq!(steady_state(&[3.0, 2.0]), 2.0);
    }

    #[test]
    fn summary_counts_resilient_flags() {
        let mut trace = sample_trace(true);
        let s = trace.summarize(None);
        assert_eq!(s.recursion_violations, Some(0));
        assert_eq!(s.lemma2_ok, Some(true));
        assert_eq!(s.max_e_k, Some(0.0004));
        trace.rows[1].resilient.as_mut().unwrap().e_lambda_norm = 1.0;
        assert_eq!(trace.summarize(None).lemma2_ok, Some(false));
        assert_eq!(sample_trace(false).summarize(None).lemma2_ok, None);
    }
}
