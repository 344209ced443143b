//! Run telemetry, communication accounting and ergodic-rate checks.

use std::io::{Read, Write};

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::problem::{check_len, ProblemError, ProblemSpec};
use crate::solver::Mode;

/// Column names of the exported trace, in order.
pub const TRACE_HEADER: [&str; 6] = [
    "k",
    "objective_gap",
    "constraint_violation",
    "dual_consensus",
    "fixed_point_residual",
    "C_s",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("objective gap requires an oracle value f*")]
    MissingOracle,
    #[error("baseline trace is for instance '{baseline}', not '{expected}'")]
    MismatchedBaseline { expected: String, baseline: String },
    #[error("trace I/O: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed trace: {0}")]
    Malformed(String),
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub objective: f64,
    /// `|f(x_k) − f*|`, present when `f*` is known.
    pub objective_gap: Option<f64>,
    pub constraint_violation: f64,
    pub dual_consensus: f64,
    pub fixed_point_residual: f64,
    /// Cumulative broadcasts `C_i` per agent.
    pub trigger_counts: Vec<u64>,
    /// `x̂_k = (1/k) Σ_{j=1..k} x_j`.
    pub ergodic_x: DVector<f64>,
    /// `λ̂_k = (1/k) Σ_{j=1..k} λ_j`.
    pub ergodic_lambda: DVector<f64>,
}

impl TraceRow {
    /// Average broadcast count `C_s`.
    pub fn average_broadcasts(&self) -> f64 {
        self.trigger_counts.iter().map(|&c| c as f64).sum::<f64>() / self.trigger_counts.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    instance_tag: String,
    mode: Mode,
    rows: Vec<TraceRow>,
    sum_x: DVector<f64>,
    sum_lambda: DVector<f64>,
    count: usize,
}

impl RunTrace {
    pub fn new(instance_tag: &str, mode: Mode, primal_dim: usize, dual_dim: usize) -> Self {
        Self {
            instance_tag: instance_tag.to_string(),
            mode,
            rows: Vec::new(),
            sum_x: DVector::zeros(primal_dim),
            sum_lambda: DVector::zeros(dual_dim),
            count: 0,
        }
    }

    pub fn instance_tag(&self) -> &str {
        &self.instance_tag
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Add `ξ_{k+1}` to the running ergodic sums.
    pub fn accumulate_ergodic(&mut self, x: &DVector<f64>, lambda: &DVector<f64>) {
        self.sum_x += x;
        self.sum_lambda += lambda;
        self.count += 1;
    }

    pub fn ergodic_x(&self) -> DVector<f64> {
        &self.sum_x / self.count.max(1) as f64
    }

    pub fn ergodic_lambda(&self) -> DVector<f64> {
        &self.sum_lambda / self.count.max(1) as f64
    }

    pub fn push(&mut self, row: TraceRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.k < row.k));
        self.rows.push(row);
    }

    /// Fill in objective gaps once `f*` is known.
    pub fn set_optimal_value(&mut self, f_star: f64) {
        for row in &mut self.rows {
            row.objective_gap = Some((row.objective - f_star).abs());
        }
    }

    /// Write the delimited trace: one header line then one line per row.
    /// Numbers use a fixed round-trip format so identical runs give
    /// byte-identical files.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER)?;
        for row in &self.rows {
            w.write_record([
                row.k.to_string(),
                fmt_opt(row.objective_gap),
                fmt_f64(row.constraint_violation),
                fmt_f64(row.dual_consensus),
                fmt_f64(row.fixed_point_residual),
                fmt_f64(row.average_broadcasts()),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "NaN".to_string())
}

/// A trace row read back from disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub objective_gap: f64,
    pub constraint_violation: f64,
    pub dual_consensus: f64,
    pub fixed_point_residual: f64,
    pub average_broadcasts: f64,
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(MetricsError::Malformed(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, MetricsError> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| MetricsError::Malformed(format!("column {}: {e}", TRACE_HEADER[i])))
        };
        out.push(TraceRecord {
            k: rec[0]
                .parse()
                .map_err(|e| MetricsError::Malformed(format!("column k: {e}")))?,
            objective_gap: num(1)?,
            constraint_violation: num(2)?,
            dual_consensus: num(3)?,
            fixed_point_residual: num(4)?,
            average_broadcasts: num(5)?,
        });
    }
    Ok(out)
}

/// `F(x, λ) = Σ_i f_i(x_i) + Σ_i λ_iᵀ ψ_i(x_i)` with one multiplier block
/// per agent stacked in `lambda`.
pub fn saddle_value(problem: &ProblemSpec, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64, ProblemError> {
    let xs = problem.split_primal(x)?;
    let ls = problem.split_dual(lambda)?;
    let mut total = 0.0;
    for ((agent, xi), li) in problem.agents().iter().zip(&xs).zip(&ls) {
        total += agent.objective(xi)? + li.dot(&agent.psi(xi)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErgodicPoint {
    pub t: usize,
    /// `|F(ξ̂_t) − f*|`
    pub gap: f64,
    /// `t · gap`, bounded by a constant when the O(1/t) rate holds.
    pub scaled_gap: f64,
}

/// Ergodic saddle-value gap at every logged iteration. `F(ξ*) = f*` at a
/// saddle point, so only the optimal value is needed.
pub fn ergodic_gap_series(
    trace: &RunTrace,
    problem: &ProblemSpec,
    f_star: Option<f64>,
) -> Result<Vec<ErgodicPoint>, MetricsError> {
    let f_star = f_star.ok_or(MetricsError::MissingOracle)?;
    trace
        .rows()
        .iter()
        .filter(|row| row.k > 0)
        .map(|row| {
            let value = saddle_value(problem, &row.ergodic_x, &row.ergodic_lambda)?;
            let gap = (value - f_star).abs();
            Ok(ErgodicPoint {
                t: row.k,
                gap,
                scaled_gap: row.k as f64 * gap,
            })
        })
        .collect()
}

/// Ratio `max_{t ∈ [from, to]} t·gap / (t·gap at from)` over a series.
/// `None` when the series does not contain `from`.
pub fn scaled_gap_growth(series: &[ErgodicPoint], from: usize, to: usize) -> Option<f64> {
    let anchor = series.iter().find(|p| p.t == from)?.scaled_gap;
    let peak = series
        .iter()
        .filter(|p| p.t >= from && p.t <= to)
        .map(|p| p.scaled_gap)
        .fold(0.0, f64::max);
    Some(peak / anchor)
}

/// `C_s` at the first logged iteration from which the objective gap stays
/// at or below `accuracy` for the rest of the trace, with that iteration.
pub fn comm_at_accuracy(trace: &RunTrace, accuracy: f64) -> Result<Option<(usize, f64)>, MetricsError> {
    let rows = trace.rows();
    let mut first_good = None;
    for (idx, row) in rows.iter().enumerate().rev() {
        let gap = row.objective_gap.ok_or(MetricsError::MissingOracle)?;
        if gap <= accuracy {
            first_good = Some(idx);
        } else {
            break;
        }
    }
    Ok(first_good.map(|idx| (rows[idx].k, rows[idx].average_broadcasts())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommSummary {
    pub mode: Mode,
    /// Final average broadcast count.
    pub average: f64,
    pub per_agent: Vec<u64>,
    pub accuracy: Option<f64>,
    /// `(k, C_s)` where the accuracy was reached and held.
    pub at_accuracy: Option<(usize, f64)>,
    pub baseline_at_accuracy: Option<(usize, f64)>,
    /// `1 − C_s / C_s(baseline)`, at matched accuracy when one is given.
    pub reduction: Option<f64>,
}

pub fn comm_summary(
    trace: &RunTrace,
    baseline: Option<&RunTrace>,
    accuracy: Option<f64>,
) -> Result<CommSummary, MetricsError> {
    let last = trace.last();
    let per_agent = last.map(|r| r.trigger_counts.clone()).unwrap_or_default();
    let average = last.map(TraceRow::average_broadcasts).unwrap_or(f64::NAN);
    let at_accuracy = accuracy.map(|a| comm_at_accuracy(trace, a)).transpose()?.flatten();

    let (baseline_at_accuracy, reduction) = match baseline {
        None => (None, None),
        Some(base) => {
            if base.instance_tag() != trace.instance_tag() {
                return Err(MetricsError::MismatchedBaseline {
                    expected: trace.instance_tag().to_string(),
                    baseline: base.instance_tag().to_string(),
                });
            }
            match accuracy {
                Some(a) => {
                    let base_at = comm_at_accuracy(base, a)?;
                    let reduction = match (at_accuracy, base_at) {
                        (Some((_, ours)), Some((_, theirs))) => Some(1.0 - ours / theirs),
                        _ => None,
                    };
                    (base_at, reduction)
                }
                None => {
                    let theirs = base.last().map(TraceRow::average_broadcasts);
                    (None, theirs.map(|t| 1.0 - average / t))
                }
            }
        }
    };

    Ok(CommSummary {
        mode: trace.mode(),
        average,
        per_agent,
        accuracy,
        at_accuracy,
        baseline_at_accuracy,
        reduction,
    })
}

/// Plain mean of a sequence of iterates.
pub fn ergodic_mean(iterates: &[DVector<f64>]) -> Result<DVector<f64>, ProblemError> {
    let first = iterates
        .first()
        .ok_or_else(|| ProblemError::InvalidProblem("empty iterate sequence".into()))?;
    let mut sum = DVector::zeros(first.len());
    for it in iterates {
        check_len("ergodic iterate", first.len(), it.len())?;
        sum += it;
    }
    Ok(sum / iterates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::AgentProblem;
    use nalgebra::DMatrix;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn linear_spec() -> ProblemSpec {
        // f = x, ψ = x (p = 0, q = 1)
        let agent = AgentProblem::builder(1)
            .objective(|x| x[0], |_| dv(&[1.0]))
            .equality(DMatrix::from_element(1, 1, 1.0), dv(&[0.0]))
            .build()
            .unwrap();
        ProblemSpec::new(vec![agent]).unwrap()
    }

    fn row(k: usize, gap: f64, counts: Vec<u64>) -> TraceRow {
        TraceRow {
            k,
            objective: gap,
            objective_gap: Some(gap),
            constraint_violation: 0.0,
            dual_consensus: 0.0,
            fixed_point_residual: 0.0,
            trigger_counts: counts,
            ergodic_x: dv(&[0.0]),
            ergodic_lambda: dv(&[0.0]),
        }
    }

    #[test]
    fn saddle_value_examples() {
        let spec = linear_spec();
        assert_eq!(saddle_value(&spec, &dv(&[2.0]), &dv(&[3.0])).unwrap(), 8.0);
        assert_eq!(saddle_value(&spec, &dv(&[2.0]), &dv(&[0.0])).unwrap(), 2.0);
        assert!(saddle_value(&spec, &dv(&[2.0]), &dv(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn ergodic_series_of_constant_optimum_is_zero() {
        let spec = linear_spec();
        // optimum of min x s.t. x = 0 is x* = 0 with λ* = −1, f* = 0
        let mut trace = RunTrace::new("c", Mode::Periodic, 1, 1);
        for k in 1..=20 {
            trace.accumulate_ergodic(&dv(&[0.0]), &dv(&[-1.0]));
            let mut r = row(k, 0.0, vec![k as u64 + 1]);
            r.ergodic_x = trace.ergodic_x();
            r.ergodic_lambda = trace.ergodic_lambda();
            trace.push(r);
        }
        let series = ergodic_gap_series(&trace, &spec, Some(0.0)).unwrap();
        assert_eq!(series.len(), 20);
        assert!(series.iter().all(|p| p.gap == 0.0 && p.scaled_gap == 0.0));
        assert!(matches!(
            ergodic_gap_series(&trace, &spec, None),
            Err(MetricsError::MissingOracle)
        ));

        let empty = RunTrace::new("c", Mode::Periodic, 1, 1);
        assert!(ergodic_gap_series(&empty, &spec, Some(0.0)).unwrap().is_empty());
    }

    #[test]
    fn running_sums_match_recomputation() {
        let xs: Vec<_> = (0..7).map(|i| dv(&[0.1 * i as f64, (i as f64).sin()])).collect();
        let mut trace = RunTrace::new("r", Mode::Periodic, 2, 0);
        for x in &xs {
            trace.accumulate_ergodic(x, &dv(&[]));
        }
        let direct = ergodic_mean(&xs).unwrap();
        assert!((trace.ergodic_x() - direct).norm() <= 1e-12);
    }

    #[test]
    fn accuracy_requires_the_gap_to_stay_down() {
        let mut trace = RunTrace::new("a", Mode::EventTriggered, 1, 1);
        let gaps = [1.0, 1e-12, 1e-3, 1e-11, 1e-12, 1e-13];
        for (i, g) in gaps.iter().enumerate() {
            trace.push(row(i + 1, *g, vec![i as u64 + 1, 1]));
        }
        let (k, cs) = comm_at_accuracy(&trace, 1e-10).unwrap().unwrap();
        assert_eq!(k, 4);
        assert_eq!(cs, 2.5);
        assert_eq!(comm_at_accuracy(&trace, 1e-20).unwrap(), None);
    }

    #[test]
    fn periodic_summary_and_reduction() {
        let mut periodic = RunTrace::new("inst", Mode::Periodic, 1, 1);
        let mut event = RunTrace::new("inst", Mode::EventTriggered, 1, 1);
        for k in 1..=10 {
            periodic.push(row(k, 1.0 / k as f64, vec![k as u64 + 1; 2]));
            event.push(row(k, 1.0 / k as f64, vec![(k as u64).div_ceil(2) + 1; 2]));
        }
        let s = comm_summary(&periodic, None, None).unwrap();
        assert_eq!(s.average, 11.0);
        assert_eq!(s.reduction, None);

        let s = comm_summary(&event, Some(&periodic), Some(0.2)).unwrap();
        // gap ≤ 0.2 from k = 5: event C_s = 4, periodic C_s = 6
        assert_eq!(s.at_accuracy, Some((5, 4.0)));
        assert_eq!(s.baseline_at_accuracy, Some((5, 6.0)));
        assert!((s.reduction.unwrap() - (1.0 - 4.0 / 6.0)).abs() < 1e-15);

        let other = RunTrace::new("other", Mode::Periodic, 1, 1);
        assert!(matches!(
            comm_summary(&event, Some(&other), None),
            Err(MetricsError::MismatchedBaseline { .. })
        ));
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut trace = RunTrace::new("io", Mode::Periodic, 1, 1);
        trace.push(row(1, 0.5, vec![2, 2]));
        let mut nogap = row(2, 0.25, vec![3, 3]);
        nogap.objective_gap = None;
        trace.push(nogap);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,objective_gap,constraint_violation,dual_consensus,fixed_point_residual,C_s\n"));
        let back = read_trace_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].objective_gap, 0.5);
        assert_eq!(back[0].average_broadcasts, 2.0);
        assert!(back[1].objective_gap.is_nan());
        assert!(read_trace_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
