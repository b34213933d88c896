//! Metric reports and call statistics over a run directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use r2kg_core::metrics::{render_table, EvalRecord, MetricError, MetricReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::read_jsonl;
use crate::manifest::Gates;
use crate::runner::{GoldRecord, ResultRecord, RunInfo, VerdictTag, GOLD_FILE, RESULTS_FILE, RUN_FILE};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const STATS_JSON: &str = "stats.json";
pub const STATS_TXT: &str = "stats.txt";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0} not found; a report needs gold labels")]
    MissingGold(String),
    #[error("{0} not found; nothing has been run yet")]
    MissingResults(String),
    #[error("result for sample {0:?} has no gold record")]
    UnknownSample(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    read_jsonl(path).map_err(|source| ReportError::Io { path: path.display().to_string(), source })
}

/// Gold and results of a run directory, results joined to gold order.
pub fn load_run(dir: &Path) -> Result<(Vec<GoldRecord>, Vec<ResultRecord>), ReportError> {
    let gold_path = dir.join(GOLD_FILE);
    if !gold_path.exists() {
        return Err(ReportError::MissingGold(gold_path.display().to_string()));
    }
    let results_path = dir.join(RESULTS_FILE);
    if !results_path.exists() {
        return Err(ReportError::MissingResults(results_path.display().to_string()));
    }
    let gold: Vec<GoldRecord> = load(&gold_path)?;
    let results: Vec<ResultRecord> = load(&results_path)?;
    let order: HashMap<&str, usize> = gold.iter().enumerate().map(|(i, g)| (g.id.as_str(), i)).collect();
    let mut indexed = Vec::with_capacity(results.len());
    for r in results {
        let i = *order.get(r.id.as_str()).ok_or_else(|| ReportError::UnknownSample(r.id.clone()))?;
        indexed.push((i, r));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok((gold, indexed.into_iter().map(|(_, r)| r).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub metric: String,
    pub threshold: f64,
    pub actual: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub overall: MetricReport,
    /// One row per task kind, then one per group key.
    pub rows: Vec<ReportRow>,
    /// Gold samples without a recorded result.
    pub pending: usize,
    pub gates: Vec<GateOutcome>,
}

impl Report {
    pub fn gates_passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn table(&self) -> String {
        let mut rows = vec![("all".to_string(), self.overall.clone())];
        rows.extend(self.rows.iter().map(|r| (r.group.clone(), r.metrics.clone())));
        render_table(&rows)
    }

    pub fn render(&self) -> String {
        let mut out = self.table();
        if self.pending > 0 {
            out.push_str(&format!("\n{} samples pending\n", self.pending));
        }
        if !self.gates.is_empty() {
            out.push('\n');
            for g in &self.gates {
                let actual = g.actual.map(|v| format!("{:.1}", v * 100.0)).unwrap_or_else(|| "n/a".into());
                let status = if g.passed { "pass" } else { "FAIL" };
                out.push_str(&format!("gate {} >= {:.1}: {actual} {status}\n", g.metric, g.threshold * 100.0));
            }
        }
        out
    }
}

pub fn eval_records(gold: &[GoldRecord], results: &[ResultRecord]) -> Vec<EvalRecord> {
    let by_id: HashMap<&str, &GoldRecord> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
    results
        .iter()
        .filter_map(|r| {
            by_id.get(r.id.as_str()).map(|g| EvalRecord::new(r.id.clone(), g.labels.clone(), r.prediction()))
        })
        .collect()
}

pub fn build_report(
    gold: &[GoldRecord],
    results: &[ResultRecord],
    gates: Option<&Gates>,
) -> Result<Report, ReportError> {
    let records = eval_records(gold, results);
    let overall = if records.is_empty() { empty_report() } else { MetricReport::compute(&records)? };

    let by_id: HashMap<&str, &GoldRecord> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut kinds: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    let mut groups: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for rec in &records {
        let g = by_id[rec.id.as_str()];
        kinds.entry(g.kind.to_string()).or_default().push(rec.clone());
        if let Some(group) = &g.group {
            groups.entry(format!("group {group}")).or_default().push(rec.clone());
        }
    }
    let mut rows = Vec::new();
    for (name, recs) in kinds.into_iter().chain(groups) {
        rows.push(ReportRow { group: name, metrics: MetricReport::compute(&recs)? });
    }

    let gates = gates.map(|g| evaluate_gates(g, &overall)).unwrap_or_default();
    Ok(Report { overall, rows, pending: gold.len().saturating_sub(results.len()), gates })
}

fn empty_report() -> MetricReport {
    MetricReport { coverage: 0.0, micro_f1: None, samplewise_f1: None, hit_rate: None, counts: Default::default() }
}

/// Undefined metrics fail their gate.
pub fn evaluate_gates(gates: &Gates, report: &MetricReport) -> Vec<GateOutcome> {
    [
        ("coverage", gates.coverage, Some(report.coverage)),
        ("micro_f1", gates.micro_f1, report.micro_f1),
        ("samplewise_f1", gates.samplewise_f1, report.samplewise_f1),
        ("hit_rate", gates.hit_rate, report.hit_rate),
    ]
    .into_iter()
    .filter_map(|(metric, threshold, actual)| {
        threshold.map(|threshold| GateOutcome {
            metric: metric.to_string(),
            threshold,
            actual,
            passed: actual.is_some_and(|a| a >= threshold),
        })
    })
    .collect()
}

/// Mean model calls per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallStats {
    pub samples: usize,
    pub answered: usize,
    pub operator_calls: u64,
    pub supervisor_calls: u64,
    pub iterations: u64,
    pub mean_operator_calls: Option<f64>,
    pub mean_supervisor_calls: Option<f64>,
    /// Supervisor calls averaged over answered samples only.
    pub mean_supervisor_calls_answered: Option<f64>,
    pub mean_iterations: Option<f64>,
    /// Abstentions per reason.
    pub abstained: BTreeMap<String, usize>,
}

fn mean(total: u64, n: usize) -> Option<f64> {
    (n > 0).then(|| total as f64 / n as f64)
}

pub fn call_stats(results: &[ResultRecord]) -> CallStats {
    let sum = |f: fn(&ResultRecord) -> u32, rs: &mut dyn Iterator<Item = &ResultRecord>| {
        rs.map(|r| u64::from(f(r))).sum::<u64>()
    };
    let answered: Vec<&ResultRecord> = results.iter().filter(|r| r.verdict == VerdictTag::Answered).collect();
    let operator_calls = sum(|r| r.operator_calls, &mut results.iter());
    let supervisor_calls = sum(|r| r.supervisor_calls, &mut results.iter());
    let iterations = sum(|r| r.iterations, &mut results.iter());
    let answered_sup = sum(|r| r.supervisor_calls, &mut answered.iter().copied());
    let mut abstained = BTreeMap::new();
    for r in results {
        if let Some(reason) = r.reason {
            *abstained.entry(reason.to_string()).or_insert(0) += 1;
        }
    }
    CallStats {
        samples: results.len(),
        answered: answered.len(),
        operator_calls,
        supervisor_calls,
        iterations,
        mean_operator_calls: mean(operator_calls, results.len()),
        mean_supervisor_calls: mean(supervisor_calls, results.len()),
        mean_supervisor_calls_answered: mean(answered_sup, answered.len()),
        mean_iterations: mean(iterations, results.len()),
        abstained,
    }
}

pub fn render_stats(stats: &CallStats) -> String {
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
    let rows = [
        ("samples".to_string(), stats.samples.to_string()),
        ("answered".to_string(), stats.answered.to_string()),
        ("operator calls / sample".to_string(), fmt(stats.mean_operator_calls)),
        ("supervisor calls / sample".to_string(), fmt(stats.mean_supervisor_calls)),
        ("supervisor calls / answered sample".to_string(), fmt(stats.mean_supervisor_calls_answered)),
        ("iterations / sample".to_string(), fmt(stats.mean_iterations)),
    ]
    .into_iter()
    .chain(stats.abstained.iter().map(|(k, v)| (format!("abstained: {k}"), v.to_string())));
    let rows: Vec<(String, String)> = rows.collect();
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<w0$}  {v:>w1$}\n")).collect()
}

/// Gates recorded with the run, if any.
pub fn recorded_gates(dir: &Path) -> Option<Gates> {
    let text = fs::read_to_string(dir.join(RUN_FILE)).ok()?;
    serde_json::from_str::<RunInfo>(&text).ok()?.gates
}

/// Writes `report.{json,txt}` and `stats.{json,txt}` into the run directory.
pub fn write_outputs(dir: &Path) -> Result<(Report, CallStats), ReportError> {
    let (gold, results) = load_run(dir)?;
    let report = build_report(&gold, &results, recorded_gates(dir).as_ref())?;
    let stats = call_stats(&results);
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| ReportError::Io { path: path.display().to_string(), source })
    };
    write(REPORT_JSON, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    write(REPORT_TXT, report.render())?;
    write(STATS_JSON, serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n")?;
    write(STATS_TXT, render_stats(&stats))?;
    Ok((report, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TaskKind;
    use r2kg_core::orchestrator::AbstainReason;

    fn gold(id: &str, labels: &[&str], kind: TaskKind) -> GoldRecord {
        GoldRecord { id: id.into(), labels: labels.iter().map(|s| s.to_string()).collect(), kind, group: None }
    }

    fn answered(id: &str, labels: &[&str], op: u32, sup: u32) -> ResultRecord {
        ResultRecord {
            id: id.into(),
            verdict: VerdictTag::Answered,
            labels: Some(labels.iter().map(|s| s.to_string()).collect()),
            reason: None,
            iterations: op,
            operator_calls: op,
            supervisor_calls: sup,
            transcript_path: format!("transcripts/{id}.jsonl"),
            error: None,
        }
    }

    fn abstained(id: &str, op: u32) -> ResultRecord {
        ResultRecord {
            verdict: VerdictTag::Abstained,
            labels: None,
            reason: Some(AbstainReason::LimitExceeded),
            supervisor_calls: 0,
            ..answered(id, &[], op, 0)
        }
    }

    #[test]
    fn all_abstain_reports_zero_coverage_and_na() {
        let g = vec![gold("a", &["x"], TaskKind::SingleLabel), gold("b", &["y"], TaskKind::SingleLabel)];
        let r = vec![abstained("a", 3), abstained("b", 3)];
        let report = build_report(&g, &r, None).unwrap();
        assert_eq!(report.overall.coverage, 0.0);
        let table = report.table();
        assert!(table.lines().nth(2).unwrap().ends_with("2  0.0     n/a     n/a  n/a"), "{table}");
        let stats = call_stats(&r);
        assert_eq!(stats.mean_supervisor_calls_answered, None);
        assert_eq!(stats.abstained["limit_exceeded"], 2);
    }

    #[test]
    fn gates_fail_on_undefined_or_low_metrics() {
        let g = vec![gold("a", &["x"], TaskKind::SingleLabel)];
        let gates = Gates { coverage: Some(0.5), hit_rate: Some(0.5), ..Gates::default() };
        let report = build_report(&g, &[abstained("a", 1)], Some(&gates)).unwrap();
        assert!(!report.gates_passed());
        assert_eq!(report.gates[1].actual, None);
        let report = build_report(&g, &[answered("a", &["x"], 2, 1)], Some(&gates)).unwrap();
        assert!(report.gates_passed());
        assert!(report.render().contains("gate hit_rate >= 50.0: 100.0 pass"));
    }

    #[test]
    fn rows_per_kind_and_group() {
        let mut g = vec![gold("a", &["True"], TaskKind::Boolean), gold("b", &["x", "y"], TaskKind::MultiLabel)];
        g[0].group = Some("one-hop".into());
        let r = vec![answered("a", &["true"], 2, 1), answered("b", &["x"], 4, 2)];
        let report = build_report(&g, &r, None).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(names, ["boolean", "multi_label", "group one-hop"]);
        assert_eq!(report.rows[1].metrics.samplewise_f1, Some(2.0 / 3.0));
        assert_eq!(report.pending, 0);
    }

    #[test]
    fn stats_table_layout() {
        let stats = call_stats(&[answered("a", &["x"], 3, 1), abstained("b", 6)]);
        assert_eq!(stats.mean_operator_calls, Some(4.5));
        let expected = [
            "samples                                2",
            "answered                               1",
            "operator calls / sample             4.50",
            "supervisor calls / sample           0.50",
            "supervisor calls / answered sample  1.00",
            "iterations / sample                 4.50",
            "abstained: limit_exceeded              1",
        ];
        assert_eq!(render_stats(&stats), expected.map(|l| format!("{l}\n")).concat());
    }
}
