//! Abstention-aware evaluation metrics.
//!
//! Coverage is measured over all records; micro F1, samplewise F1 and hit
//! rate only over the answered ones. When nothing was answered those three
//! are undefined (`None`), which is reported separately from a score of 0.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Comparison form of a label: trimmed and lowercased.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

fn label_set<S: AsRef<str>>(labels: &[S]) -> BTreeSet<String> {
    labels.iter().map(|l| normalize_label(l.as_ref())).filter(|l| !l.is_empty()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Labels(Vec<String>),
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub gold: Vec<String>,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no records to evaluate")]
    NoRecords,
    #[error("record {0}: gold label set is empty")]
    EmptyGold(String),
}

impl EvalRecord {
    /// Builds a record; an empty (or all-blank) prediction becomes Abstain.
    pub fn new<S: Into<String>>(id: impl Into<String>, gold: Vec<S>, prediction: Option<Vec<S>>) -> Self {
        let prediction = match prediction {
            Some(labels) => {
                let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
                if label_set(&labels).is_empty() {
                    Prediction::Abstain
                } else {
                    Prediction::Labels(labels)
                }
            }
            None => Prediction::Abstain,
        };
        Self { id: id.into(), gold: gold.into_iter().map(Into::into).collect(), prediction }
    }

    pub fn is_answered(&self) -> bool {
        matches!(self.prediction, Prediction::Labels(_))
    }

    /// (tp, fp, fn) over normalized, de-duplicated label sets; `None` for abstentions.
    pub fn confusion(&self) -> Option<(u64, u64, u64)> {
        let Prediction::Labels(pred) = &self.prediction else {
            return None;
        };
        let pred = label_set(pred);
        let gold = label_set(&self.gold);
        let tp = pred.intersection(&gold).count() as u64;
        Some((tp, pred.len() as u64 - tp, gold.len() as u64 - tp))
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn check(records: &[EvalRecord]) -> Result<(), MetricError> {
    if records.is_empty() {
        return Err(MetricError::NoRecords);
    }
    if let Some(r) = records.iter().find(|r| label_set(&r.gold).is_empty()) {
        return Err(MetricError::EmptyGold(r.id.clone()));
    }
    Ok(())
}

/// Fraction of records with a non-abstained prediction.
pub fn coverage(records: &[EvalRecord]) -> Result<f64, MetricError> {
    check(records)?;
    let answered = records.iter().filter(|r| r.is_answered()).count();
    Ok(answered as f64 / records.len() as f64)
}

/// F1 from TP/FP/FN pooled over answered records.
pub fn micro_f1(records: &[EvalRecord]) -> Result<Option<f64>, MetricError> {
    check(records)?;
    let mut any = false;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (a, b, c) in records.iter().filter_map(EvalRecord::confusion) {
        any = true;
        tp += a;
        fp += b;
        fn_ += c;
    }
    Ok(any.then(|| f1(tp, fp, fn_)))
}

/// Mean per-record F1 over answered records.
pub fn samplewise_f1(records: &[EvalRecord]) -> Result<Option<f64>, MetricError> {
    check(records)?;
    let scores: Vec<f64> =
        records.iter().filter_map(EvalRecord::confusion).map(|(tp, fp, fn_)| f1(tp, fp, fn_)).collect();
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Fraction of answered records where some predicted label is gold.
pub fn hit_rate(records: &[EvalRecord]) -> Result<Option<f64>, MetricError> {
    check(records)?;
    let hits: Vec<bool> = records.iter().filter_map(EvalRecord::confusion).map(|(tp, _, _)| tp > 0).collect();
    Ok((!hits.is_empty()).then(|| hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub n_total: u64,
    pub n_answered: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub coverage: f64,
    pub micro_f1: Option<f64>,
    pub samplewise_f1: Option<f64>,
    pub hit_rate: Option<f64>,
    pub counts: Counts,
}

impl MetricReport {
    pub fn compute(records: &[EvalRecord]) -> Result<Self, MetricError> {
        let mut counts = Counts { n_total: records.len() as u64, ..Counts::default() };
        for (tp, fp, fn_) in records.iter().filter_map(EvalRecord::confusion) {
            counts.n_answered += 1;
            counts.tp += tp;
            counts.fp += fp;
            counts.fn_ += fn_;
        }
        Ok(Self {
            coverage: coverage(records)?,
            micro_f1: micro_f1(records)?,
            samplewise_f1: samplewise_f1(records)?,
            hit_rate: hit_rate(records)?,
            counts,
        })
    }
}

fn pct(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "n/a".to_string(),
    }
}

/// Plain-text table with columns Cvg, F1 (M), F1 (S), Hit, in percent.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let header = ["group", "N", "Cvg", "F1 (M)", "F1 (S)", "Hit"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.clone(),
                r.counts.n_total.to_string(),
                pct(Some(r.coverage)),
                pct(r.micro_f1),
                pct(r.samplewise_f1),
                pct(r.hit_rate),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for row in &body {
        out.push('\n');
        out.push_str(&line(row));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, gold: &[&str], pred: Option<&[&str]>) -> EvalRecord {
        EvalRecord::new(id, gold.to_vec(), pred.map(|p| p.to_vec()))
    }

    fn ab() -> Vec<EvalRecord> {
        vec![rec("A", &["x"], Some(&["x", "y"])), rec("B", &["z", "w"], Some(&["z"]))]
    }

    #[test]
    fn coverage_counts() {
        let rs = vec![rec("1", &["a"], Some(&["a"])), rec("2", &["a"], None), rec("3", &["a"], Some(&["b"]))];
        assert!((coverage(&rs).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(coverage(&[rec("1", &["a"], None)]).unwrap(), 0.0);
        assert_eq!(coverage(&ab()).unwrap(), 1.0);
        assert_eq!(coverage(&[]), Err(MetricError::NoRecords));
    }

    #[test]
    fn worked_example() {
        let rs = ab();
        let report = MetricReport::compute(&rs).unwrap();
        assert_eq!((report.counts.tp, report.counts.fp, report.counts.fn_), (2, 1, 1));
        assert_eq!(report.micro_f1, Some(2.0 / 3.0));
        assert_eq!(report.samplewise_f1, Some(2.0 / 3.0));
        assert_eq!(report.hit_rate, Some(1.0));
    }

    #[test]
    fn extremes() {
        assert_eq!(micro_f1(&[rec("1", &["a", "b"], Some(&["b", "a"]))]).unwrap(), Some(1.0));
        assert_eq!(micro_f1(&[rec("1", &["a"], Some(&["b"]))]).unwrap(), Some(0.0));
        assert_eq!(
            samplewise_f1(&[rec("1", &["a"], Some(&["a"])), rec("2", &["a"], Some(&["b"]))]).unwrap(),
            Some(0.5)
        );
        assert_eq!(samplewise_f1(&[rec("1", &["a"], Some(&["a"]))]).unwrap(), Some(1.0));
        assert_eq!(hit_rate(&[rec("1", &["x"], Some(&["y"]))]).unwrap(), Some(0.0));
    }

    #[test]
    fn boolean_hit_rate_is_accuracy() {
        let mut rs = Vec::new();
        for i in 0..10 {
            let pred = if i < 7 { "True" } else { "False" };
            rs.push(rec(&i.to_string(), &["True"], Some(&[pred])));
        }
        rs.push(rec("abstained", &["True"], None));
        assert!((hit_rate(&rs).unwrap().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn undefined_when_everything_abstains() {
        let rs = vec![rec("1", &["a"], None), rec("2", &["b"], None)];
        let r = MetricReport::compute(&rs).unwrap();
        assert_eq!((r.coverage, r.micro_f1, r.samplewise_f1, r.hit_rate), (0.0, None, None, None));
    }

    #[test]
    fn duplicates_and_case_are_collapsed() {
        let r = rec("1", &["Paris"], Some(&["paris ", "PARIS"]));
        assert_eq!(r.confusion(), Some((1, 0, 0)));
        assert_eq!(rec("1", &["a"], Some(&[" "])).prediction, Prediction::Abstain);
    }

    #[test]
    fn empty_gold_is_rejected() {
        assert_eq!(coverage(&[rec("g", &[], Some(&["a"]))]), Err(MetricError::EmptyGold("g".into())));
    }

    #[test]
    fn table_layout() {
        let all_abstain = MetricReport::compute(&[rec("1", &["a"], None)]).unwrap();
        let table =
            render_table(&[("all".into(), MetricReport::compute(&ab()).unwrap()), ("boolean".into(), all_abstain)]);
        let expected = "\
group    N    Cvg  F1 (M)  F1 (S)    Hit
-------  -  -----  ------  ------  -----
all      2  100.0    66.7    66.7  100.0
boolean  1    0.0     n/a     n/a    n/a
";
        assert_eq!(table, expected);
    }
}
