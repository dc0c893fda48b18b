//! Confusion matrices, per-class and averaged metrics, run aggregation and
//! CSV/text reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column name of predictions that fall outside the gold label axis.
pub const OVERFLOW_LABEL: &str = "UNMAPPED";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("nothing to evaluate")]
    EmptyMatrix,
    #[error("cannot write report: {0}")]
    IoFailure(String),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::IoFailure(e.to_string())
    }
}

impl From<csv::Error> for EvalError {
    fn from(e: csv::Error) -> Self {
        EvalError::IoFailure(e.to_string())
    }
}

/// Rows are gold labels, columns predicted labels, plus one overflow column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Per gold row: predictions outside `labels`.
    pub overflow: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.overflow.iter().sum::<u64>()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() + self.overflow[i]
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Tallies `(gold, pred)` pairs. The axis holds the gold labels present,
/// ordered as in `order` (typically ID then OOD), with any others appended in
/// first-appearance order.
pub fn confusion(gold: &[String], pred: &[String], order: &[String]) -> Result<ConfusionMatrix, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyMatrix);
    }
    let mut labels: Vec<String> = order.iter().filter(|l| gold.contains(l)).cloned().collect();
    labels.dedup();
    for g in gold {
        if !labels.contains(g) {
            labels.push(g.clone());
        }
    }
    let n = labels.len();
    let mut m = ConfusionMatrix { labels, counts: vec![vec![0; n]; n], overflow: vec![0; n] };
    for (g, p) in gold.iter().zip(pred) {
        let i = m.index_of(g).expect("gold label on axis");
        match m.index_of(p) {
            Some(j) => m.counts[i][j] += 1,
            None => m.overflow[i] += 1,
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    /// Macro recall.
    pub recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
    pub seed: Option<u64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)`, zero on an empty denominator.
fn f1_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

/// Per-class and averaged metrics. Overflow predictions count as false
/// negatives of their gold class and as false positives of none.
pub fn compute_metrics(m: &ConfusionMatrix) -> Result<MetricReport, EvalError> {
    let total = m.total();
    if m.labels.is_empty() || total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut per_class = Vec::with_capacity(m.labels.len());
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for (i, label) in m.labels.iter().enumerate() {
        let tp = m.counts[i][i];
        let fp = m.col_sum(i) - tp;
        let support = m.row_sum(i);
        let fn_ = support - tp;
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_class.push(ClassMetrics {
            label: label.clone(),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: f1_counts(tp, fp, fn_),
            support,
        });
    }
    let k = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    Ok(MetricReport {
        macro_precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        micro_precision: ratio(tp_all, tp_all + fp_all),
        micro_recall: ratio(tp_all, tp_all + fn_all),
        micro_f1: f1_counts(tp_all, fp_all, fn_all),
        accuracy: ratio(tp_all, total),
        total,
        seed: None,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub macro_precision: MeanStd,
    pub recall: MeanStd,
    pub macro_f1: MeanStd,
    pub micro_f1: MeanStd,
}

pub fn aggregate_runs(reports: &[MetricReport]) -> Option<AggregateReport> {
    if reports.is_empty() {
        return None;
    }
    let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Some(AggregateReport {
        runs: reports.len(),
        macro_precision: col(|r| r.macro_precision),
        recall: col(|r| r.recall),
        macro_f1: col(|r| r.macro_f1),
        micro_f1: col(|r| r.micro_f1),
    })
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes `metrics.csv`, `confusion.csv` and `confusion.txt` into `dir`.
pub fn emit_report(report: &MetricReport, matrix: &ConfusionMatrix, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["name", "precision", "recall", "f1", "support"])?;
    for c in &report.per_class {
        w.write_record([c.label.clone(), fmt6(c.precision), fmt6(c.recall), fmt6(c.f1), c.support.to_string()])?;
    }
    let total = report.total.to_string();
    w.write_record(["macro".into(), fmt6(report.macro_precision), fmt6(report.recall), fmt6(report.macro_f1), total.clone()])?;
    w.write_record(["micro".into(), fmt6(report.micro_precision), fmt6(report.micro_recall), fmt6(report.micro_f1), total])?;
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("confusion.csv"))?;
    let mut header = vec!["gold".to_string()];
    header.extend(matrix.labels.iter().cloned());
    header.push(OVERFLOW_LABEL.into());
    w.write_record(&header)?;
    for (i, label) in matrix.labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(matrix.counts[i].iter().map(u64::to_string));
        row.push(matrix.overflow[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;

    std::fs::write(dir.join("confusion.txt"), render_matrix(matrix))?;
    Ok(())
}

/// Fixed-width text rendering, rows gold and columns predicted.
pub fn render_matrix(m: &ConfusionMatrix) -> String {
    let mut cols: Vec<String> = m.labels.clone();
    cols.push(OVERFLOW_LABEL.into());
    let first = m.labels.iter().map(String::len).chain(["gold \\ pred".len()]).max().unwrap_or(0);
    let widths: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let values = (0..m.labels.len()).map(|i| if j < m.labels.len() { m.counts[i][j] } else { m.overflow[i] });
            values.map(|v| v.to_string().len()).chain([c.len()]).max().unwrap_or(1)
        })
        .collect();
    let mut out = format!("{:<first$}", "gold \\ pred");
    for (c, w) in cols.iter().zip(&widths) {
        out.push_str(&format!("  {c:>w$}"));
    }
    out.push('\n');
    for (i, label) in m.labels.iter().enumerate() {
        out.push_str(&format!("{label:<first$}"));
        for (j, w) in widths.iter().enumerate() {
            let v = if j < m.labels.len() { m.counts[i][j] } else { m.overflow[i] };
            out.push_str(&format!("  {v:>w$}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn diagonal_and_overflow() {
        let m = confusion(&v(&["A", "A", "B"]), &v(&["A", "A", "B"]), &[]).unwrap();
        assert_eq!(m.counts, vec![vec![2, 0], vec![0, 1]]);
        let m = confusion(&v(&["A"]), &v(&["UNMAPPED"]), &[]).unwrap();
        assert_eq!(m.overflow, vec![1]);
        assert!(matches!(confusion(&v(&["A"]), &[], &[]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(confusion(&[], &[], &[]), Err(EvalError::EmptyMatrix)));
    }

    #[test]
    fn axis_follows_order_and_drops_absent() {
        let m = confusion(&v(&["W", "Q", "W"]), &v(&["Q", "Q", "X"]), &v(&["Q", "Y", "W"])).unwrap();
        assert_eq!(m.labels, v(&["Q", "W"]));
        assert_eq!(m.counts, vec![vec![1, 0], vec![1, 0]]);
        assert_eq!(m.overflow, vec![0, 1]);
    }

    #[test]
    fn perfect_and_swapped() {
        let r = compute_metrics(&confusion(&v(&["A", "B", "C"]), &v(&["A", "B", "C"]), &[]).unwrap()).unwrap();
        assert_eq!((r.macro_precision, r.recall, r.macro_f1, r.micro_f1), (1.0, 1.0, 1.0, 1.0));
        let r = compute_metrics(&confusion(&v(&["A", "B"]), &v(&["B", "A"]), &[]).unwrap()).unwrap();
        assert_eq!((r.macro_precision, r.macro_f1), (0.0, 0.0));
    }

    #[test]
    fn asymmetric_fixture() {
        // gold A×4, B×3, C×3
        let gold = v(&["A", "A", "A", "A", "B", "B", "B", "C", "C", "C"]);
        let pred = v(&["A", "A", "B", "UNMAPPED", "B", "B", "A", "C", "A", "C"]);
        let r = compute_metrics(&confusion(&gold, &pred, &[]).unwrap()).unwrap();
        // A: tp 2, fp 2, fn 2 | B: tp 2, fp 1, fn 1 | C: tp 2, fp 0, fn 1
        let a = &r.per_class[0];
        assert_eq!((a.precision, a.recall, a.f1), (0.5, 0.5, 0.5));
        let b = &r.per_class[1];
        assert_eq!((b.precision, b.recall), (2.0 / 3.0, 2.0 / 3.0));
        let c = &r.per_class[2];
        assert_eq!((c.precision, c.recall, c.f1), (1.0, 2.0 / 3.0, 0.8));
        assert!((r.macro_precision - (0.5 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy, 0.6);
        // pooled: tp 6, fp 3, fn 4
        assert_eq!(r.micro_f1, 12.0 / 19.0);
    }

    #[test]
    fn aggregation() {
        let base = compute_metrics(&confusion(&v(&["A", "B"]), &v(&["A", "B"]), &[]).unwrap()).unwrap();
        let agg = aggregate_runs(&vec![base.clone(); 5]).unwrap();
        assert_eq!(agg.macro_f1, MeanStd { mean: 1.0, std: 0.0 });
        assert_eq!(MeanStd::of(&[0.0, 1.0]), MeanStd { mean: 0.5, std: 0.5 });
        assert_eq!(MeanStd::of(&[0.3]), MeanStd { mean: 0.3, std: 0.0 });
        assert!(aggregate_runs(&[]).is_none());
    }

    #[test]
    fn report_files_roundtrip_and_repeat() {
        let gold = v(&["A", "A", "B", "C"]);
        let pred = v(&["A", "UNMAPPED", "B", "A"]);
        let m = confusion(&gold, &pred, &[]).unwrap();
        let r = compute_metrics(&m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, &m, dir.path()).unwrap();
        let first: Vec<Vec<u8>> =
            ["metrics.csv", "confusion.csv", "confusion.txt"].iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
        emit_report(&r, &m, dir.path()).unwrap();
        for (f, bytes) in ["metrics.csv", "confusion.csv", "confusion.txt"].iter().zip(&first) {
            assert_eq!(&std::fs::read(dir.path().join(f)).unwrap(), bytes);
        }
        let mut rd = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(&rows[0][0], "A");
        assert_eq!(rows[0][1].parse::<f64>().unwrap(), r.per_class[0].precision);
        assert_eq!(&rows[3][0], "macro");
        assert!((rows[3][3].parse::<f64>().unwrap() - r.macro_f1).abs() < 5e-7);
        let header = csv::Reader::from_path(dir.path().join("confusion.csv")).unwrap().headers().unwrap().clone();
        assert_eq!(header.iter().last(), Some(OVERFLOW_LABEL));
        let text = std::fs::read_to_string(dir.path().join("confusion.txt")).unwrap();
        assert!(text.lines().next().unwrap().ends_with("UNMAPPED"));
    }
}
