//! Accuracy, calibration, and discrimination metrics over prediction
//! records, plus the rejection curve and the task-by-expert activation
//! matrix.
//!
//! Conventions (documented because several have no single standard):
//! * ECE/MCE use equal-width confidence bins (default 10); a confidence of
//!   exactly 1.0 falls into the top bin; empty bins are skipped.
//! * NLL is the mean negative log-likelihood in nats with probabilities
//!   clamped below at 1e-12.
//! * NCE = (H_prior - NLL) / H_prior with H_prior the entropy of the eval
//!   split's empirical label distribution; undefined (error) when the split
//!   is single-class.
//! * AUROC/AUPRC treat *correctness* as the positive class and confidence
//!   as the score. AUROC uses the rank formulation with half credit for
//!   ties; AUPRC is average precision with step-wise interpolation.
//! * The rejection curve drops the `floor(rate * N)` lowest-confidence
//!   records, breaking confidence ties by stable record order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ExampleOutput;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub participant_id: usize,
    pub task_id: usize,
    pub label: usize,
    pub pred: usize,
    /// Max class probability (>= 0.5 for binary output).
    pub confidence: f64,
    /// Probability assigned to class 1.
    pub p1: f64,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.pred == self.label
    }

    pub fn from_output(o: &ExampleOutput) -> PredictionRecord {
        PredictionRecord {
            participant_id: o.participant_id,
            task_id: o.task_id,
            label: o.label,
            pred: o.pred,
            confidence: o.confidence,
            p1: o.probs.get(1).copied().unwrap_or(0.0),
        }
    }
}

pub fn records_from_outputs(outs: &[ExampleOutput]) -> Vec<PredictionRecord> {
    outs.iter().map(PredictionRecord::from_output).collect()
}

fn require_nonempty(records: &[PredictionRecord], op: &'static str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::domain(op, "empty record set"));
    }
    Ok(())
}

fn bin_index(confidence: f64, n_bins: usize) -> usize {
    ((confidence * n_bins as f64).floor() as usize).min(n_bins - 1)
}

fn bin_gaps(records: &[PredictionRecord], n_bins: usize) -> Result<Vec<(usize, f64)>> {
    if n_bins < 1 {
        return Err(Error::config("calibration needs at least one bin"));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for r in records {
        let b = bin_index(r.confidence, n_bins);
        count[b] += 1;
        conf_sum[b] += r.confidence;
        if r.correct() {
            correct[b] += 1;
        }
    }
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let acc = correct[b] as f64 / count[b] as f64;
            let conf = conf_sum[b] / count[b] as f64;
            (count[b], (acc - conf).abs())
        })
        .collect())
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<f64> {
    require_nonempty(records, "ece")?;
    let gaps = bin_gaps(records, n_bins)?;
    let n = records.len() as f64;
    Ok(gaps.iter().map(|&(c, g)| c as f64 / n * g).sum())
}

/// Maximum calibration error over non-empty bins.
pub fn mce(records: &[PredictionRecord], n_bins: usize) -> Result<f64> {
    require_nonempty(records, "mce")?;
    let gaps = bin_gaps(records, n_bins)?;
    Ok(gaps.iter().map(|&(_, g)| g).fold(0.0, f64::max))
}

/// Mean negative log-likelihood of the true class, in nats.
pub fn nll(records: &[PredictionRecord]) -> Result<f64> {
    require_nonempty(records, "nll")?;
    let mut total = 0.0;
    for r in records {
        let p_true = if r.label == 1 { r.p1 } else { 1.0 - r.p1 };
        total += -(p_true.max(1e-12)).ln();
    }
    Ok(total / records.len() as f64)
}

/// Entropy (nats) of the empirical label distribution.
pub fn prior_entropy(records: &[PredictionRecord]) -> Result<f64> {
    require_nonempty(records, "prior_entropy")?;
    let n1 = records.iter().filter(|r| r.label == 1).count() as f64;
    let q = n1 / records.len() as f64;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    Ok(term(q) + term(1.0 - q))
}

/// NCE from an NLL value and a prior entropy (both in nats).
pub fn nce_from(nll: f64, h_prior: f64) -> Result<f64> {
    if !(h_prior > 0.0) {
        return Err(Error::domain("nce", "single-class eval set has zero prior entropy"));
    }
    Ok((h_prior - nll) / h_prior)
}

/// Normalized cross-entropy: 1 for perfect prediction, 0 when emitting the
/// empirical prior, negative when worse than the prior.
pub fn nce(records: &[PredictionRecord]) -> Result<f64> {
    nce_from(nll(records)?, prior_entropy(records)?)
}

/// AUROC of confidence as a score for correctness: P(c_correct > c_wrong)
/// plus half credit for ties, computed via tie-averaged ranks.
pub fn auroc_correctness(records: &[PredictionRecord]) -> Result<f64> {
    require_nonempty(records, "auroc")?;
    let n_pos = records.iter().filter(|r| r.correct()).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain("auroc", "needs both correct and incorrect records"));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[a].confidence.partial_cmp(&records[b].confidence).unwrap());
    // tie-averaged ranks (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len()
            && records[idx[j + 1]].confidence == records[idx[i]].confidence
        {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if records[k].correct() {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision of confidence for correctness, with step-wise
/// interpolation: records grouped by distinct confidence descending, AP =
/// sum over groups of (delta recall) * (precision at that threshold).
pub fn auprc_correctness(records: &[PredictionRecord]) -> Result<f64> {
    require_nonempty(records, "auprc")?;
    let n_pos = records.iter().filter(|r| r.correct()).count();
    if n_pos == 0 {
        return Err(Error::domain("auprc", "no correct records; positive class empty"));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[b].confidence.partial_cmp(&records[a].confidence).unwrap());
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len()
            && records[idx[j + 1]].confidence == records[idx[i]].confidence
        {
            j += 1;
        }
        for &k in &idx[i..=j] {
            seen += 1;
            if records[k].correct() {
                tp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionPoint {
    pub rate: f64,
    pub retained: usize,
    pub accuracy: f64,
}

pub fn default_rejection_rates() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

/// Accuracy on the records kept after withholding the lowest-confidence
/// fraction. Rates that would retain zero records are skipped with a
/// warning on stderr.
pub fn rejection_curve(records: &[PredictionRecord], rates: &[f64]) -> Result<Vec<RejectionPoint>> {
    require_nonempty(records, "rejection_curve")?;
    if rates.iter().any(|&r| !(0.0..1.0).contains(&r)) {
        return Err(Error::config("rejection rates must lie in [0,1)"));
    }
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    // stable sort: equal confidences keep record order, lowest first
    idx.sort_by(|&a, &b| records[a].confidence.partial_cmp(&records[b].confidence).unwrap());
    let mut points = Vec::with_capacity(rates.len());
    for &rate in rates {
        let drop = (rate * n as f64).floor() as usize;
        let kept = &idx[drop..];
        if kept.is_empty() {
            eprintln!("warning: rejection rate {} leaves no records; point omitted", rate);
            continue;
        }
        let correct = kept.iter().filter(|&&k| records[k].correct()).count();
        points.push(RejectionPoint {
            rate,
            retained: kept.len(),
            accuracy: correct as f64 / kept.len() as f64,
        });
    }
    Ok(points)
}

/// Mean expert weight per task from routing rows; tasks with no rows are
/// reported missing rather than zero.
pub fn activation_heatmap(
    rows: &[(usize, Vec<f64>)],
    n_tasks: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    if rows.is_empty() {
        return Err(Error::domain("activation_heatmap", "no routing rows"));
    }
    let e = rows[0].1.len();
    let mut sums = vec![vec![0.0; e]; n_tasks];
    let mut counts = vec![0usize; n_tasks];
    for (task, w) in rows {
        if *task >= n_tasks {
            return Err(Error::index("activation_heatmap", format!("task {}", task)));
        }
        if w.len() != e {
            return Err(Error::shape("activation_heatmap", "inconsistent expert count"));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-6 || w.iter().any(|&v| v < 0.0) {
            return Err(Error::domain("activation_heatmap", "routing row is not a distribution"));
        }
        for (acc, &v) in sums[*task].iter_mut().zip(w) {
            *acc += v;
        }
        counts[*task] += 1;
    }
    Ok((0..n_tasks)
        .map(|t| {
            if counts[t] == 0 {
                None
            } else {
                Some(sums[t].iter().map(|&s| s / counts[t] as f64).collect())
            }
        })
        .collect())
}

/// Parse a routing CSV (header `participant_id,task_id,w0..`) into
/// (task, weights) rows.
pub fn read_routing_csv(path: &std::path::Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("routing CSV is empty".into()))?;
    let cols = header.split(',').count();
    if cols < 3 {
        return Err(Error::Format("routing CSV needs participant, task, and weight columns".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != cols {
            return Err(Error::Format(format!("routing row has {} columns, expected {}", parts.len(), cols)));
        }
        let task: usize = parts[1]
            .parse()
            .map_err(|e| Error::Format(format!("bad task id '{}': {}", parts[1], e)))?;
        let w: Vec<f64> = parts[2..]
            .iter()
            .map(|s| s.parse().map_err(|e| Error::Format(format!("bad weight '{}': {}", s, e))))
            .collect::<Result<_>>()?;
        rows.push((task, w));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    pub per_task_accuracy: Vec<Option<f64>>,
    pub averaged_accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub nll: f64,
    /// Absent when the labels are single-class (prior entropy is zero).
    pub nce: Option<f64>,
    /// Absent when every prediction is correct or every one is wrong.
    pub auroc: Option<f64>,
    /// Absent when no prediction is correct.
    pub auprc: Option<f64>,
    pub rejection_curve: Vec<RejectionPoint>,
    /// Mean expert weight per task (rows missing for absent tasks); present
    /// only for routed models.
    pub activation: Option<Vec<Option<Vec<f64>>>>,
}

/// Assemble the full report. `routing_rows` (task, weights) activates the
/// heatmap.
pub fn full_report(
    records: &[PredictionRecord],
    routing_rows: Option<&[(usize, Vec<f64>)]>,
    n_tasks: usize,
    n_bins: usize,
    rates: &[f64],
) -> Result<EvalReport> {
    require_nonempty(records, "full_report")?;
    let mut correct = vec![0usize; n_tasks];
    let mut total = vec![0usize; n_tasks];
    for r in records {
        if r.task_id >= n_tasks {
            return Err(Error::index("full_report", format!("task {}", r.task_id)));
        }
        total[r.task_id] += 1;
        if r.correct() {
            correct[r.task_id] += 1;
        }
    }
    let per_task: Vec<Option<f64>> = (0..n_tasks)
        .map(|t| if total[t] == 0 { None } else { Some(correct[t] as f64 / total[t] as f64) })
        .collect();
    let present: Vec<f64> = per_task.iter().flatten().copied().collect();
    let averaged = present.iter().sum::<f64>() / present.len() as f64;
    // The rank and normalized metrics are undefined on degenerate sets
    // (all-correct, all-wrong, single-class labels). The strict metric
    // functions refuse those; the aggregate report records the field as
    // absent instead of failing the whole evaluation.
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Domain { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    let report = EvalReport {
        n_records: records.len(),
        per_task_accuracy: per_task,
        averaged_accuracy: averaged,
        ece: ece(records, n_bins)?,
        mce: mce(records, n_bins)?,
        nll: nll(records)?,
        nce: defined(nce(records))?,
        auroc: defined(auroc_correctness(records))?,
        auprc: defined(auprc_correctness(records))?,
        rejection_curve: rejection_curve(records, rates)?,
        activation: match routing_rows {
            Some(rows) => Some(activation_heatmap(rows, n_tasks)?),
            None => None,
        },
    };
    for (name, v) in [
        ("ece", Some(report.ece)),
        ("mce", Some(report.mce)),
        ("nll", Some(report.nll)),
        ("nce", report.nce),
        ("auroc", report.auroc),
        ("auprc", report.auprc),
    ] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::domain("full_report", format!("{} is not finite", name)));
            }
        }
    }
    Ok(report)
}
