//! Shared helpers for the integration tests: relative-error comparison,
//! central finite differences, brute-force metric oracles, and small fixture
//! builders. The oracles deliberately use the most naive formulation
//! available (O(N^2) pair counting, literal re-binning) so the library's
//! optimized paths are checked against independent arithmetic.

#![allow(dead_code)]

use mode_lab::backbone::BackboneConfig;
use mode_lab::eval::PredictionRecord;
use mode_lab::model::{AdapterSpec, ModelConfig};
use mode_lab::synthdata::SynthConfig;
use mode_lab::training::TrainConfig;
use rand::Rng;

/// `|a - b| <= tol * max(1, |a|, |b|)`.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1.0_f64.max(a.abs()).max(b.abs())
}

pub fn assert_rel_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        rel_close(a, b, tol),
        "{}: analytic {} vs reference {} (diff {:.3e}, tol {:.1e})",
        what,
        a,
        b,
        (a - b).abs(),
        tol
    );
}

/// Central finite difference of a scalar function at `x`, one coordinate at
/// a time.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let up = f(&xs);
        xs[i] = orig - eps;
        let down = f(&xs);
        xs[i] = orig;
        g.push((up - down) / (2.0 * eps));
    }
    g
}

/// Compare an analytic gradient against central differences coordinate by
/// coordinate at relative tolerance `tol`.
pub fn check_grad(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
    what: &str,
) {
    assert_eq!(analytic.len(), x.len(), "{}: gradient length", what);
    let numeric = finite_diff(f, x, eps);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        assert!(
            rel_close(a, n, tol),
            "{}: coordinate {}: analytic {} vs finite-difference {} (diff {:.3e})",
            what,
            i,
            a,
            n,
            (a - n).abs()
        );
    }
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles over prediction records.
// ---------------------------------------------------------------------------

pub fn oracle_ece(records: &[PredictionRecord], n_bins: usize) -> f64 {
    let n = records.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let in_bin: Vec<&PredictionRecord> = records
            .iter()
            .filter(|r| {
                if b == n_bins - 1 {
                    r.confidence >= lo
                } else {
                    r.confidence >= lo && r.confidence < hi
                }
            })
            .collect();
        if in_bin.is_empty() {
            continue;
        }
        let acc = in_bin.iter().filter(|r| r.correct()).count() as f64 / in_bin.len() as f64;
        let conf = in_bin.iter().map(|r| r.confidence).sum::<f64>() / in_bin.len() as f64;
        total += in_bin.len() as f64 / n * (acc - conf).abs();
    }
    total
}

pub fn oracle_mce(records: &[PredictionRecord], n_bins: usize) -> f64 {
    let mut worst = 0.0_f64;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let in_bin: Vec<&PredictionRecord> = records
            .iter()
            .filter(|r| {
                if b == n_bins - 1 {
                    r.confidence >= lo
                } else {
                    r.confidence >= lo && r.confidence < hi
                }
            })
            .collect();
        if in_bin.is_empty() {
            continue;
        }
        let acc = in_bin.iter().filter(|r| r.correct()).count() as f64 / in_bin.len() as f64;
        let conf = in_bin.iter().map(|r| r.confidence).sum::<f64>() / in_bin.len() as f64;
        worst = worst.max((acc - conf).abs());
    }
    worst
}

pub fn oracle_nll(records: &[PredictionRecord]) -> f64 {
    let total: f64 = records
        .iter()
        .map(|r| {
            let p_true = if r.label == 1 { r.p1 } else { 1.0 - r.p1 };
            -p_true.max(1e-12).ln()
        })
        .sum();
    total / records.len() as f64
}

pub fn oracle_prior_entropy(records: &[PredictionRecord]) -> f64 {
    let n = records.len() as f64;
    let p1 = records.iter().filter(|r| r.label == 1).count() as f64 / n;
    let mut h = 0.0;
    for p in [p1, 1.0 - p1] {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Pairwise AUROC: P(confidence of a correct record exceeds an incorrect
/// one's) with half credit for ties.
pub fn oracle_auroc(records: &[PredictionRecord]) -> f64 {
    let pos: Vec<f64> =
        records.iter().filter(|r| r.correct()).map(|r| r.confidence).collect();
    let neg: Vec<f64> =
        records.iter().filter(|r| !r.correct()).map(|r| r.confidence).collect();
    assert!(!pos.is_empty() && !neg.is_empty(), "oracle_auroc needs both classes");
    let mut score = 0.0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                score += 1.0;
            } else if p == q {
                score += 0.5;
            }
        }
    }
    score / (pos.len() as f64 * neg.len() as f64)
}

/// Step-interpolated average precision with correctness as the positive
/// class: sweep descending confidence, grouping ties, and accumulate
/// precision-at-group times recall increment.
pub fn oracle_auprc(records: &[PredictionRecord]) -> f64 {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let n_pos = sorted.iter().filter(|r| r.correct()).count();
    assert!(n_pos > 0, "oracle_auprc needs at least one correct record");
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].confidence == sorted[i].confidence {
            j += 1;
        }
        let tp_before = tp;
        for r in &sorted[i..j] {
            if r.correct() {
                tp += 1;
            }
        }
        seen += j - i;
        let precision = tp as f64 / seen as f64;
        let recall_inc = (tp - tp_before) as f64 / n_pos as f64;
        ap += precision * recall_inc;
        i = j;
    }
    ap
}

/// Literal drop-and-score: stable-sort by confidence ascending, drop the
/// first floor(rate * N), score the rest.
pub fn oracle_rejection(records: &[PredictionRecord], rate: f64) -> Option<(usize, f64)> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].confidence.partial_cmp(&records[b].confidence).unwrap());
    let drop = (rate * records.len() as f64).floor() as usize;
    let kept = &order[drop.min(records.len())..];
    if kept.is_empty() {
        return None;
    }
    let correct = kept.iter().filter(|&&i| records[i].correct()).count();
    Some((kept.len(), correct as f64 / kept.len() as f64))
}

/// A random record set exercising ties, extreme confidences, and both
/// labels.
pub fn random_records(rng: &mut impl Rng, n: usize, n_tasks: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| {
            let label = usize::from(rng.gen_bool(0.5));
            // Quantize some confidences so ties actually occur.
            let raw: f64 = rng.gen_range(0.5..1.0);
            let confidence = if rng.gen_bool(0.3) {
                (raw * 20.0).round() / 20.0
            } else if rng.gen_bool(0.05) {
                1.0
            } else {
                raw
            };
            let pred = if rng.gen_bool(0.75) { label } else { 1 - label };
            let p1 = if pred == 1 { confidence } else { 1.0 - confidence };
            PredictionRecord {
                participant_id: i,
                task_id: rng.gen_range(0..n_tasks),
                label,
                pred,
                confidence,
                p1,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Small fixtures.
// ---------------------------------------------------------------------------

/// A backbone small enough for finite differences and smoke training.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_classes: 2,
        max_seq_len: 6,
        d_in: 4,
        task_embedding: true,
    }
}

pub fn tiny_model_config(n_experts: usize, routed: bool) -> ModelConfig {
    ModelConfig {
        backbone: tiny_backbone(),
        adapters: Some(AdapterSpec {
            rank: 2,
            alpha: 4.0,
            n_experts,
            routed,
            temperature: 0.7,
            stop_router_grad: false,
            magnitude: mode_lab::adapters::MagnitudeKind::PerColumn,
        }),
        n_tasks: 3,
    }
}

/// A dataset config that generates in well under a second.
pub fn tiny_data(n_participants: usize, n_tasks: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_participants,
        n_tasks,
        seq_len: 6,
        d_in: 4,
        snr_schedule: mode_lab::synthdata::snr_ramp(n_tasks, 0.8, 4.0),
        master_seed: seed,
        ..SynthConfig::default()
    }
}

/// A fast-but-real training config for integration tests.
pub fn tiny_train(seeds: Vec<u64>) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        n_experts: 3,
        rank: 2,
        alpha: 4.0,
        seeds,
        stage1_epochs: 1,
        ..TrainConfig::default()
    }
}
