//! Ranking loss, average precision and hamming loss over score matrices.
//!
//! Ranking loss and average precision are averaged over the rows that have at
//! least one relevant and at least one irrelevant label; other rows are
//! counted as skipped. Hamming loss uses every row.

use ndarray::{ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

/// A per-instance average together with how many rows contributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    /// NaN when no row was evaluated.
    pub value: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn average_rows(
    scores: ArrayView2<f64>,
    truth: ArrayView2<u8>,
    per_row: impl Fn(ArrayView1<f64>, ArrayView1<u8>) -> f64,
) -> Averaged {
    assert_eq!(scores.dim(), truth.dim(), "score and truth shapes differ");
    let mut sum = 0.0;
    let mut evaluated = 0;
    for (s, t) in scores.axis_iter(Axis(0)).zip(truth.axis_iter(Axis(0))) {
        let relevant = t.iter().filter(|&&v| v != 0).count();
        if relevant == 0 || relevant == t.len() {
            continue;
        }
        sum += per_row(s, t);
        evaluated += 1;
    }
    Averaged {
        value: if evaluated > 0 { sum / evaluated as f64 } else { f64::NAN },
        evaluated,
        skipped: scores.nrows() - evaluated,
    }
}

/// Fraction of (relevant, irrelevant) pairs ordered wrongly; ties count ½.
pub fn ranking_loss(scores: ArrayView2<f64>, truth: ArrayView2<u8>) -> Averaged {
    average_rows(scores, truth, |s, t| {
        let rel: Vec<f64> = s.iter().zip(t).filter(|(_, &y)| y != 0).map(|(&v, _)| v).collect();
        let irr: Vec<f64> = s.iter().zip(t).filter(|(_, &y)| y == 0).map(|(&v, _)| v).collect();
        let mut bad = 0.0;
        for &p in &rel {
            for &q in &irr {
                if q > p {
                    bad += 1.0;
                } else if q == p {
                    bad += 0.5;
                }
            }
        }
        bad / (rel.len() * irr.len()) as f64
    })
}

/// Labels ordered by descending score, ties by ascending index.
fn ranking(scores: ArrayView1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean over relevant labels of the precision at that label's rank.
pub fn average_precision(scores: ArrayView2<f64>, truth: ArrayView2<u8>) -> Averaged {
    average_rows(scores, truth, |s, t| {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (pos, j) in ranking(s).into_iter().enumerate() {
            if t[j] != 0 {
                hits += 1;
                sum += hits as f64 / (pos + 1) as f64;
            }
        }
        sum / hits as f64
    })
}

/// Fraction of all label bits where `score > threshold` disagrees with truth.
pub fn hamming_loss(scores: ArrayView2<f64>, truth: ArrayView2<u8>, threshold: f64) -> f64 {
    assert_eq!(scores.dim(), truth.dim(), "score and truth shapes differ");
    let wrong = Zip::from(scores)
        .and(truth)
        .fold(0usize, |acc, &s, &t| acc + usize::from((s > threshold) != (t != 0)));
    wrong as f64 / scores.len() as f64
}

/// Default binarization threshold for hamming loss.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ranking_loss: f64,
    pub average_precision: f64,
    pub hamming_loss: f64,
    pub n_evaluated: usize,
    pub n_skipped: usize,
}

impl EvalReport {
    pub fn evaluate(scores: ArrayView2<f64>, truth: ArrayView2<u8>, threshold: f64) -> Self {
        let rl = ranking_loss(scores, truth);
        let ap = average_precision(scores, truth);
        Self {
            ranking_loss: rl.value,
            average_precision: ap.value,
            hamming_loss: hamming_loss(scores, truth, threshold),
            n_evaluated: rl.evaluated,
            n_skipped: rl.skipped,
        }
    }
}
