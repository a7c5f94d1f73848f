//! Agreement between continuous token scores and binary ground truth.
//!
//! Token level: area under the precision-recall curve, F1 of the top-`p`%
//! selections averaged over `p = 5, 10, ..., 95`, and F1 of the top-`k`
//! selection with `k` the annotated token count. Span level: the same
//! selections scored by span IoU-F1. All selections share one rule: take
//! `ceil(p / 100 * L)` tokens, higher score first, lower index first on ties.

use serde::{Deserialize, Serialize};

use crate::corpus::Span;
use crate::error::{Error, Result};

pub type SpanSet = Vec<Span>;

/// The selection percentages `5, 10, ..., 95`.
pub const PERCENTAGES: [u32; 19] = [5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

/// Continuous scores for one (sample, class) pair with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRationale {
    pub sample_id: String,
    pub class_index: usize,
    pub scores: Vec<f64>,
    pub gt: Vec<u8>,
}

impl ScoredRationale {
    pub fn validate(&self) -> Result<()> {
        check_inputs(&self.scores, &self.gt)
    }
}

fn check_inputs(scores: &[f64], gt: &[u8]) -> Result<()> {
    if scores.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} scores for {} ground-truth tokens",
            scores.len(),
            gt.len()
        )));
    }
    if !gt.contains(&1) {
        return Err(Error::invalid("ground truth has no positive token"));
    }
    Ok(())
}

/// Token order by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Area under the precision-recall curve: step-wise sum of
/// `(R_k - R_{k-1}) * P_k` over distinct score thresholds, tied scores
/// entering together.
pub fn auc_pr(scores: &[f64], gt: &[u8]) -> Result<f64> {
    check_inputs(scores, gt)?;
    let positives = gt.iter().filter(|&&g| g == 1).count() as f64;
    let order = ranking(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut area, mut prev_recall) = (0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if gt[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / positives;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Binary mask with the `k` highest-scoring tokens set.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<u8> {
    let mut out = vec![0u8; scores.len()];
    for &i in ranking(scores).iter().take(k) {
        out[i] = 1;
    }
    out
}

/// Number of tokens selected at `p` percent of `len`: `ceil(p * len / 100)`.
pub fn selection_size(p: u32, len: usize) -> usize {
    (p as usize * len).div_ceil(100)
}

/// Selects the top `ceil(p / 100 * L)` tokens.
pub fn top_fraction_select(scores: &[f64], p: u32) -> Vec<u8> {
    select_top_k(scores, selection_size(p, scores.len()))
}

/// Binary F1, zero when precision + recall is zero.
pub fn binary_f1(pred: &[u8], gt: &[u8]) -> f64 {
    let tp = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 1).count() as f64;
    let pp = pred.iter().filter(|&&p| p == 1).count() as f64;
    let ap = gt.iter().filter(|&&g| g == 1).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (tp / pp, tp / ap);
    2.0 * precision * recall / (precision + recall)
}

/// Mean F1 over the 19 percentage selections.
pub fn token_f1_sweep(scores: &[f64], gt: &[u8]) -> Result<f64> {
    check_inputs(scores, gt)?;
    let total: f64 = PERCENTAGES
        .iter()
        .map(|&p| binary_f1(&top_fraction_select(scores, p), gt))
        .sum();
    Ok(total / PERCENTAGES.len() as f64)
}

/// F1 of the top-`k` selection with `k` the number of annotated tokens.
pub fn discrete_token_f1(scores: &[f64], gt: &[u8]) -> Result<f64> {
    check_inputs(scores, gt)?;
    let k = gt.iter().filter(|&&g| g == 1).count();
    Ok(binary_f1(&select_top_k(scores, k), gt))
}

/// Maximal runs of ones as half-open spans.
pub fn extract_spans(binary: &[u8]) -> SpanSet {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &b) in binary.iter().enumerate() {
        match (b == 1, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(Span::new(s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(Span::new(s, binary.len()));
    }
    spans
}

/// Token IoU of two spans.
pub fn span_iou(a: Span, b: Span) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn mean_best_iou(from: &[Span], against: &[Span]) -> f64 {
    if from.is_empty() {
        return 0.0;
    }
    let total: f64 = from
        .iter()
        .map(|&s| against.iter().map(|&t| span_iou(s, t)).fold(0.0, f64::max))
        .sum();
    total / from.len() as f64
}

/// Span-level F1: precision is the mean best IoU of each predicted span
/// against the ground-truth spans, recall the mean best IoU of each
/// ground-truth span against the predicted ones.
pub fn iou_f1_at(binary_pred: &[u8], binary_gt: &[u8]) -> f64 {
    let pred = extract_spans(binary_pred);
    let gt = extract_spans(binary_gt);
    let precision = mean_best_iou(&pred, &gt);
    let recall = mean_best_iou(&gt, &pred);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean span IoU-F1 over the 19 percentage selections.
pub fn iou_f1_sweep(scores: &[f64], gt: &[u8]) -> Result<f64> {
    check_inputs(scores, gt)?;
    let total: f64 = PERCENTAGES
        .iter()
        .map(|&p| iou_f1_at(&top_fraction_select(scores, p), gt))
        .sum();
    Ok(total / PERCENTAGES.len() as f64)
}

/// Span IoU-F1 of the top-`k` selection, `k` the annotated token count.
pub fn discrete_iou_f1(scores: &[f64], gt: &[u8]) -> Result<f64> {
    check_inputs(scores, gt)?;
    let k = gt.iter().filter(|&&g| g == 1).count();
    Ok(iou_f1_at(&select_top_k(scores, k), gt))
}

/// The five agreement scores of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub auc_pr: f64,
    pub token_f1: f64,
    pub d_token_f1: f64,
    pub iou_f1: f64,
    pub d_iou_f1: f64,
}

impl Agreement {
    pub fn compute(scores: &[f64], gt: &[u8]) -> Result<Self> {
        Ok(Self {
            auc_pr: auc_pr(scores, gt)?,
            token_f1: token_f1_sweep(scores, gt)?,
            d_token_f1: discrete_token_f1(scores, gt)?,
            iou_f1: iou_f1_sweep(scores, gt)?,
            d_iou_f1: discrete_iou_f1(scores, gt)?,
        })
    }

    pub fn mean(&self) -> f64 {
        (self.auc_pr + self.token_f1 + self.d_token_f1 + self.iou_f1 + self.d_iou_f1) / 5.0
    }
}

/// Macro-averaged F1 over classes from binary predictions.
pub fn macro_f1(predictions: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("F1 of an empty corpus is undefined"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape("predictions and labels differ in length"));
    }
    let classes = labels[0].len();
    let mut total = 0.0;
    for c in 0..classes {
        let pred: Vec<u8> = predictions.iter().map(|p| p[c]).collect();
        let gold: Vec<u8> = labels.iter().map(|l| l[c]).collect();
        let tp = pred.iter().zip(&gold).filter(|(&p, &g)| p == 1 && g == 1).count() as f64;
        let fp = pred.iter().zip(&gold).filter(|(&p, &g)| p == 1 && g == 0).count() as f64;
        let fneg = pred.iter().zip(&gold).filter(|(&p, &g)| p == 0 && g == 1).count() as f64;
        total += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    }
    Ok(total / classes as f64)
}
