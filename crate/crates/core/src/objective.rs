//! Training objective: classification loss on the clean input, keep/drop
//! losses on mask-blended inputs, and mask sparsity and smoothness
//! regularizers, combined with per-term weights.
//!
//! The blended inputs are scored with the scorer's parameters bound as graph
//! constants, so the keep/drop losses reach the parameters only through the
//! mask produced by the first (clean) pass.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::mask::RationaleMask;
use crate::model::{LabelMode, Model};

/// Loss weights and regularizer coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Probability below which the drop-input loss is inactive.
    pub alpha_margin: f64,
    /// Squared-mean sparsity coefficient for ground-truth classes.
    pub a1: f64,
    /// Linear-mean sparsity coefficient for ground-truth classes.
    pub a2: f64,
    /// Squared-mean sparsity coefficient for other classes.
    pub a3: f64,
    /// Linear-mean sparsity coefficient for other classes.
    pub a4: f64,
    /// Width regularizer strength.
    pub b1: f64,
    /// Width regularizer target.
    pub b2: f64,
    /// Clean-input classification weight.
    pub g1: f64,
    /// Keep-input loss weight.
    pub g2: f64,
    /// Drop-input loss weight.
    pub g3: f64,
    /// Sparsity weight.
    pub g4: f64,
    /// Smoothness weight.
    pub g5: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha_margin: 0.2,
            a1: 0.2,
            a2: 0.001,
            a3: 0.05,
            a4: 0.001,
            b1: 0.02,
            b2: 3.0,
            g1: 2.0,
            g2: 5.0,
            g3: 5.0,
            g4: 3.0,
            g5: 3.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a1, self.a2, self.a3, self.a4, self.b1, self.b2, self.g1, self.g2, self.g3, self.g4,
            self.g5,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("hyperparameters must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.alpha_margin) {
            return Err(Error::config("alpha_margin must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Copy with the rationale weights `g2..g5` multiplied by `factor`.
    pub fn with_rationale_scale(&self, factor: f64) -> Self {
        Self {
            g2: self.g2 * factor,
            g3: self.g3 * factor,
            g4: self.g4 * factor,
            g5: self.g5 * factor,
            ..self.clone()
        }
    }
}

/// Every additive term of the objective for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub ce_main: f64,
    /// Keep-input loss per ground-truth class.
    pub pos_loss: BTreeMap<usize, f64>,
    /// Drop-input loss per ground-truth class.
    pub neg_loss: BTreeMap<usize, f64>,
    pub sparsity: f64,
    pub smoothness: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    /// Weighted sum of the terms under `hp`.
    pub fn recombine(&self, hp: &HyperParams) -> f64 {
        let rationale: f64 = self
            .pos_loss
            .iter()
            .map(|(c, pos)| hp.g2 * pos + hp.g3 * self.neg_loss[c])
            .sum();
        hp.g1 * self.ce_main + rationale + hp.g4 * self.sparsity + hp.g5 * self.smoothness
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<String> {
        if !self.ce_main.is_finite() {
            return Some("ce_main".into());
        }
        for (c, v) in &self.pos_loss {
            if !v.is_finite() {
                return Some(format!("pos_loss[{c}]"));
            }
        }
        for (c, v) in &self.neg_loss {
            if !v.is_finite() {
                return Some(format!("neg_loss[{c}]"));
            }
        }
        if !self.sparsity.is_finite() {
            return Some("sparsity".into());
        }
        if !self.smoothness.is_finite() {
            return Some("smoothness".into());
        }
        (!self.total.is_finite()).then(|| "total".into())
    }
}

/// Objective value plus gradients per model parameter slot.
#[derive(Debug, Clone)]
pub struct Objective {
    pub breakdown: ObjectiveBreakdown,
    pub grads: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ObjectiveOptions {
    /// Cut the mask out of the graph before blending (diagnostic switch).
    pub sever_mask: bool,
}

fn ln_clamped(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

fn single_positive(labels: &[u8]) -> Result<usize> {
    let mut positives = labels.iter().enumerate().filter(|(_, &l)| l == 1);
    match (positives.next(), positives.next()) {
        (Some((c, _)), None) => Ok(c),
        _ => Err(Error::invalid(format!(
            "exclusive mode needs exactly one positive label, got {labels:?}"
        ))),
    }
}

fn check_len(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Cross-entropy (exclusive) or summed binary cross-entropy (multilabel).
pub fn classification_loss(probs: &[f64], labels: &[u8], mode: LabelMode) -> Result<f64> {
    check_len(probs, labels)?;
    match mode {
        LabelMode::Exclusive => Ok(-ln_clamped(probs[single_positive(labels)?])),
        LabelMode::Multilabel => Ok(probs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| if y == 1 { -ln_clamped(p) } else { -ln_clamped(1.0 - p) })
            .sum()),
    }
}

/// Loss on the keep input for ground-truth class `c`.
pub fn rationale_pos_loss(probs_on_keep: &[f64], labels: &[u8], c: usize, mode: LabelMode) -> Result<f64> {
    check_len(probs_on_keep, labels)?;
    if labels.get(c) != Some(&1) {
        return Err(Error::invalid(format!("class {c} is not a ground-truth class")));
    }
    match mode {
        LabelMode::Exclusive => classification_loss(probs_on_keep, labels, mode),
        LabelMode::Multilabel => Ok(-ln_clamped(probs_on_keep[c])),
    }
}

/// Hinge on the drop-input probability of the target class.
pub fn rationale_neg_loss(prob_c_on_drop: f64, alpha_margin: f64) -> f64 {
    (prob_c_on_drop - alpha_margin).max(0.0)
}

/// Quadratic plus linear penalty on each class's mean mask value, with
/// separate coefficients for ground-truth and other classes.
pub fn sparsity_regularizer(masks: &RationaleMask, labels: &[u8], hp: &HyperParams) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    masks
        .m
        .rows()
        .into_iter()
        .enumerate()
        .map(|(c, row)| {
            let mean = row.mean().unwrap_or(0.0);
            let (quad, lin) = sparsity_coefficients(labels, c, hp);
            quad * mean * mean + lin * mean
        })
        .sum()
}

fn sparsity_coefficients(labels: &[u8], c: usize, hp: &HyperParams) -> (f64, f64) {
    if labels.get(c) == Some(&1) {
        (hp.a1, hp.a2)
    } else {
        (hp.a3, hp.a4)
    }
}

/// `b1 * sum_c mean_j (sigma[c][j] - b2)^2` over `[classes x tokens]` widths.
pub fn smoothness_regularizer(sigmas: &Array2<f64>, hp: &HyperParams) -> f64 {
    if sigmas.ncols() == 0 {
        return 0.0;
    }
    hp.b1
        * sigmas
            .rows()
            .into_iter()
            .map(|row| row.mapv(|s| (s - hp.b2).powi(2)).mean().unwrap_or(0.0))
            .sum::<f64>()
}

/// Classification loss on `1 x C` logits.
fn classification_loss_on(g: &mut Graph, logits: Var, labels: &[u8], mode: LabelMode) -> Result<Var> {
    match mode {
        LabelMode::Exclusive => {
            let y = single_positive(labels)?;
            let logp = g.log_softmax_rows(logits);
            let picked = g.pick(logp, 0, y);
            Ok(g.scale(picked, -1.0))
        }
        LabelMode::Multilabel => {
            // BCE(z, t) = softplus(z) - t * z
            let sp = g.softplus(logits);
            let sp = g.sum(sp);
            let targets = Array2::from_shape_fn((1, labels.len()), |(_, c)| f64::from(labels[c]));
            let t = g.constant(targets);
            let tz = g.mul(t, logits);
            let tz = g.sum(tz);
            Ok(g.sub(sp, tz))
        }
    }
}

fn pos_loss_on(g: &mut Graph, logits: Var, labels: &[u8], c: usize, mode: LabelMode) -> Result<Var> {
    match mode {
        LabelMode::Exclusive => classification_loss_on(g, logits, labels, mode),
        LabelMode::Multilabel => {
            let z = g.pick(logits, 0, c);
            let neg = g.scale(z, -1.0);
            Ok(g.softplus(neg))
        }
    }
}

/// Objective for one sample, the model scoring its own blended inputs.
pub fn total_objective(model: &Model, tokens: &[TokenId], labels: &[u8], hp: &HyperParams) -> Result<Objective> {
    total_objective_with(model, model, tokens, labels, hp, ObjectiveOptions::default())
}

/// Objective for one sample where `scorer` supplies the frozen parameters
/// used on the blended inputs (the clean embeddings and the background are
/// taken from it as well). Gradients are returned for `model` only.
pub fn total_objective_with(
    model: &Model,
    scorer: &Model,
    tokens: &[TokenId],
    labels: &[u8],
    hp: &HyperParams,
    opts: ObjectiveOptions,
) -> Result<Objective> {
    let cfg = model.config();
    if labels.len() != cfg.num_classes {
        return Err(Error::shape(format!(
            "{} labels for a {}-class model",
            labels.len(),
            cfg.num_classes
        )));
    }
    let gt: Vec<usize> = (0..labels.len()).filter(|&c| labels[c] == 1).collect();
    if gt.is_empty() {
        return Err(Error::invalid("sample has no ground-truth class"));
    }
    let mode = cfg.label_mode;
    let mut g = Graph::new();

    // First pass: clean input, trainable parameters.
    let p = model.bind(&mut g, true);
    let x = model.embed_on(&mut g, &p, tokens)?;
    let hidden = model.encode_on(&mut g, &p, x)?;
    let logits = model.class_logits_on(&mut g, &p, hidden);
    let ce = classification_loss_on(&mut g, logits, labels, mode)?;
    let rationale = model.rationale_on(&mut g, &p, hidden);
    let content_len = tokens.len();

    // Regularizers over content tokens.
    let (sparsity, smoothness) = if content_len == 0 {
        (g.scalar_constant(0.0), g.scalar_constant(0.0))
    } else {
        let means = g.row_means(rationale.mask);
        let (quad, lin): (Vec<f64>, Vec<f64>) = (0..cfg.num_classes)
            .map(|c| sparsity_coefficients(labels, c, hp))
            .unzip();
        let quad = g.constant(Array2::from_shape_vec((cfg.num_classes, 1), quad).expect("shape"));
        let lin = g.constant(Array2::from_shape_vec((cfg.num_classes, 1), lin).expect("shape"));
        let sq = g.mul(means, means);
        let sq = g.mul(quad, sq);
        let li = g.mul(lin, means);
        let both = g.add(sq, li);
        let sparsity = g.sum(both);

        let dev = g.add_scalar(rationale.sigma, -hp.b2);
        let dev2 = g.mul(dev, dev);
        let per_class = g.row_means(dev2);
        let total = g.sum(per_class);
        (sparsity, g.scale(total, hp.b1))
    };

    // Second passes: blended inputs scored with frozen parameters.
    let q = scorer.bind(&mut g, false);
    let clean = scorer.embed(tokens)?;
    let x_const = g.constant(clean.x);
    let background = g.constant(scorer.background().insert_axis(ndarray::Axis(0)));
    let edge = g.constant(Array2::ones((1, 1)));
    let mut pos_terms = Vec::with_capacity(gt.len());
    let mut neg_terms = Vec::with_capacity(gt.len());
    for &c in &gt {
        let row = g.slice_rows(rationale.mask, c, c + 1);
        let row = if opts.sever_mask { g.detach(row) } else { row };
        let m = g.concat_cols(&[edge, row, edge]);

        let keep_in = g.blend(x_const, m, background, &clean.keep, false);
        let h_keep = scorer.encode_on(&mut g, &q, keep_in)?;
        let z_keep = scorer.class_logits_on(&mut g, &q, h_keep);
        pos_terms.push((c, pos_loss_on(&mut g, z_keep, labels, c, mode)?));

        let drop_in = g.blend(x_const, m, background, &clean.keep, true);
        let h_drop = scorer.encode_on(&mut g, &q, drop_in)?;
        let z_drop = scorer.class_logits_on(&mut g, &q, h_drop);
        let probs = scorer.probs_on(&mut g, z_drop);
        let pc = g.pick(probs, 0, c);
        let shifted = g.add_scalar(pc, -hp.alpha_margin);
        neg_terms.push((c, g.relu(shifted)));
    }

    // Zero-weighted terms stay out of the loss graph entirely.
    let mut weighted = Vec::new();
    let mut push = |g: &mut Graph, w: f64, v: Var| {
        if w != 0.0 {
            weighted.push(g.scale(v, w));
        }
    };
    push(&mut g, hp.g1, ce);
    for (&(_, pos), &(_, neg)) in pos_terms.iter().zip(&neg_terms) {
        push(&mut g, hp.g2, pos);
        push(&mut g, hp.g3, neg);
    }
    push(&mut g, hp.g4, sparsity);
    push(&mut g, hp.g5, smoothness);
    let total = if weighted.is_empty() {
        g.scalar_constant(0.0)
    } else {
        g.add_all(&weighted)
    };

    let grads = g.backward(total).param_grads(model.num_params());
    let breakdown = ObjectiveBreakdown {
        ce_main: g.scalar(ce),
        pos_loss: pos_terms.iter().map(|&(c, v)| (c, g.scalar(v))).collect(),
        neg_loss: neg_terms.iter().map(|&(c, v)| (c, g.scalar(v))).collect(),
        sparsity: g.scalar(sparsity),
        smoothness: g.scalar(smoothness),
        total: g.scalar(total),
    };
    Ok(Objective { breakdown, grads })
}
