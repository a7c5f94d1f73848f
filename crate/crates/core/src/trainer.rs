//! Training loop, optimizer, and validation-driven model selection.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{self, Sample, DEFAULT_MAX_SEGMENT_LEN, DEFAULT_OVERLAP_LEN};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalOptions, MetricsReport};
use crate::model::Model;
use crate::objective::{total_objective, HyperParams, ObjectiveBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Mean of the five agreement scores plus classification F1.
    Mean5PlusClf,
    /// AUC-PR plus classification F1.
    AucprPlusClf,
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean5_plus_clf" => Ok(Self::Mean5PlusClf),
            "aucpr_plus_clf" => Ok(Self::AucprPlusClf),
            _ => Err(Error::config(format!(
                "unknown selection metric `{s}`, expected mean5_plus_clf or aucpr_plus_clf"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean5PlusClf => "mean5_plus_clf",
            Self::AucprPlusClf => "aucpr_plus_clf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
    pub selection_metric: SelectionMetric,
    /// Ramp the rationale weights linearly from 0 over the first epoch.
    pub warmup: bool,
    pub max_segment_len: usize,
    pub overlap_len: usize,
    /// Worker threads for per-sample gradients; the batch sum is ordered so
    /// results do not depend on this value.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_every: 1,
            selection_metric: SelectionMetric::Mean5PlusClf,
            warmup: true,
            max_segment_len: DEFAULT_MAX_SEGMENT_LEN,
            overlap_len: DEFAULT_OVERLAP_LEN,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.jobs == 0 {
            return Err(Error::config("batch_size, eval_every and jobs must be at least 1"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::config("weight_decay must be >= 0 and grad_clip_norm > 0"));
        }
        corpus::segment_offsets(0, self.max_segment_len, self.overlap_len).map(|_| ())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            max_segment_len: self.max_segment_len,
            overlap_len: self.overlap_len,
            faithfulness: false,
            jobs: self.jobs,
            ..EvalOptions::default()
        }
    }
}

/// Mean loss terms over one epoch's samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce_main: f64,
    pub pos_loss: f64,
    pub neg_loss: f64,
    pub sparsity: f64,
    pub smoothness: f64,
    pub total: f64,
}

impl LossTerms {
    fn add(&mut self, b: &ObjectiveBreakdown) {
        self.ce_main += b.ce_main;
        self.pos_loss += b.pos_loss.values().sum::<f64>();
        self.neg_loss += b.neg_loss.values().sum::<f64>();
        self.sparsity += b.sparsity;
        self.smoothness += b.smoothness;
        self.total += b.total;
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            ce_main: self.ce_main * f,
            pos_loss: self.pos_loss * f,
            neg_loss: self.neg_loss * f,
            sparsity: self.sparsity * f,
            smoothness: self.smoothness * f,
            total: self.total * f,
        }
    }
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` for the pre-training baseline (epoch 0).
    pub train_loss_terms: Option<LossTerms>,
    /// `None` when the epoch was not validated.
    pub val_score: Option<f64>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub best_score: f64,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<EpochRecord>,
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[Tensor], learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Row vectors (biases, norm gains) are not decayed.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.nrows() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads[i] {
                Some(g) => Zip::from(&mut *p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + decay * *p);
                }),
                None => Zip::from(&mut *p).and(&mut *m).and(&mut *v).for_each(|p, m, v| {
                    *m *= b1;
                    *v *= b2;
                    *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + decay * *p);
                }),
            }
        }
    }
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * f);
        }
    }
    norm
}

/// Validation score and report. Faithfulness is skipped when `opts` says
/// so; the selection score never uses it.
pub fn validate(
    model: &Model,
    val: &[Sample],
    metric: SelectionMetric,
    opts: &EvalOptions,
) -> Result<(f64, MetricsReport)> {
    if val.iter().all(|s| s.annotations.is_none()) {
        return Err(Error::invalid("validation corpus carries no rationale annotations"));
    }
    let report = evaluation::evaluate(model, val, opts)?;
    let score = match metric {
        SelectionMetric::Mean5PlusClf => report.agreement().mean() + report.clf_f1,
        SelectionMetric::AucprPlusClf => report.auc_pr + report.clf_f1,
    };
    Ok((score, report))
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut File) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    write(&mut f)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_checkpoint_atomic(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, |f| {
        let mut w = std::io::BufWriter::new(f);
        model.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    })
}

fn training_tokens<'a>(s: &'a Sample, tc: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<&'a [u32]> {
    if s.tokens.len() <= tc.max_segment_len {
        return Ok(&s.tokens);
    }
    let offsets = corpus::segment_offsets(s.tokens.len(), tc.max_segment_len, tc.overlap_len)?;
    let o = offsets[rng.random_range(0..offsets.len())];
    Ok(&s.tokens[o..(o + tc.max_segment_len).min(s.tokens.len())])
}

/// Trains `model` in place and leaves it holding the parameters of the
/// best-scoring validation epoch.
///
/// With `run_dir` set, starts a fresh `log.jsonl` there, appends one record
/// per epoch to it, and
/// writes `epoch-NNN.ckpt` plus a `best.ckpt` copy.
pub fn train(
    model: &mut Model,
    train_corpus: &[Sample],
    val_corpus: &[Sample],
    hp: &HyperParams,
    tc: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    tc.validate()?;
    hp.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if tc.max_segment_len > model.config().max_content_len() {
        return Err(Error::config(format!(
            "max_segment_len {} exceeds the model's {} content positions",
            tc.max_segment_len,
            model.config().max_content_len()
        )));
    }
    for s in train_corpus.iter().chain(val_corpus) {
        s.validate()?;
        if s.num_classes() != model.config().num_classes {
            return Err(Error::InvalidSample {
                sample_id: s.id.clone(),
                message: format!("{} labels for a {}-class model", s.num_classes(), model.config().num_classes),
            });
        }
    }
    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(OpenOptions::new().create(true).write(true).truncate(true).open(dir.join("log.jsonl"))?)
        }
        None => None,
    };
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(tc.jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start {} worker threads: {e}", tc.jobs)))?;
    let eval_opts = tc.eval_options();

    let mut state = TrainState {
        epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(tc.seed),
        best_score: f64::NEG_INFINITY,
        best_epoch: 0,
        best_checkpoint: None,
        history: Vec::new(),
    };
    let mut best_params = model.params().to_vec();
    let mut opt = AdamW::new(model.params(), tc.learning_rate, tc.weight_decay);
    let steps_per_epoch = train_corpus.len().div_ceil(tc.batch_size);
    let mut order: Vec<usize> = (0..train_corpus.len()).collect();

    for epoch in 0..=tc.epochs {
        state.epoch = epoch;
        let mut terms = None;
        if epoch > 0 {
            order.shuffle(&mut state.rng);
            let mut sum = LossTerms::default();
            for (step, batch) in order.chunks(tc.batch_size).enumerate() {
                let scale = if tc.warmup && epoch == 1 {
                    (step + 1) as f64 / steps_per_epoch as f64
                } else {
                    1.0
                };
                let step_hp = hp.with_rationale_scale(scale);
                let inputs: Vec<(&Sample, &[u32])> = batch
                    .iter()
                    .map(|&i| {
                        let s = &train_corpus[i];
                        Ok((s, training_tokens(s, tc, &mut state.rng)?))
                    })
                    .collect::<Result<_>>()?;
                let snapshot: &Model = model;
                let results = workers.install(|| {
                    inputs
                        .par_iter()
                        .map(|(s, tokens)| total_objective(snapshot, tokens, &s.labels, &step_hp))
                        .collect::<Vec<_>>()
                });
                let mut grads: Vec<Option<Tensor>> = vec![None; model.num_params()];
                for ((s, _), r) in inputs.iter().zip(results) {
                    let obj = r?;
                    if let Some(term) = obj.breakdown.non_finite_term() {
                        return Err(Error::NonFinite {
                            sample_id: s.id.clone(),
                            term,
                        });
                    }
                    sum.add(&obj.breakdown);
                    for (acc, g) in grads.iter_mut().zip(obj.grads) {
                        match (acc.as_mut(), g) {
                            (Some(a), Some(g)) => *a += &g,
                            (None, Some(g)) => *acc = Some(g),
                            _ => {}
                        }
                    }
                }
                let inv = 1.0 / batch.len() as f64;
                for g in grads.iter_mut().flatten() {
                    g.mapv_inplace(|x| x * inv);
                }
                if !global_norm(&grads).is_finite() {
                    return Err(Error::NonFinite {
                        sample_id: batch.iter().map(|&i| train_corpus[i].id.as_str()).collect::<Vec<_>>().join(","),
                        term: "gradient".into(),
                    });
                }
                clip_global_norm(&mut grads, tc.grad_clip_norm);
                opt.step(model.params_mut(), &grads);
            }
            terms = Some(sum.scaled(1.0 / train_corpus.len() as f64));
        }

        let evaluate_now = epoch % tc.eval_every == 0 || epoch == tc.epochs;
        let (val_score, metrics) = if evaluate_now {
            let (score, report) = validate(model, val_corpus, tc.selection_metric, &eval_opts)?;
            (Some(score), Some(report))
        } else {
            (None, None)
        };
        if let Some(dir) = run_dir {
            save_checkpoint_atomic(model, &dir.join(format!("epoch-{epoch:03}.ckpt")))?;
        }
        if let Some(score) = val_score {
            if score > state.best_score {
                state.best_score = score;
                state.best_epoch = epoch;
                best_params = model.params().to_vec();
                if let Some(dir) = run_dir {
                    let path = dir.join("best.ckpt");
                    save_checkpoint_atomic(model, &path)?;
                    state.best_checkpoint = Some(path);
                }
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss_terms: terms,
            val_score,
            metrics,
        };
        if let Some(f) = log.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        state.history.push(record);
    }

    for (p, b) in model.params_mut().iter_mut().zip(best_params) {
        *p = b;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LabelMode, ModelConfig};
    use crate::synth::{generate_synthetic, split_corpus, SynthConfig};

    fn setup(samples: usize) -> (Model, Vec<Sample>, Vec<Sample>) {
        let cfg = SynthConfig {
            vocab_size: 30,
            num_classes: 2,
            samples,
            seq_len_range: (8, 12),
            span_len_range: (2, 3),
            triggers_per_class: 4,
            seed: 5,
            ..SynthConfig::default()
        };
        let (train, val, _) = split_corpus(generate_synthetic(&cfg).unwrap(), 0.8, 0.2);
        let model = Model::new(ModelConfig {
            vocab_size: 30,
            dim: 16,
            layers: 1,
            attention_heads: 2,
            feedforward_dim: 32,
            num_classes: 2,
            max_positions: 16,
            label_mode: LabelMode::Multilabel,
            seed: 1,
        })
        .unwrap();
        (model, train, val)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 3e-3,
            max_segment_len: 14,
            overlap_len: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!("aucpr_plus_clf".parse::<SelectionMetric>().unwrap(), SelectionMetric::AucprPlusClf);
        assert!("best".parse::<SelectionMetric>().is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads = vec![Some(Tensor::from_elem((2, 3), 4.0)), None, Some(Tensor::from_elem((1, 2), -3.0))];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!(before > 1.0);
        assert!(global_norm(&grads) <= 1.0 + 1e-6);
        let mut small = vec![Some(Tensor::from_elem((1, 1), 0.5))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[[0, 0]], 0.5);
    }

    #[test]
    fn adamw_moves_against_the_gradient() {
        let mut params = vec![Tensor::from_elem((2, 2), 1.0), Tensor::from_elem((1, 2), 1.0)];
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        let grads = vec![Some(Tensor::from_elem((2, 2), 2.0)), Some(Tensor::from_elem((1, 2), -2.0))];
        opt.step(&mut params, &grads);
        assert!((params[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((params[1][[0, 0]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn deterministic_and_best_is_max() {
        let (model, train_set, val) = setup(60);
        let tc = quick(2);
        let hp = HyperParams::default();
        let mut a = model.clone();
        let mut b = model.clone();
        let sa = train(&mut a, &train_set, &val, &hp, &tc, None).unwrap();
        let sb = train(&mut b, &train_set, &val, &hp, &tc, None).unwrap();
        assert_eq!(sa.history, sb.history);
        assert_eq!(a.params(), b.params());
        let max = sa.history.iter().filter_map(|r| r.val_score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(sa.best_score, max);
        let (replay, _) = validate(&a, &val, tc.selection_metric, &tc.eval_options()).unwrap();
        assert_eq!(replay, sa.best_score);
    }

    #[test]
    fn plain_classifier_improves() {
        let (mut model, train_set, val) = setup(200);
        let hp = HyperParams {
            g2: 0.0,
            g3: 0.0,
            g4: 0.0,
            g5: 0.0,
            ..HyperParams::default()
        };
        let state = train(&mut model, &train_set, &val, &hp, &quick(4), None).unwrap();
        let f1 = |r: &EpochRecord| r.metrics.as_ref().unwrap().clf_f1;
        let start = f1(&state.history[0]);
        let end = f1(state.history.last().unwrap());
        assert!(end > start, "clf F1 {start} -> {end}");
        for r in &state.history[1..] {
            assert!(r.train_loss_terms.as_ref().unwrap().total.is_finite());
        }
    }

    #[test]
    fn run_directory_artifacts() {
        let (mut model, train_set, val) = setup(40);
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig { eval_every: 2, ..quick(3) };
        let state = train(&mut model, &train_set, &val, &HyperParams::default(), &tc, Some(dir.path())).unwrap();
        let log = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);
        let records: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert!(records[1].val_score.is_none());
        assert!(records[3].val_score.is_some());
        for e in 0..=3 {
            assert!(dir.path().join(format!("epoch-{e:03}.ckpt")).exists());
        }
        let best = Model::load_checkpoint(state.best_checkpoint.unwrap()).unwrap();
        assert_eq!(best.params(), model.params());
    }

    #[test]
    fn rejects_unannotated_validation() {
        let (mut model, train_set, mut val) = setup(30);
        for s in &mut val {
            s.annotations = None;
        }
        assert!(train(&mut model, &train_set, &val, &HyperParams::default(), &quick(1), None).is_err());
    }
}
