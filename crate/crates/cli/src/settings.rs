//! Per-command knobs. Each knob can come from a flag or from a flat TOML
//! file passed with `--config`; flags win, then the file, then the
//! library defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rtp_core::objective::HyperParams;
use rtp_core::synth::SynthConfig;
use rtp_core::{EvalOptions, LabelMode, ModelConfig, SelectionMetric, TokenId, TrainConfig};

/// Reads a flat TOML file of knobs.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Fields set in `over` replace those in `base`.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, over: &T) -> Result<T> {
    let mut merged = serde_json::to_value(base)?;
    let over = serde_json::to_value(over)?;
    if let (Some(m), Some(o)) = (merged.as_object_mut(), over.as_object()) {
        for (k, v) in o {
            if !v.is_null() {
                m.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(serde_json::from_value(merged)?)
}

pub fn resolve<T: Serialize + DeserializeOwned + Default>(flags: &T, config: Option<&PathBuf>) -> Result<T> {
    let base = match config {
        Some(path) => read_config(path)?,
        None => T::default(),
    };
    overlay(base, flags)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthKnobs {
    /// Seed for all randomness [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accepted for uniformity; generation is sequential
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Total number of samples before splitting [default: 2000]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Ordinary token ids [default: 200]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// [default: 3]
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Shortest sample [default: 20]
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Longest sample [default: 40]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Shortest planted span [default: 3]
    #[arg(long)]
    pub min_span: Option<usize>,
    /// Longest planted span [default: 5]
    #[arg(long)]
    pub max_span: Option<usize>,
    /// Spans planted per positive class [default: 1]
    #[arg(long)]
    pub spans_per_positive: Option<usize>,
    /// Probability of flipping each label [default: 0]
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Trigger tokens reserved per class [default: 8]
    #[arg(long)]
    pub triggers_per_class: Option<usize>,
    /// Probability that a class is present [default: 0.4]
    #[arg(long)]
    pub positive_rate: Option<f64>,
    /// Training share of the split [default: 0.8]
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Validation share of the split [default: 0.1]
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

impl SynthKnobs {
    pub fn synth_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            vocab_size: self.vocab_size.unwrap_or(d.vocab_size),
            num_classes: self.num_classes.unwrap_or(d.num_classes),
            samples: self.samples.unwrap_or(d.samples),
            seq_len_range: (
                self.min_len.unwrap_or(d.seq_len_range.0),
                self.max_len.unwrap_or(d.seq_len_range.1),
            ),
            span_len_range: (
                self.min_span.unwrap_or(d.span_len_range.0),
                self.max_span.unwrap_or(d.span_len_range.1),
            ),
            spans_per_positive: self.spans_per_positive.unwrap_or(d.spans_per_positive),
            noise_rate: self.noise_rate.unwrap_or(d.noise_rate),
            seed: self.seed.unwrap_or(d.seed),
            triggers_per_class: self.triggers_per_class.unwrap_or(d.triggers_per_class),
            positive_rate: self.positive_rate.unwrap_or(d.positive_rate),
        }
    }

    pub fn fractions(&self) -> (f64, f64) {
        (self.train_fraction.unwrap_or(0.8), self.val_fraction.unwrap_or(0.1))
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainKnobs {
    /// Seed for model initialisation and data order [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample gradients [default: 1]
    #[arg(long)]
    pub jobs: Option<usize>,

    // Model shape.
    /// Ordinary token ids; corpus tokens must lie below it [default: 200]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub dim: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub layers: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub attention_heads: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    pub feedforward_dim: Option<usize>,
    /// Positions including the two special tokens [default: 512]
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// exclusive or multilabel [default: multilabel]
    #[arg(long)]
    pub label_mode: Option<LabelMode>,

    // Objective.
    /// Drop-input probability margin [default: 0.2]
    #[arg(long)]
    pub alpha_margin: Option<f64>,
    /// Squared-mean sparsity, ground-truth classes [default: 0.2]
    #[arg(long)]
    pub alpha1: Option<f64>,
    /// Linear-mean sparsity, ground-truth classes [default: 0.001]
    #[arg(long)]
    pub alpha2: Option<f64>,
    /// Squared-mean sparsity, other classes [default: 0.05]
    #[arg(long)]
    pub alpha3: Option<f64>,
    /// Linear-mean sparsity, other classes [default: 0.001]
    #[arg(long)]
    pub alpha4: Option<f64>,
    /// Width regularizer strength [default: 0.02]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Width regularizer target [default: 3]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Clean classification weight [default: 2]
    #[arg(long)]
    pub gamma1: Option<f64>,
    /// Keep-input weight [default: 5]
    #[arg(long)]
    pub gamma2: Option<f64>,
    /// Drop-input weight [default: 5]
    #[arg(long)]
    pub gamma3: Option<f64>,
    /// Sparsity weight [default: 3]
    #[arg(long)]
    pub gamma4: Option<f64>,
    /// Smoothness weight [default: 3]
    #[arg(long)]
    pub gamma5: Option<f64>,

    // Schedule.
    /// [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.0003]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    /// Validate every N epochs [default: 1]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// mean5_plus_clf or aucpr_plus_clf [default: mean5_plus_clf]
    #[arg(long)]
    pub selection_metric: Option<SelectionMetric>,
    /// Ramp rationale weights over the first epoch [default: true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub warmup: Option<bool>,

    /// Longest window fed to the model [default: 510, capped by max_positions - 2]
    #[arg(long)]
    pub max_segment_len: Option<usize>,
    /// Tokens shared by consecutive windows [default: 100, capped at half the window]
    #[arg(long)]
    pub overlap_len: Option<usize>,
}

impl TrainKnobs {
    pub fn hyper_params(&self) -> HyperParams {
        let d = HyperParams::default();
        HyperParams {
            alpha_margin: self.alpha_margin.unwrap_or(d.alpha_margin),
            a1: self.alpha1.unwrap_or(d.a1),
            a2: self.alpha2.unwrap_or(d.a2),
            a3: self.alpha3.unwrap_or(d.a3),
            a4: self.alpha4.unwrap_or(d.a4),
            b1: self.beta1.unwrap_or(d.b1),
            b2: self.beta2.unwrap_or(d.b2),
            g1: self.gamma1.unwrap_or(d.g1),
            g2: self.gamma2.unwrap_or(d.g2),
            g3: self.gamma3.unwrap_or(d.g3),
            g4: self.gamma4.unwrap_or(d.g4),
            g5: self.gamma5.unwrap_or(d.g5),
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let d = ModelConfig::default();
        ModelConfig {
            vocab_size: self.vocab_size.unwrap_or(d.vocab_size),
            dim: self.dim.unwrap_or(d.dim),
            layers: self.layers.unwrap_or(d.layers),
            attention_heads: self.attention_heads.unwrap_or(d.attention_heads),
            feedforward_dim: self.feedforward_dim.unwrap_or(d.feedforward_dim),
            num_classes,
            max_positions: self.max_positions.unwrap_or(d.max_positions),
            label_mode: self.label_mode.unwrap_or(d.label_mode),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    pub fn train_config(&self, model: &ModelConfig) -> TrainConfig {
        let d = TrainConfig::default();
        let (max_segment_len, overlap_len) = resolve_segments(self.max_segment_len, self.overlap_len, model);
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            grad_clip_norm: self.grad_clip_norm.unwrap_or(d.grad_clip_norm),
            seed: self.seed.unwrap_or(d.seed),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            selection_metric: self.selection_metric.unwrap_or(d.selection_metric),
            warmup: self.warmup.unwrap_or(d.warmup),
            max_segment_len,
            overlap_len,
            jobs: self.jobs.unwrap_or(d.jobs),
        }
    }
}

fn resolve_segments(max_segment_len: Option<usize>, overlap_len: Option<usize>, model: &ModelConfig) -> (usize, usize) {
    let d = EvalOptions::default();
    let len = max_segment_len.unwrap_or(d.max_segment_len.min(model.max_content_len()));
    (len, overlap_len.unwrap_or(d.overlap_len.min(len / 2)))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalKnobs {
    /// Worker threads [default: 1]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Skip sufficiency and comprehensiveness (reported as 0)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_faithfulness: Option<bool>,
    /// Token ids whose scores are zeroed, comma separated
    #[arg(long, value_delimiter = ',')]
    pub punctuation_ids: Option<Vec<TokenId>>,
    /// Longest window fed to the model [default: 510, capped by max_positions - 2]
    #[arg(long)]
    pub max_segment_len: Option<usize>,
    /// Tokens shared by consecutive windows [default: 100, capped at half the window]
    #[arg(long)]
    pub overlap_len: Option<usize>,
}

impl EvalKnobs {
    pub fn options(&self, model: &ModelConfig) -> EvalOptions {
        let (max_segment_len, overlap_len) = resolve_segments(self.max_segment_len, self.overlap_len, model);
        EvalOptions {
            max_segment_len,
            overlap_len,
            punctuation_ids: self.punctuation_ids.clone().unwrap_or_default(),
            faithfulness: !self.no_faithfulness.unwrap_or(false),
            jobs: self.jobs.unwrap_or(1),
        }
    }
}
