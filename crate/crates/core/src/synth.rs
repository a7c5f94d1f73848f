//! Planted-span corpus generator.
//!
//! Class `c` owns the trigger ids `[c * triggers_per_class, (c + 1) *
//! triggers_per_class)`; every other id is filler. A sample is positive for
//! a class exactly when a span of that class's triggers is planted in it, and
//! the planted spans are recorded as its annotations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, Span, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub samples: usize,
    /// Inclusive `(min, max)` sequence length.
    pub seq_len_range: (usize, usize),
    /// Inclusive `(min, max)` planted span length.
    pub span_len_range: (usize, usize),
    pub spans_per_positive: usize,
    /// Probability that a filler position is overwritten by a stray trigger.
    pub noise_rate: f64,
    pub seed: u64,
    pub triggers_per_class: usize,
    /// Independent per-class probability of a positive label.
    pub positive_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            num_classes: 3,
            samples: 2000,
            seq_len_range: (20, 40),
            span_len_range: (3, 5),
            spans_per_positive: 1,
            noise_rate: 0.0,
            seed: 1,
            triggers_per_class: 8,
            positive_rate: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.seq_len_range;
        let (slo, shi) = self.span_len_range;
        if self.samples == 0 {
            return Err(Error::config("samples must be at least 1"));
        }
        if self.num_classes == 0 || self.triggers_per_class == 0 || self.spans_per_positive == 0 {
            return Err(Error::config(
                "num_classes, triggers_per_class and spans_per_positive must be positive",
            ));
        }
        if lo > hi || slo > shi || slo == 0 {
            return Err(Error::config("length ranges must be non-empty with min <= max"));
        }
        if self.num_classes * self.triggers_per_class >= self.vocab_size {
            return Err(Error::config(format!(
                "vocab_size {} leaves no filler tokens after {} trigger ids",
                self.vocab_size,
                self.num_classes * self.triggers_per_class
            )));
        }
        let worst = self.num_classes * self.spans_per_positive * shi;
        if worst > lo {
            return Err(Error::config(format!(
                "planted spans may need {worst} tokens but sequences can be as short as {lo}"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(Error::config("noise_rate and positive_rate must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn trigger_ids(&self, class: usize) -> std::ops::Range<TokenId> {
        let k = self.triggers_per_class as TokenId;
        class as TokenId * k..(class as TokenId + 1) * k
    }

    /// Class owning `token`, if it is a trigger.
    pub fn trigger_class(&self, token: TokenId) -> Option<usize> {
        let c = token as usize / self.triggers_per_class;
        (c < self.num_classes).then_some(c)
    }

    fn filler_start(&self) -> TokenId {
        (self.num_classes * self.triggers_per_class) as TokenId
    }
}

enum Piece {
    Filler,
    Span(usize, usize),
}

/// Deterministic planted-span corpus for `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let filler = cfg.filler_start()..cfg.vocab_size as TokenId;
    let mut out = Vec::with_capacity(cfg.samples);
    for idx in 0..cfg.samples {
        let len = rng.random_range(cfg.seq_len_range.0..=cfg.seq_len_range.1);
        let mut labels: Vec<u8> = (0..cfg.num_classes)
            .map(|_| u8::from(rng.random_bool(cfg.positive_rate)))
            .collect();
        if labels.iter().all(|&l| l == 0) {
            labels[rng.random_range(0..cfg.num_classes)] = 1;
        }

        let mut pieces = Vec::new();
        let mut planted = 0;
        for (c, _) in labels.iter().enumerate().filter(|(_, &l)| l == 1) {
            for _ in 0..cfg.spans_per_positive {
                let span_len = rng.random_range(cfg.span_len_range.0..=cfg.span_len_range.1);
                planted += span_len;
                pieces.push(Piece::Span(c, span_len));
            }
        }
        pieces.extend((planted..len).map(|_| Piece::Filler));
        pieces.shuffle(&mut rng);

        let mut tokens = Vec::with_capacity(len);
        let mut annotations: BTreeMap<usize, Vec<Span>> = BTreeMap::new();
        for piece in pieces {
            match piece {
                Piece::Filler => {
                    let tok = if cfg.noise_rate > 0.0 && rng.random_bool(cfg.noise_rate) {
                        rng.random_range(0..cfg.filler_start())
                    } else {
                        rng.random_range(filler.clone())
                    };
                    tokens.push(tok);
                }
                Piece::Span(c, span_len) => {
                    let start = tokens.len();
                    let ids = cfg.trigger_ids(c);
                    tokens.extend((0..span_len).map(|_| rng.random_range(ids.clone())));
                    annotations
                        .entry(c)
                        .or_default()
                        .push(Span::new(start, start + span_len));
                }
            }
        }
        let sample = Sample {
            id: format!("synth-{}-{idx:05}", cfg.seed),
            tokens,
            labels,
            annotations: Some(annotations),
        };
        debug_assert!(sample.validate().is_ok());
        out.push(sample);
    }
    Ok(out)
}

/// Splits a corpus in order into train/val/test parts by the given fractions
/// of train and val; the test part takes the remainder.
pub fn split_corpus(samples: Vec<Sample>, train: f64, val: f64) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let n_train = ((n as f64) * train).round() as usize;
    let n_val = (((n as f64) * val).round() as usize).min(n - n_train.min(n));
    let mut rest = samples;
    let test = rest.split_off((n_train + n_val).min(n));
    let val = rest.split_off(n_train.min(rest.len()));
    (rest, val, test)
}
