//! Model-level evaluation: document scoring over segments, faithfulness,
//! classification F1, and the corpus report.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Sample, TokenId, DEFAULT_MAX_SEGMENT_LEN, DEFAULT_OVERLAP_LEN};
use crate::error::{Error, Result};
use crate::metrics::{self, Agreement, PERCENTAGES};
use crate::model::{LabelMode, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_segment_len: usize,
    pub overlap_len: usize,
    /// Tokens whose scores are zeroed before the metrics run.
    pub punctuation_ids: Vec<TokenId>,
    /// Compute sufficiency and comprehensiveness (39 extra forward passes
    /// per pair). When off both are reported as 0.
    pub faithfulness: bool,
    /// Worker threads; results are reduced in corpus order.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_segment_len: DEFAULT_MAX_SEGMENT_LEN,
            overlap_len: DEFAULT_OVERLAP_LEN,
            punctuation_ids: Vec::new(),
            faithfulness: true,
            jobs: 1,
        }
    }
}

impl EvalOptions {
    /// Options whose segment length fits `model`.
    pub fn for_model(model: &Model) -> Self {
        let max_segment_len = DEFAULT_MAX_SEGMENT_LEN.min(model.config().max_content_len());
        Self {
            max_segment_len,
            overlap_len: DEFAULT_OVERLAP_LEN.min(max_segment_len / 2),
            ..Self::default()
        }
    }

    fn check(&self, model: &Model) -> Result<()> {
        if self.max_segment_len > model.config().max_content_len() {
            return Err(Error::config(format!(
                "max_segment_len {} exceeds the model's {} content positions",
                self.max_segment_len,
                model.config().max_content_len()
            )));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        corpus::segment_offsets(0, self.max_segment_len, self.overlap_len).map(|_| ())
    }
}

/// Model outputs for a whole document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentPrediction {
    /// Mean of the per-segment class probabilities.
    pub class_probs: Vec<f64>,
    /// One blended score vector per class.
    pub scores: Vec<Vec<f64>>,
}

fn segments<'a>(tokens: &'a [TokenId], opts: &EvalOptions) -> Result<Vec<(usize, &'a [TokenId])>> {
    let offsets = corpus::segment_offsets(tokens.len(), opts.max_segment_len, opts.overlap_len)?;
    Ok(offsets
        .into_iter()
        .map(|o| (o, &tokens[o..(o + opts.max_segment_len).min(tokens.len())]))
        .collect())
}

/// Class probabilities of a document, averaged over its segments.
pub fn document_probs(model: &Model, tokens: &[TokenId], opts: &EvalOptions) -> Result<Vec<f64>> {
    let segs = segments(tokens, opts)?;
    let mut total = vec![0.0; model.config().num_classes];
    for (_, seg) in &segs {
        for (t, p) in total.iter_mut().zip(model.classify(seg)?) {
            *t += p;
        }
    }
    Ok(total.into_iter().map(|t| t / segs.len() as f64).collect())
}

/// Class probabilities and per-class mask scores of a document.
pub fn predict_document(model: &Model, tokens: &[TokenId], opts: &EvalOptions) -> Result<DocumentPrediction> {
    let classes = model.config().num_classes;
    let segs = segments(tokens, opts)?;
    let mut probs = vec![0.0; classes];
    let mut per_class: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::with_capacity(segs.len()); classes];
    for (offset, seg) in &segs {
        let out = model.predict(seg)?;
        for (t, p) in probs.iter_mut().zip(&out.class_probs) {
            *t += p;
        }
        for (c, parts) in per_class.iter_mut().enumerate() {
            parts.push((*offset, out.mask.class(c).to_vec()));
        }
    }
    let scores = per_class
        .into_iter()
        .map(|parts| {
            let blended = if parts.len() == 1 {
                parts.into_iter().next().expect("one segment").1
            } else {
                corpus::blend_segment_scores(&parts, tokens.len(), opts.overlap_len)?
            };
            Ok(corpus::zero_sentence_final_scores(tokens, &blended, &opts.punctuation_ids))
        })
        .collect::<Result<_>>()?;
    Ok(DocumentPrediction {
        class_probs: probs.into_iter().map(|p| p / segs.len() as f64).collect(),
        scores,
    })
}

fn check_faithfulness_inputs(sample: &Sample, scores: &[f64], class_index: usize) -> Result<()> {
    if scores.len() != sample.tokens.len() {
        return Err(Error::shape(format!(
            "sample {}: {} scores for {} tokens",
            sample.id,
            scores.len(),
            sample.tokens.len()
        )));
    }
    if sample.labels.get(class_index) != Some(&1) {
        return Err(Error::invalid(format!(
            "class {class_index} is not a ground-truth class of sample {}",
            sample.id
        )));
    }
    Ok(())
}

/// Mean over the 19 selections of `M(x)[c] - M(r)[c]`, where `r` keeps the
/// selected tokens and replaces the rest with the padding id.
pub fn sufficiency(model: &Model, sample: &Sample, scores: &[f64], class_index: usize, opts: &EvalOptions) -> Result<f64> {
    faithfulness(model, sample, scores, class_index, opts, true)
}

/// Mean over the 19 selections of `M(x)[c] - M(x \ r)[c]`, where the
/// selected tokens are replaced with the padding id.
pub fn comprehensiveness(
    model: &Model,
    sample: &Sample,
    scores: &[f64],
    class_index: usize,
    opts: &EvalOptions,
) -> Result<f64> {
    faithfulness(model, sample, scores, class_index, opts, false)
}

fn faithfulness(
    model: &Model,
    sample: &Sample,
    scores: &[f64],
    class_index: usize,
    opts: &EvalOptions,
    keep_selected: bool,
) -> Result<f64> {
    check_faithfulness_inputs(sample, scores, class_index)?;
    let pad = model.config().pad_id();
    let full = document_probs(model, &sample.tokens, opts)?[class_index];
    let mut total = 0.0;
    for p in PERCENTAGES {
        let selected = metrics::top_fraction_select(scores, p);
        let reduced: Vec<TokenId> = sample
            .tokens
            .iter()
            .zip(&selected)
            .map(|(&t, &s)| if (s == 1) == keep_selected { t } else { pad })
            .collect();
        total += full - document_probs(model, &reduced, opts)?[class_index];
    }
    Ok(total / PERCENTAGES.len() as f64)
}

/// Binary class decisions from probabilities.
pub fn decide(probs: &[f64], mode: LabelMode) -> Vec<u8> {
    match mode {
        LabelMode::Multilabel => probs.iter().map(|&p| u8::from(p >= 0.5)).collect(),
        LabelMode::Exclusive => {
            let best = probs
                .iter()
                .enumerate()
                .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
            (0..probs.len()).map(|i| u8::from(i == best)).collect()
        }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} worker threads: {e}")))
}

/// Macro-F1 of the model's decisions over `corpus`.
pub fn classification_f1(model: &Model, corpus: &[Sample], opts: &EvalOptions) -> Result<f64> {
    opts.check(model)?;
    let preds = pool(opts.jobs)?.install(|| {
        corpus
            .par_iter()
            .map(|s| Ok(decide(&document_probs(model, &s.tokens, opts)?, model.config().label_mode)))
            .collect::<Result<Vec<_>>>()
    })?;
    let labels: Vec<Vec<u8>> = corpus.iter().map(|s| s.labels.clone()).collect();
    metrics::macro_f1(&preds, &labels)
}

/// Metrics of one annotated (sample, class) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub sample_id: String,
    pub class_index: usize,
    pub auc_pr: f64,
    pub token_f1: f64,
    pub d_token_f1: f64,
    pub iou_f1: f64,
    pub d_iou_f1: f64,
    pub sufficiency: f64,
    pub comprehensiveness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clf_f1: f64,
    pub auc_pr: f64,
    pub token_f1: f64,
    pub d_token_f1: f64,
    pub iou_f1: f64,
    pub d_iou_f1: f64,
    pub sufficiency: f64,
    pub comprehensiveness: f64,
    pub perf: f64,
    pub per_pair: Vec<PairMetrics>,
}

impl MetricsReport {
    pub fn agreement(&self) -> Agreement {
        Agreement {
            auc_pr: self.auc_pr,
            token_f1: self.token_f1,
            d_token_f1: self.d_token_f1,
            iou_f1: self.iou_f1,
            d_iou_f1: self.d_iou_f1,
        }
    }

    /// The nine summary fields in display order.
    pub fn summary(&self) -> [(&'static str, f64); 9] {
        [
            ("clf_f1", self.clf_f1),
            ("auc_pr", self.auc_pr),
            ("token_f1", self.token_f1),
            ("d_token_f1", self.d_token_f1),
            ("iou_f1", self.iou_f1),
            ("d_iou_f1", self.d_iou_f1),
            ("sufficiency", self.sufficiency),
            ("comprehensiveness", self.comprehensiveness),
            ("perf", self.perf),
        ]
    }

    pub fn write_json(&self, out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    fn assemble(clf_f1: f64, per_pair: Vec<PairMetrics>) -> Result<Self> {
        if per_pair.is_empty() {
            return Err(Error::invalid("corpus has no annotated ground-truth classes"));
        }
        let n = per_pair.len() as f64;
        let mean = |f: fn(&PairMetrics) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
        let token_f1 = mean(|p| p.token_f1);
        let iou_f1 = mean(|p| p.iou_f1);
        let sufficiency = mean(|p| p.sufficiency);
        let comprehensiveness = mean(|p| p.comprehensiveness);
        Ok(Self {
            clf_f1,
            auc_pr: mean(|p| p.auc_pr),
            token_f1,
            d_token_f1: mean(|p| p.d_token_f1),
            iou_f1,
            d_iou_f1: mean(|p| p.d_iou_f1),
            sufficiency,
            comprehensiveness,
            perf: token_f1 + iou_f1 + comprehensiveness - sufficiency,
            per_pair,
        })
    }
}

/// Scores for one (sample, class) pair in the line-delimited exchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub class_index: usize,
    pub scores: Vec<f64>,
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_scores(records: &[ScoreRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Annotated pairs of a corpus: `(sample index, class, ground truth)`.
fn annotated_pairs(corpus: &[Sample]) -> Vec<(usize, usize, Vec<u8>)> {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.positive_classes()
                .filter(|&c| s.spans(c).is_some_and(|sp| !sp.is_empty()))
                .map(move |c| (i, c, s.ground_truth(c)))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn pair_metrics(
    model: &Model,
    sample: &Sample,
    class_index: usize,
    gt: &[u8],
    scores: &[f64],
    opts: &EvalOptions,
) -> Result<PairMetrics> {
    let a = Agreement::compute(scores, gt).map_err(|e| Error::InvalidSample {
        sample_id: sample.id.clone(),
        message: format!("class {class_index}: {e}"),
    })?;
    let (sufficiency, comprehensiveness) = if opts.faithfulness {
        (
            sufficiency(model, sample, scores, class_index, opts)?,
            comprehensiveness(model, sample, scores, class_index, opts)?,
        )
    } else {
        (0.0, 0.0)
    };
    Ok(PairMetrics {
        sample_id: sample.id.clone(),
        class_index,
        auc_pr: a.auc_pr,
        token_f1: a.token_f1,
        d_token_f1: a.d_token_f1,
        iou_f1: a.iou_f1,
        d_iou_f1: a.d_iou_f1,
        sufficiency,
        comprehensiveness,
    })
}

/// Scores every annotated ground-truth pair with the model's own masks.
pub fn evaluate(model: &Model, corpus: &[Sample], opts: &EvalOptions) -> Result<MetricsReport> {
    opts.check(model)?;
    let pairs = annotated_pairs(corpus);
    let workers = pool(opts.jobs)?;
    let per_sample = workers.install(|| {
        corpus
            .par_iter()
            .map(|s| predict_document(model, &s.tokens, opts))
            .collect::<Result<Vec<_>>>()
    })?;
    let per_pair = workers.install(|| {
        pairs
            .par_iter()
            .map(|(i, c, gt)| pair_metrics(model, &corpus[*i], *c, gt, &per_sample[*i].scores[*c], opts))
            .collect::<Result<Vec<_>>>()
    })?;
    let preds: Vec<Vec<u8>> = per_sample
        .iter()
        .map(|d| decide(&d.class_probs, model.config().label_mode))
        .collect();
    let labels: Vec<Vec<u8>> = corpus.iter().map(|s| s.labels.clone()).collect();
    MetricsReport::assemble(metrics::macro_f1(&preds, &labels)?, per_pair)
}

/// Like [`evaluate`] but with externally produced scores, one record per
/// annotated pair. The model still provides classification F1 and the
/// faithfulness probabilities.
pub fn evaluate_scores(
    model: &Model,
    corpus: &[Sample],
    records: &[ScoreRecord],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    opts.check(model)?;
    let mut by_pair: HashMap<(&str, usize), &[f64]> = HashMap::with_capacity(records.len());
    for r in records {
        if by_pair.insert((r.sample_id.as_str(), r.class_index), &r.scores).is_some() {
            return Err(Error::invalid(format!(
                "duplicate scores for sample {} class {}",
                r.sample_id, r.class_index
            )));
        }
    }
    let pairs = annotated_pairs(corpus);
    let workers = pool(opts.jobs)?;
    let per_pair = workers.install(|| {
        pairs
            .par_iter()
            .map(|(i, c, gt)| {
                let s = &corpus[*i];
                let scores = by_pair.get(&(s.id.as_str(), *c)).ok_or_else(|| Error::InvalidSample {
                    sample_id: s.id.clone(),
                    message: format!("no scores for annotated class {c}"),
                })?;
                if scores.len() != s.tokens.len() {
                    return Err(Error::InvalidSample {
                        sample_id: s.id.clone(),
                        message: format!("{} scores for {} tokens", scores.len(), s.tokens.len()),
                    });
                }
                let scores = corpus::zero_sentence_final_scores(&s.tokens, scores, &opts.punctuation_ids);
                pair_metrics(model, s, *c, gt, &scores, opts)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    MetricsReport::assemble(classification_f1(model, corpus, opts)?, per_pair)
}

/// The model's own scores for every annotated pair, in exchange format.
pub fn score_records(model: &Model, corpus: &[Sample], opts: &EvalOptions) -> Result<Vec<ScoreRecord>> {
    opts.check(model)?;
    annotated_pairs(corpus)
        .into_iter()
        .map(|(i, c, _)| {
            let s = &corpus[i];
            let doc = predict_document(model, &s.tokens, opts)?;
            Ok(ScoreRecord {
                sample_id: s.id.clone(),
                class_index: c,
                scores: doc.scores[c].clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;
    use crate::model::ModelConfig;
    use std::collections::BTreeMap;

    fn tiny_model(mode: LabelMode) -> Model {
        Model::new(ModelConfig {
            vocab_size: 20,
            dim: 8,
            layers: 1,
            attention_heads: 2,
            feedforward_dim: 16,
            num_classes: 2,
            max_positions: 40,
            label_mode: mode,
            seed: 3,
        })
        .unwrap()
    }

    fn annotated(id: &str, tokens: Vec<u32>, labels: Vec<u8>, spans: &[(usize, Span)]) -> Sample {
        let mut ann = BTreeMap::new();
        for &(c, s) in spans {
            ann.entry(c).or_insert_with(Vec::new).push(s);
        }
        Sample {
            id: id.into(),
            tokens,
            labels,
            annotations: Some(ann),
        }
    }

    #[test]
    fn perf_recombines() {
        let model = tiny_model(LabelMode::Multilabel);
        let corpus = vec![
            annotated("a", (0..12).collect(), vec![1, 0], &[(0, Span::new(2, 5))]),
            annotated("b", (3..15).collect(), vec![1, 1], &[(0, Span::new(0, 2)), (1, Span::new(7, 9))]),
        ];
        let opts = EvalOptions::for_model(&model);
        let r = evaluate(&model, &corpus, &opts).unwrap();
        assert_eq!(r.per_pair.len(), 3);
        assert!((r.perf - (r.token_f1 + r.iou_f1 + r.comprehensiveness - r.sufficiency)).abs() < 1e-9);
        for (_, v) in r.summary() {
            assert!(v.is_finite());
        }
        assert!((-1.0..=1.0).contains(&r.sufficiency));
    }

    #[test]
    fn oracle_scores_reach_agreement_maxima() {
        let model = tiny_model(LabelMode::Exclusive);
        let corpus = vec![
            annotated("a", (0..10).collect(), vec![0, 1], &[(1, Span::new(3, 6))]),
            annotated("b", (5..17).collect(), vec![1, 0], &[(0, Span::new(0, 4))]),
        ];
        let records: Vec<ScoreRecord> = corpus
            .iter()
            .map(|s| {
                let c = s.positive_classes().next().unwrap();
                ScoreRecord {
                    sample_id: s.id.clone(),
                    class_index: c,
                    scores: s.ground_truth(c).iter().map(|&g| f64::from(g)).collect(),
                }
            })
            .collect();
        let r = evaluate_scores(&model, &corpus, &records, &EvalOptions::for_model(&model)).unwrap();
        assert_eq!(r.auc_pr, 1.0);
        assert_eq!(r.d_token_f1, 1.0);
        assert_eq!(r.d_iou_f1, 1.0);

        let short = vec![ScoreRecord { scores: vec![0.0; 3], ..records[0].clone() }, records[1].clone()];
        assert!(evaluate_scores(&model, &corpus, &short, &EvalOptions::for_model(&model)).is_err());
        assert!(evaluate_scores(&model, &corpus, &records[..1], &EvalOptions::for_model(&model)).is_err());
    }

    #[test]
    fn faithfulness_rejects_non_ground_truth_class() {
        let model = tiny_model(LabelMode::Multilabel);
        let s = annotated("a", (0..6).collect(), vec![1, 0], &[(0, Span::new(0, 2))]);
        let scores = vec![0.5; 6];
        assert!(sufficiency(&model, &s, &scores, 1, &EvalOptions::for_model(&model)).is_err());
        assert!(comprehensiveness(&model, &s, &scores[..3], 0, &EvalOptions::for_model(&model)).is_err());
    }

    #[test]
    fn input_blind_model_has_zero_faithfulness() {
        let mut model = tiny_model(LabelMode::Multilabel);
        // Zero classifier weights make the output independent of the input.
        let slot = model.param_names().iter().position(|n| n == "classifier.w").unwrap();
        model.params_mut()[slot].fill(0.0);
        let s = annotated("a", (0..9).collect(), vec![1, 1], &[(0, Span::new(1, 3))]);
        let scores: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        let opts = EvalOptions::for_model(&model);
        assert_eq!(sufficiency(&model, &s, &scores, 0, &opts).unwrap(), 0.0);
        assert_eq!(comprehensiveness(&model, &s, &scores, 1, &opts).unwrap(), 0.0);
    }

    #[test]
    fn long_documents_are_segmented() {
        let model = tiny_model(LabelMode::Multilabel);
        let opts = EvalOptions {
            max_segment_len: 10,
            overlap_len: 4,
            ..EvalOptions::default()
        };
        let tokens: Vec<u32> = (0..31).map(|i| i % 20).collect();
        let doc = predict_document(&model, &tokens, &opts).unwrap();
        assert_eq!(doc.scores.len(), 2);
        assert!(doc.scores.iter().all(|s| s.len() == 31));
        assert!(doc.class_probs.iter().all(|p| (0.0..=1.0).contains(p)));
        let too_long = EvalOptions {
            max_segment_len: 100,
            ..opts
        };
        assert!(evaluate(&model, &[], &too_long).is_err());
    }

    #[test]
    fn decisions() {
        assert_eq!(decide(&[0.2, 0.7, 0.5], LabelMode::Multilabel), vec![0, 1, 1]);
        assert_eq!(decide(&[0.2, 0.7, 0.1], LabelMode::Exclusive), vec![0, 1, 0]);
        assert_eq!(decide(&[0.4, 0.4, 0.2], LabelMode::Exclusive), vec![1, 0, 0]);
    }

    #[test]
    fn score_records_round_trip() {
        let recs = vec![ScoreRecord {
            sample_id: "x".into(),
            class_index: 2,
            scores: vec![0.25, 1.0],
        }];
        let mut buf = Vec::new();
        write_scores(&recs, &mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(read_scores(&path).unwrap(), recs);
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"sample_id\":\"x\",\"class_index\":2,\"scores\":[0.25,1.0]}\n"
        );
    }
}
