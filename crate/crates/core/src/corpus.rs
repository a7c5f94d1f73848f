//! Samples, line-delimited JSON corpora, and long-input segmentation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// Per-class annotated evidence spans.
pub type Annotations = BTreeMap<usize, Vec<Span>>;

/// One labelled token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<TokenId>,
    /// Multi-hot label vector, one entry per class.
    pub labels: Vec<u8>,
    #[serde(default)]
    pub annotations: Option<Annotations>,
}

impl Sample {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn positive_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(c, _)| c)
    }

    pub fn spans(&self, class: usize) -> Option<&[Span]> {
        self.annotations
            .as_ref()
            .and_then(|a| a.get(&class))
            .map(Vec::as_slice)
    }

    /// Binary per-token ground truth for `class`, all zeros when unannotated.
    pub fn ground_truth(&self, class: usize) -> Vec<u8> {
        let mut gt = vec![0u8; self.tokens.len()];
        for span in self.spans(class).unwrap_or(&[]) {
            gt[span.start..span.end].iter_mut().for_each(|g| *g = 1);
        }
        gt
    }

    /// Checks every structural invariant of a sample.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::InvalidSample {
            sample_id: self.id.clone(),
            message,
        };
        if let Some(bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(fail(format!("label value {bad} is not 0 or 1")));
        }
        let Some(annotations) = &self.annotations else {
            return Ok(());
        };
        for (&class, spans) in annotations {
            if class >= self.labels.len() {
                return Err(fail(format!(
                    "annotation for class {class} but only {} classes",
                    self.labels.len()
                )));
            }
            let mut prev_end = 0;
            for (k, span) in spans.iter().enumerate() {
                if span.start >= span.end || span.end > self.tokens.len() {
                    return Err(fail(format!(
                        "span [{}, {}) of class {class} out of bounds for {} tokens",
                        span.start,
                        span.end,
                        self.tokens.len()
                    )));
                }
                if k > 0 && span.start < prev_end {
                    return Err(fail(format!(
                        "spans of class {class} are unsorted or overlapping at [{}, {})",
                        span.start, span.end
                    )));
                }
                prev_end = span.end;
            }
        }
        Ok(())
    }
}

/// Reads a line-delimited JSON corpus, validating every record.
///
/// Blank lines are skipped. All records must agree on the number of classes.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut samples: Vec<Sample> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        sample.validate()?;
        if let Some(first) = samples.first() {
            if first.labels.len() != sample.labels.len() {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!(
                        "{} labels, earlier records have {}",
                        sample.labels.len(),
                        first.labels.len()
                    ),
                });
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Serialises samples one JSON object per line.
pub fn write_corpus<W: Write>(samples: &[Sample], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// A window into a longer sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub parent_id: String,
    pub offset: usize,
    pub tokens: Vec<TokenId>,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.offset + self.tokens.len()
    }
}

/// Default window length.
pub const DEFAULT_MAX_SEGMENT_LEN: usize = 510;
/// Default overlap between consecutive windows.
pub const DEFAULT_OVERLAP_LEN: usize = 100;

/// Start offsets of the windows covering `len` tokens.
pub fn segment_offsets(len: usize, max_segment_len: usize, overlap_len: usize) -> Result<Vec<usize>> {
    if max_segment_len == 0 || overlap_len >= max_segment_len {
        return Err(Error::config(format!(
            "need 0 <= overlap_len < max_segment_len, got overlap {overlap_len}, max {max_segment_len}"
        )));
    }
    let stride = max_segment_len - overlap_len;
    let mut offsets = vec![0];
    let mut offset = 0;
    while offset + max_segment_len < len {
        offset += stride;
        offsets.push(offset);
    }
    Ok(offsets)
}

/// Splits a sample into windows of at most `max_segment_len` tokens, window
/// `k` starting at `k * (max_segment_len - overlap_len)`.
pub fn segment_sample(s: &Sample, max_segment_len: usize, overlap_len: usize) -> Result<Vec<Segment>> {
    let offsets = segment_offsets(s.tokens.len(), max_segment_len, overlap_len)?;
    Ok(offsets
        .into_iter()
        .map(|offset| {
            let end = (offset + max_segment_len).min(s.tokens.len());
            Segment {
                parent_id: s.id.clone(),
                offset,
                tokens: s.tokens[offset..end].to_vec(),
            }
        })
        .collect())
}

/// Reassembles per-segment token scores into one document-level vector.
///
/// Inside the overlap of an earlier window A and a later window B, position
/// `t` of the overlap (0-based, overlap length `OL`) weights B by
/// `(t + 1) / (OL + 1)` and A by the remainder. Weights are normalised per
/// position, so outputs are always convex combinations of the inputs.
pub fn blend_segment_scores(
    segments: &[(usize, Vec<f64>)],
    doc_len: usize,
    overlap_len: usize,
) -> Result<Vec<f64>> {
    let bad = |msg: String| Err(Error::shape(msg));
    let Some(first) = segments.first() else {
        return bad("no segments to blend".into());
    };
    if first.0 != 0 {
        return bad(format!("first segment starts at {} instead of 0", first.0));
    }
    for pair in segments.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let a_end = a.0 + a.1.len();
        if b.0 <= a.0 || b.0 > a_end || b.0 + b.1.len() <= a_end {
            return bad(format!(
                "segment at {} (len {}) does not follow segment at {} (len {})",
                b.0,
                b.1.len(),
                a.0,
                a.1.len()
            ));
        }
        if a_end - b.0 != overlap_len {
            return bad(format!(
                "segments at {} and {} overlap by {} tokens, expected {overlap_len}",
                a.0,
                b.0,
                a_end - b.0
            ));
        }
    }
    let last = segments.last().expect("non-empty");
    if last.0 + last.1.len() != doc_len {
        return bad(format!(
            "segments cover {} tokens but the document has {doc_len}",
            last.0 + last.1.len()
        ));
    }

    let mut num = vec![0.0; doc_len];
    let mut den = vec![0.0; doc_len];
    for (k, (offset, scores)) in segments.iter().enumerate() {
        let prev_end = (k > 0).then(|| segments[k - 1].0 + segments[k - 1].1.len());
        let next_start = segments.get(k + 1).map(|s| s.0);
        for (t, &score) in scores.iter().enumerate() {
            let p = offset + t;
            let mut w = 1.0;
            if let Some(pe) = prev_end {
                if p < pe {
                    let ol = (pe - offset) as f64;
                    w *= (t + 1) as f64 / (ol + 1.0);
                }
            }
            if let Some(ns) = next_start {
                if p >= ns {
                    let ol = (offset + scores.len() - ns) as f64;
                    w *= (ol - (p - ns) as f64) / (ol + 1.0);
                }
            }
            num[p] += w * score;
            den[p] += w;
        }
    }
    Ok(num
        .into_iter()
        .zip(den)
        .map(|(n, d)| if d == 1.0 { n } else { n / d })
        .collect())
}

/// Zeroes the score of every token whose id is a configured sentence-final
/// punctuation id.
pub fn zero_sentence_final_scores(tokens: &[TokenId], scores: &[f64], punctuation_ids: &[TokenId]) -> Vec<f64> {
    tokens
        .iter()
        .zip(scores)
        .map(|(t, &s)| if punctuation_ids.contains(t) { 0.0 } else { s })
        .collect()
}
