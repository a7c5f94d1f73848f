//! Small pre-norm transformer encoder with a classification head on the
//! aggregation token and a per-class rationale head on every content token.
//!
//! One forward pass yields class probabilities and, for every class, kernel
//! weights and widths that are turned into a smooth token mask.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::mask::{self, MaskHeadOutput, RationaleMask, SIGMA_MAX, SIGMA_MIN};

/// Initial kernel width the rationale head starts from.
pub const INITIAL_SIGMA: f64 = 3.0;

const CHECKPOINT_MAGIC: &str = "RTP-CKPT-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Exactly one class per sample; softmax probabilities.
    Exclusive,
    /// Any subset of classes; independent logistic probabilities.
    Multilabel,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclusive" => Ok(LabelMode::Exclusive),
            "multilabel" => Ok(LabelMode::Multilabel),
            other => Err(Error::config(format!(
                "unknown label mode {other:?} (expected exclusive|multilabel)"
            ))),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Exclusive => "exclusive",
            LabelMode::Multilabel => "multilabel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of content token ids; three special ids follow them.
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub attention_heads: usize,
    pub feedforward_dim: usize,
    pub num_classes: usize,
    pub max_positions: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            dim: 64,
            layers: 2,
            attention_heads: 4,
            feedforward_dim: 128,
            num_classes: 3,
            max_positions: 512,
            label_mode: LabelMode::Multilabel,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.attention_heads == 0 || !self.dim.is_multiple_of(self.attention_heads) {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of attention_heads {}",
                self.dim, self.attention_heads
            )));
        }
        if self.num_classes == 0 || self.vocab_size == 0 || self.feedforward_dim == 0 {
            return Err(Error::config(
                "vocab_size, num_classes and feedforward_dim must be positive",
            ));
        }
        if self.max_positions < 3 {
            return Err(Error::config("max_positions must leave room for content tokens"));
        }
        Ok(())
    }

    pub fn pad_id(&self) -> TokenId {
        self.vocab_size as TokenId
    }

    pub fn cls_id(&self) -> TokenId {
        self.vocab_size as TokenId + 1
    }

    pub fn sep_id(&self) -> TokenId {
        self.vocab_size as TokenId + 2
    }

    /// Longest content sequence a single forward pass accepts.
    pub fn max_content_len(&self) -> usize {
        self.max_positions - 2
    }
}

/// Embedded sequence: `[aggregation, content..., separator]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub x: Array2<f64>,
    /// Rows that are never blended (the special tokens).
    pub keep: Vec<bool>,
}

impl Embedded {
    pub fn content_len(&self) -> usize {
        self.x.nrows().saturating_sub(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Pre-activation class scores.
    pub class_scores: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub mask_head: MaskHeadOutput,
    pub mask: RationaleMask,
}

#[derive(Debug, Clone)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_ff1: usize,
    b_ff1: usize,
    w_ff2: usize,
    b_ff2: usize,
}

#[derive(Debug, Clone)]
struct Slots {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerSlots>,
    lnf_g: usize,
    lnf_b: usize,
    cls_w: usize,
    cls_b: usize,
    rat_w: usize,
    rat_b: usize,
}

/// Graph handles for every parameter of one model, see [`Model::bind`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

/// Rationale head outputs inside a graph, each `[num_classes x content_len]`.
#[derive(Debug, Clone, Copy)]
pub struct RationaleVars {
    pub w: Var,
    pub sigma: Var,
    pub mask: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    slots: Slots,
    use_positions: bool,
}

#[derive(Default)]
struct ParamBuilder {
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl ParamBuilder {
    fn add(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.params.push(t);
        self.params.len() - 1
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

impl Model {
    /// Freshly initialised model; weights depend only on `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, ff, c) = (config.dim, config.feedforward_dim, config.num_classes);
        let mut b = ParamBuilder::default();
        let tok_emb = b.add("tok_emb", uniform(&mut rng, config.vocab_size + 3, d, 0.5));
        let pos_emb = b.add("pos_emb", uniform(&mut rng, config.max_positions, d, 0.1));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            // q, k and v blocks each get their own square fan-out.
            let qkv: Vec<Tensor> = (0..3).map(|_| xavier(&mut rng, d, d)).collect();
            let views: Vec<_> = qkv.iter().map(|t| t.view()).collect();
            let w_qkv = ndarray::concatenate(ndarray::Axis(1), &views).expect("same rows");
            layers.push(LayerSlots {
                ln1_g: b.add(&p("ln1.gamma"), Array2::ones((1, d))),
                ln1_b: b.add(&p("ln1.beta"), Array2::zeros((1, d))),
                w_qkv: b.add(&p("attn.w_qkv"), w_qkv),
                b_qkv: b.add(&p("attn.b_qkv"), Array2::zeros((1, 3 * d))),
                w_o: b.add(&p("attn.w_o"), xavier(&mut rng, d, d)),
                b_o: b.add(&p("attn.b_o"), Array2::zeros((1, d))),
                ln2_g: b.add(&p("ln2.gamma"), Array2::ones((1, d))),
                ln2_b: b.add(&p("ln2.beta"), Array2::zeros((1, d))),
                w_ff1: b.add(&p("ff.w1"), xavier(&mut rng, d, ff)),
                b_ff1: b.add(&p("ff.b1"), Array2::zeros((1, ff))),
                w_ff2: b.add(&p("ff.w2"), xavier(&mut rng, ff, d)),
                b_ff2: b.add(&p("ff.b2"), Array2::zeros((1, d))),
            });
        }
        let slots = Slots {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: b.add("final_ln.gamma", Array2::ones((1, d))),
            lnf_b: b.add("final_ln.beta", Array2::zeros((1, d))),
            cls_w: b.add("classifier.w", xavier(&mut rng, d, c)),
            cls_b: b.add("classifier.b", Array2::zeros((1, c))),
            // Zero-initialised so training starts from w = 0 (m = 0.5) everywhere.
            rat_w: b.add("rationale.w", Array2::zeros((d, 2 * c))),
            rat_b: b.add("rationale.b", Array2::zeros((1, 2 * c))),
        };
        Ok(Self {
            config,
            names: b.names,
            params: b.params,
            slots,
            use_positions: true,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Toggles position embeddings. Only meant for diagnostics: a model
    /// without them is permutation-equivariant over content tokens.
    pub fn set_position_encoding(&mut self, enabled: bool) {
        self.use_positions = enabled;
    }

    /// Index of the rationale head's output weight matrix
    /// (`[dim x 2 * num_classes]`, per-class weight columns first, then
    /// width columns).
    pub fn rationale_weight_slot(&self) -> usize {
        self.slots.rat_w
    }

    pub fn rationale_bias_slot(&self) -> usize {
        self.slots.rat_b
    }

    /// Background embedding used for blending: the padding token's row.
    pub fn background(&self) -> Array1<f64> {
        self.params[self.slots.tok_emb]
            .row(self.config.pad_id() as usize)
            .to_owned()
    }

    fn input_ids(&self, tokens: &[TokenId]) -> Result<Vec<usize>> {
        if tokens.len() > self.config.max_content_len() {
            return Err(Error::shape(format!(
                "{} tokens exceed the {} content positions of the model",
                tokens.len(),
                self.config.max_content_len()
            )));
        }
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(self.config.cls_id() as usize);
        for &t in tokens {
            if t > self.config.pad_id() {
                return Err(Error::invalid(format!(
                    "token id {t} outside vocabulary of {} (+ padding)",
                    self.config.vocab_size
                )));
            }
            ids.push(t as usize);
        }
        ids.push(self.config.sep_id() as usize);
        Ok(ids)
    }

    /// Embeds `tokens` (content ids or the padding id) framed by the
    /// aggregation and separator tokens.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Embedded> {
        let ids = self.input_ids(tokens)?;
        let table = &self.params[self.slots.tok_emb];
        let pos = &self.params[self.slots.pos_emb];
        let mut x = table.select(ndarray::Axis(0), &ids);
        if self.use_positions {
            x += &pos.slice(ndarray::s![0..ids.len(), ..]);
        }
        let mut keep = vec![false; ids.len()];
        keep[0] = true;
        keep[ids.len() - 1] = true;
        Ok(Embedded { x, keep })
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(slot, t)| {
                if trainable {
                    g.param(t.clone(), slot)
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// [`Model::embed`] recorded on a graph.
    pub fn embed_on(&self, g: &mut Graph, p: &Bound, tokens: &[TokenId]) -> Result<Var> {
        let ids = self.input_ids(tokens)?;
        let x = g.gather(p.vars[self.slots.tok_emb], &ids);
        if !self.use_positions {
            return Ok(x);
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = g.gather(p.vars[self.slots.pos_emb], &positions);
        Ok(g.add(x, pe))
    }

    fn check_rows(&self, rows: usize, cols: usize) -> Result<()> {
        if rows < 2 {
            return Err(Error::shape("input needs aggregation and separator rows"));
        }
        if rows > self.config.max_positions {
            return Err(Error::shape(format!(
                "sequence of {rows} positions exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        if cols != self.config.dim {
            return Err(Error::shape(format!(
                "embedding width {cols} but model dim {}",
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Runs the encoder stack on `x` (`[rows x dim]`), returning final
    /// normalised hidden states.
    pub fn encode_on(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (rows, cols) = g.value(x).dim();
        self.check_rows(rows, cols)?;
        let v = |slot: usize| p.vars[slot];
        let d = self.config.dim;
        let heads = self.config.attention_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x;
        for ls in &self.slots.layers {
            let n1 = g.layer_norm(h, v(ls.ln1_g), v(ls.ln1_b));
            let qkv = g.matmul(n1, v(ls.w_qkv));
            let qkv = g.add_row(qkv, v(ls.b_qkv));
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = g.slice_cols(qkv, hd * dh, (hd + 1) * dh);
                let k = g.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh);
                let val = g.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
                let scores = g.matmul_bt(q, k);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                outs.push(g.matmul(attn, val));
            }
            let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            let proj = g.matmul(cat, v(ls.w_o));
            let proj = g.add_row(proj, v(ls.b_o));
            h = g.add(h, proj);

            let n2 = g.layer_norm(h, v(ls.ln2_g), v(ls.ln2_b));
            let f = g.matmul(n2, v(ls.w_ff1));
            let f = g.add_row(f, v(ls.b_ff1));
            let f = g.gelu(f);
            let f = g.matmul(f, v(ls.w_ff2));
            let f = g.add_row(f, v(ls.b_ff2));
            h = g.add(h, f);
        }
        Ok(g.layer_norm(h, v(self.slots.lnf_g), v(self.slots.lnf_b)))
    }

    /// `1 x num_classes` class scores from the aggregation row of `hidden`.
    pub fn class_logits_on(&self, g: &mut Graph, p: &Bound, hidden: Var) -> Var {
        let agg = g.slice_rows(hidden, 0, 1);
        let logits = g.matmul(agg, p.vars[self.slots.cls_w]);
        g.add_row(logits, p.vars[self.slots.cls_b])
    }

    /// Probabilities for the configured label mode.
    pub fn probs_on(&self, g: &mut Graph, logits: Var) -> Var {
        match self.config.label_mode {
            LabelMode::Exclusive => g.softmax_rows(logits),
            LabelMode::Multilabel => g.sigmoid(logits),
        }
    }

    /// Per-class weights, widths and masks for the content rows of `hidden`.
    pub fn rationale_on(&self, g: &mut Graph, p: &Bound, hidden: Var) -> RationaleVars {
        let rows = g.value(hidden).nrows();
        let c = self.config.num_classes;
        let content = g.slice_rows(hidden, 1, rows - 1);
        let raw = g.matmul(content, p.vars[self.slots.rat_w]);
        let raw = g.add_row(raw, p.vars[self.slots.rat_b]);
        let raw = g.transpose(raw);
        let w = g.slice_rows(raw, 0, c);
        let raw_sigma = g.slice_rows(raw, c, 2 * c);
        let raw_sigma = g.add_scalar(raw_sigma, mask::sigma_transform_inverse(INITIAL_SIGMA, SIGMA_MIN));
        let sigma = g.sigma_transform(raw_sigma, SIGMA_MIN, SIGMA_MAX);
        let m = g.mask(w, sigma);
        RationaleVars { w, sigma, mask: m }
    }

    /// Classification and rationale masks in one pass.
    pub fn forward_full(&self, x: ArrayView2<'_, f64>) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.to_owned());
        let hidden = self.encode_on(&mut g, &p, xv)?;
        let logits = self.class_logits_on(&mut g, &p, hidden);
        let probs = self.probs_on(&mut g, logits);
        let r = self.rationale_on(&mut g, &p, hidden);
        Ok(ModelOutput {
            class_scores: g.value(logits).row(0).to_vec(),
            class_probs: g.value(probs).row(0).to_vec(),
            mask_head: MaskHeadOutput {
                w: g.value(r.w).clone(),
                sigma: g.value(r.sigma).clone(),
            },
            mask: RationaleMask {
                m: g.value(r.mask).clone(),
            },
        })
    }

    /// Class probabilities only; identical to `forward_full(x).class_probs`.
    pub fn forward_classify(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.to_owned());
        let hidden = self.encode_on(&mut g, &p, xv)?;
        let logits = self.class_logits_on(&mut g, &p, hidden);
        let probs = self.probs_on(&mut g, logits);
        Ok(g.value(probs).row(0).to_vec())
    }

    /// Embeds and runs [`Model::forward_full`].
    pub fn predict(&self, tokens: &[TokenId]) -> Result<ModelOutput> {
        let e = self.embed(tokens)?;
        self.forward_full(e.x.view())
    }

    /// Embeds and runs [`Model::forward_classify`].
    pub fn classify(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let e = self.embed(tokens)?;
        self.forward_classify(e.x.view())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Serialises the checkpoint: magic line, JSON header line, then every
    /// tensor as little-endian `f64` in header order.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            seed: self.config.seed,
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for t in &self.params {
            for v in t.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }

    /// Loads a checkpoint and requires its config to equal `expected`.
    pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load_checkpoint(path)?;
        compare_configs(expected, model.config())?;
        Ok(model)
    }

    pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut magic = String::new();
        input.read_line(&mut magic)?;
        if magic.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMismatch {
                field: "version".into(),
                expected: CHECKPOINT_MAGIC.into(),
                found: magic.trim_end().chars().take(32).collect(),
            });
        }
        let mut line = String::new();
        input.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(&line)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut model = Model::new(header.config.clone())?;
        if header.tensors.len() != model.params.len() {
            return Err(Error::CheckpointMismatch {
                field: "tensors".into(),
                expected: model.params.len().to_string(),
                found: header.tensors.len().to_string(),
            });
        }
        let mut buf = [0u8; 8];
        for (slot, entry) in header.tensors.iter().enumerate() {
            let t = &mut model.params[slot];
            if entry.name != model.names[slot] || (entry.rows, entry.cols) != t.dim() {
                return Err(Error::CheckpointMismatch {
                    field: model.names[slot].clone(),
                    expected: format!("{} {:?}", model.names[slot], t.dim()),
                    found: format!("{} {:?}", entry.name, (entry.rows, entry.cols)),
                });
            }
            for v in t.iter_mut() {
                input
                    .read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("truncated tensor {}", entry.name)))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Field-by-field comparison naming the first mismatch.
pub fn compare_configs(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let fields: [(&str, String, String); 9] = [
        ("vocab_size", expected.vocab_size.to_string(), found.vocab_size.to_string()),
        ("dim", expected.dim.to_string(), found.dim.to_string()),
        ("layers", expected.layers.to_string(), found.layers.to_string()),
        (
            "attention_heads",
            expected.attention_heads.to_string(),
            found.attention_heads.to_string(),
        ),
        (
            "feedforward_dim",
            expected.feedforward_dim.to_string(),
            found.feedforward_dim.to_string(),
        ),
        ("num_classes", expected.num_classes.to_string(), found.num_classes.to_string()),
        (
            "max_positions",
            expected.max_positions.to_string(),
            found.max_positions.to_string(),
        ),
        ("label_mode", expected.label_mode.to_string(), found.label_mode.to_string()),
        ("seed", expected.seed.to_string(), found.seed.to_string()),
    ];
    for (field, e, f) in fields {
        if e != f {
            return Err(Error::CheckpointMismatch {
                field: field.into(),
                expected: e,
                found: f,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::blend_inputs;

    fn tiny(mode: LabelMode) -> Model {
        Model::new(ModelConfig {
            vocab_size: 20,
            dim: 8,
            layers: 1,
            attention_heads: 2,
            feedforward_dim: 12,
            num_classes: 3,
            max_positions: 16,
            label_mode: mode,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn embed_shapes_and_errors() {
        let m = tiny(LabelMode::Exclusive);
        let e = m.embed(&[]).unwrap();
        assert_eq!(e.x.dim(), (2, 8));
        assert_eq!(e.keep, vec![true, true]);
        let e = m.embed(&[1, 2, 3]).unwrap();
        assert_eq!(e.x.nrows(), 5);
        assert_eq!(e.keep, vec![true, false, false, false, true]);
        assert_eq!(e, m.embed(&[1, 2, 3]).unwrap());
        assert!(m.embed(&[21]).is_err());
        assert!(m.embed(&[20]).is_ok(), "padding id is embeddable");
        assert!(m.embed(&[1; 15]).is_err());
    }

    #[test]
    fn forward_contracts() {
        for mode in [LabelMode::Exclusive, LabelMode::Multilabel] {
            let m = tiny(mode);
            let e = m.embed(&[4, 5, 6, 7]).unwrap();
            let out = m.forward_full(e.x.view()).unwrap();
            assert_eq!(out.mask.m.dim(), (3, 4));
            assert_eq!(out.mask_head.w.dim(), (3, 4));
            match mode {
                LabelMode::Exclusive => {
                    assert!((out.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6)
                }
                LabelMode::Multilabel => {
                    assert!(out.class_probs.iter().all(|&p| p > 0.0 && p < 1.0))
                }
            }
            // zero-initialised rationale head
            assert!(out.mask.m.iter().all(|&v| (v - 0.5).abs() < 1e-12));
            assert!(out.mask_head.sigma.iter().all(|&s| (s - INITIAL_SIGMA).abs() < 1e-9));
            let probs = m.forward_classify(e.x.view()).unwrap();
            for (a, b) in probs.iter().zip(&out.class_probs) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn blended_all_keep_matches_clean_input() {
        let m = tiny(LabelMode::Exclusive);
        let e = m.embed(&[4, 5, 6]).unwrap();
        let pair = blend_inputs(e.x.view(), &[1.0; 5], m.background().view(), &e.keep).unwrap();
        assert_eq!(
            m.forward_classify(pair.x_keep.view()).unwrap(),
            m.forward_classify(e.x.view()).unwrap()
        );
    }

    #[test]
    fn rejects_overlong_sequences() {
        let m = tiny(LabelMode::Exclusive);
        assert!(m.forward_full(Array2::zeros((17, 8)).view()).is_err());
        assert!(m.forward_full(Array2::zeros((4, 7)).view()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let mut m = tiny(LabelMode::Multilabel);
        // make the rationale head non-trivial
        let slot = m.rationale_weight_slot();
        m.params_mut()[slot].iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), m.config());
        assert_eq!(loaded.config().seed, 3);
        let tokens = [1, 2, 3, 9];
        assert_eq!(loaded.predict(&tokens).unwrap(), m.predict(&tokens).unwrap());

        let mut other = m.config().clone();
        other.vocab_size = 21;
        match Model::load_checkpoint_expecting(&path, &other) {
            Err(Error::CheckpointMismatch { field, .. }) => assert_eq!(field, "vocab_size"),
            r => panic!("expected mismatch, got {r:?}"),
        }

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, [b"RTP-CKPT-0".as_slice(), &bytes[10..]].concat()).unwrap();
        match Model::load_checkpoint(&bad) {
            Err(Error::CheckpointMismatch { field, .. }) => assert_eq!(field, "version"),
            r => panic!("expected version mismatch, got {r:?}"),
        }
        std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Model::load_checkpoint(&bad).is_err());
    }
}
