use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use serde_json::json;

use rtp_core::corpus::{load_corpus, write_corpus};
use rtp_core::evaluation::{self, read_scores, write_scores, MetricsReport, ScoreRecord};
use rtp_core::synth::{generate_synthetic, split_corpus};
use rtp_core::{trainer, Model, Sample, TokenId};

use crate::manifest::{write_atomic, RunManifest};
use crate::render::{render_html, Explanation};
use crate::settings::resolve;
use crate::{EvalArgs, ExplainArgs, SynthArgs, TrainArgs};

fn load(path: &Path) -> Result<Vec<Sample>> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn corpus_bytes(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_corpus(samples, &mut buf)?;
    Ok(buf)
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let knobs = resolve(&args.knobs, args.config.as_ref())?;
    let cfg = knobs.synth_config();
    let (train_fraction, val_fraction) = knobs.fractions();
    cfg.validate()?;
    ensure!(
        (0.0..=1.0).contains(&train_fraction)
            && (0.0..=1.0).contains(&val_fraction)
            && train_fraction + val_fraction <= 1.0,
        "split fractions must be non-negative and sum to at most 1"
    );

    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = ["train.jsonl", "val.jsonl", "test.jsonl"];
    let mut manifest = RunManifest::new(
        "synth",
        &json!({ "synth": cfg, "train_fraction": train_fraction, "val_fraction": val_fraction }),
        Some(cfg.seed),
    )?;
    manifest.artifacts = files
        .iter()
        .chain(&["synth_manifest.json"])
        .map(|f| out.join(f))
        .collect();
    manifest.write(out)?;

    let (train, val, test) = split_corpus(generate_synthetic(&cfg)?, train_fraction, val_fraction);
    for (name, part) in files.iter().zip([&train, &val, &test]) {
        write_atomic(&out.join(name), &corpus_bytes(part)?)?;
    }
    let triggers: Vec<Vec<TokenId>> = (0..cfg.num_classes).map(|c| cfg.trigger_ids(c).collect()).collect();
    let generator = json!({
        "config": cfg,
        "counts": { "train": train.len(), "val": val.len(), "test": test.len() },
        "files": files,
        "trigger_ids": triggers,
    });
    write_atomic(&out.join("synth_manifest.json"), &json_bytes(&generator)?)?;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        train.len(),
        val.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn check_tokens(corpus: &[Sample], vocab_size: usize, path: &Path) -> Result<()> {
    for s in corpus {
        if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            bail!(
                "{}: sample {} has token {t} outside the vocabulary of {vocab_size}",
                path.display(),
                s.id
            );
        }
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let knobs = resolve(&args.knobs, args.config.as_ref())?;
    let train_set = load(&args.train)?;
    let val_set = load(&args.val)?;
    let Some(first) = train_set.first() else {
        bail!("training corpus {} is empty", args.train.display());
    };
    let model_cfg = knobs.model_config(first.num_classes());
    model_cfg.validate()?;
    let hp = knobs.hyper_params();
    hp.validate()?;
    let tc = knobs.train_config(&model_cfg);
    tc.validate()?;
    check_tokens(&train_set, model_cfg.vocab_size, &args.train)?;
    check_tokens(&val_set, model_cfg.vocab_size, &args.val)?;
    if let Some(s) = val_set.iter().find(|s| s.num_classes() != model_cfg.num_classes) {
        bail!("{}: sample {} disagrees with the training corpus on the class count", args.val.display(), s.id);
    }

    let out = args.out.unwrap_or_else(|| PathBuf::from("runs").join(&args.name));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::new(
        "train",
        &json!({ "model": model_cfg, "hyper_params": hp, "train": tc }),
        Some(tc.seed),
    )?;
    manifest.inputs = vec![args.train.clone(), args.val.clone()];
    manifest.artifacts = std::iter::once(out.join("log.jsonl"))
        .chain((0..=tc.epochs).map(|e| out.join(format!("epoch-{e:03}.ckpt"))))
        .chain(std::iter::once(out.join("best.ckpt")))
        .collect();
    manifest.write(&out)?;

    let mut model = Model::new(model_cfg)?;
    let state = trainer::train(&mut model, &train_set, &val_set, &hp, &tc, Some(&out))?;
    println!(
        "best validation score {:.4} at epoch {}; checkpoint {}",
        state.best_score,
        state.best_epoch,
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn print_report(report: &MetricsReport) {
    let width = report.summary().iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (name, value) in report.summary() {
        println!("{name:<width$}  {value:>8.4}");
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let knobs = resolve(&args.knobs, args.config.as_ref())?;
    let model = Model::load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let corpus = load(&args.corpus)?;
    let opts = knobs.options(model.config());

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let report_path = args.out.join("report.json");
    let mut manifest = RunManifest::new("eval", &opts, None)?;
    manifest.inputs = [Some(args.checkpoint.clone()), Some(args.corpus.clone()), args.scores_in.clone()]
        .into_iter()
        .flatten()
        .collect();
    manifest.artifacts = vec![report_path.clone()];
    manifest.write(&args.out)?;

    let report = match &args.scores_in {
        Some(path) => {
            let records = read_scores(path).with_context(|| format!("reading scores {}", path.display()))?;
            evaluation::evaluate_scores(&model, &corpus, &records, &opts)?
        }
        None => evaluation::evaluate(&model, &corpus, &opts)?,
    };
    write_atomic(&report_path, &json_bytes(&report)?)?;
    print_report(&report);
    Ok(())
}

fn read_token_file(path: &Path) -> Result<Vec<TokenId>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| t.parse().with_context(|| format!("{}: bad token id {t:?}", path.display())))
        .collect()
}

pub fn explain(args: ExplainArgs) -> Result<()> {
    let knobs = resolve(&args.knobs, args.config.as_ref())?;
    let model = Model::load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let opts = knobs.options(model.config());
    let (sample_id, tokens) = match (&args.corpus, &args.tokens) {
        (Some(path), None) => {
            let corpus = load(path)?;
            let sample = match (&args.sample_id, args.index) {
                (Some(id), _) => corpus.iter().find(|s| &s.id == id).with_context(|| format!("no sample {id}"))?,
                (None, index) => {
                    let i = index.unwrap_or(0);
                    corpus
                        .get(i)
                        .with_context(|| format!("index {i} is past the {} samples", corpus.len()))?
                }
            };
            (sample.id.clone(), sample.tokens.clone())
        }
        (None, Some(path)) => ("input".to_string(), read_token_file(path)?),
        _ => bail!("pass exactly one of --corpus or --tokens"),
    };
    let classes = model.config().num_classes;
    if let Some(c) = args.class {
        ensure!(c < classes, "class {c} is out of range for a {classes}-class model");
    }
    let vocab: Option<Vec<String>> = match &args.vocab {
        Some(p) => Some(
            fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .lines()
                .map(str::to_string)
                .collect(),
        ),
        None => None,
    };

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = RunManifest::new("explain", &json!({ "eval": opts, "class": args.class }), None)?;
    manifest.inputs = [Some(args.checkpoint.clone()), args.corpus.clone(), args.tokens.clone(), args.vocab.clone()]
        .into_iter()
        .flatten()
        .collect();
    manifest.artifacts = vec![args.out.join("explain.html"), args.out.join("scores.jsonl")];
    manifest.write(&args.out)?;

    let doc = evaluation::predict_document(&model, &tokens, &opts)?;
    let class_index = args.class.unwrap_or_else(|| {
        (0..classes).fold(0, |best, c| if doc.class_probs[c] > doc.class_probs[best] { c } else { best })
    });
    let words: Vec<String> = tokens
        .iter()
        .map(|&t| match vocab.as_ref().and_then(|v| v.get(t as usize)) {
            Some(w) => w.clone(),
            None => format!("t{t}"),
        })
        .collect();
    let title = format!("Rationale for {sample_id}");
    let html = render_html(&Explanation {
        title: &title,
        words: &words,
        scores: &doc.scores[class_index],
        class_index,
        class_probs: &doc.class_probs,
    });
    write_atomic(&args.out.join("explain.html"), html.as_bytes())?;

    let records: Vec<ScoreRecord> = doc
        .scores
        .iter()
        .enumerate()
        .map(|(c, s)| ScoreRecord {
            sample_id: sample_id.clone(),
            class_index: c,
            scores: s.clone(),
        })
        .collect();
    let mut buf = Vec::new();
    write_scores(&records, &mut buf)?;
    write_atomic(&args.out.join("scores.jsonl"), &buf)?;
    println!(
        "class {class_index} (p = {:.4}); wrote {}",
        doc.class_probs[class_index],
        args.out.join("explain.html").display()
    );
    Ok(())
}
