use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use speechsent::config::{read_meta, write_meta, CheckpointMeta, RunConfig};
use speechsent::encoder::{encode, init_encoder, read_features, FeatureSequence};
use speechsent::metrics::fmt_pct;
use speechsent::model::{classification_from_logits, decode_batch, gradient_check, DecoderConfig, Variant};
use speechsent::numerics::{read_checkpoint, write_checkpoint, ParamSet};
use speechsent::synthcorpus::{generate, load_corpus, write_corpus, Corpus, SentimentExample};
use speechsent::train::{
    evaluate, format_ablation_table, loso_cv, run_ablation, split_holdout, train, write_log_csv, Protocol,
};
use speechsent::visualize::{html_page, quantize_bins, render, word_attention, HeadSelect, RenderFormat};

use crate::{settings, Cli, Command, NumericalFailure, UsageError};

pub const CHECKPOINT_NAME: &str = "model.sntc";

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    argv: Vec<String>,
    command: &'a str,
    seeds: BTreeMap<&'a str, u64>,
    config: Option<&'a RunConfig>,
    inputs: BTreeMap<&'a str, String>,
}

fn write_run_json(
    dir: &Path,
    command: &str,
    seeds: BTreeMap<&str, u64>,
    config: Option<&RunConfig>,
    inputs: BTreeMap<&str, String>,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let rec = RunRecord {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        command,
        seeds,
        config,
        inputs,
    };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&rec)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_model(checkpoint: &Path) -> Result<(CheckpointMeta, ParamSet<f32>)> {
    let meta = read_meta(checkpoint)?;
    let params = read_checkpoint(checkpoint)?;
    meta.model.check_params(&params)?;
    Ok((meta, params))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            cfg,
            out,
            seed,
            through_encoder,
        } => synth(
            settings::load(cfg.config.as_deref(), &cfg.overrides)?,
            &out,
            seed,
            through_encoder,
        ),
        Command::Train {
            cfg,
            manifest,
            out,
            seed,
        } => {
            let mut run_cfg = settings::load(cfg.config.as_deref(), &cfg.overrides)?;
            if let Some(s) = seed {
                run_cfg.train.seed = s;
            }
            train_cmd(run_cfg, &manifest, &out)
        }
        Command::Eval {
            checkpoint,
            manifest,
            loso,
            groups,
            ablation,
            seeds,
            test_fraction,
            out,
        } => eval_cmd(
            &checkpoint,
            &manifest,
            loso,
            groups,
            ablation,
            &seeds,
            test_fraction,
            &out,
        ),
        Command::Predict {
            checkpoint,
            features,
            out,
        } => predict(&checkpoint, &features, &out),
        Command::Viz {
            checkpoint,
            manifest,
            index,
            format,
            head,
            out,
        } => viz(&checkpoint, &manifest, index, &format, &head, &out),
        Command::Gradcheck {
            cfg,
            variant,
            seed,
            coords,
            tolerance,
            out,
        } => {
            let run_cfg = settings::load(cfg.config.as_deref(), &cfg.overrides)?;
            gradcheck(run_cfg, &variant, seed, coords, tolerance, &out)
        }
    }
}

fn synth(mut cfg: RunConfig, out: &Path, seed: u64, through_encoder: bool) -> Result<()> {
    let corpus = if through_encoder {
        let r = cfg.encoder.reduction();
        let s = &cfg.synth;
        let input = speechsent::synthcorpus::SynthConfig {
            dim: cfg.encoder.input_dim,
            min_len: s.min_len * r,
            max_len: s.max_len * r,
            cue_len: s.cue_len * r,
            frame_period: s.frame_period / r as f64,
            ..s.clone()
        };
        let raw = generate(&input, seed)?.corpus;
        let enc = init_encoder(&cfg.encoder, seed)?;
        log::info!(
            "encoding {} utterances (encoder checksum {})",
            raw.examples.len(),
            enc.checksum()
        );
        let examples = raw
            .examples
            .into_iter()
            .map(|e| {
                Ok(SentimentExample {
                    features: encode(&e.features, &enc)?,
                    cue_span: e.cue_span.map(|(a, b)| (a / r, b.div_ceil(r))),
                    alignment: None,
                    ..e
                })
            })
            .collect::<speechsent::Result<Vec<_>>>()?;
        cfg.synth.dim = cfg.encoder.output_dim();
        Corpus {
            class_names: raw.class_names,
            examples,
        }
    } else {
        generate(&cfg.synth, seed)?.corpus
    };
    let manifest = write_corpus(&corpus, out)?;
    write_run_json(
        out,
        "synth",
        BTreeMap::from([("synth", seed)]),
        Some(&cfg),
        BTreeMap::from([("through_encoder", through_encoder.to_string())]),
    )?;
    println!("wrote {} examples to {}", corpus.examples.len(), manifest.display());
    Ok(())
}

fn resolve_model(cfg: &RunConfig, corpus: &Corpus) -> DecoderConfig {
    DecoderConfig {
        num_classes: corpus.num_classes(),
        input_dim: corpus.feature_dim().unwrap_or(cfg.model.input_dim),
        ..cfg.model.clone()
    }
}

fn train_cmd(mut cfg: RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let class_names = cfg.synth.class_names();
    let corpus = load_corpus(manifest, &class_names)?;
    cfg.model = resolve_model(&cfg, &corpus);
    let tcfg = cfg.resolved_train();
    let (tr, ho) = split_holdout(corpus.examples.len(), tcfg.holdout_fraction, tcfg.seed);
    let train_set = corpus.subset(&tr).examples;
    let holdout = corpus.subset(&ho).examples;
    log::info!(
        "training {} on {} examples ({} held out) for {} steps",
        cfg.model.variant,
        train_set.len(),
        holdout.len(),
        tcfg.max_steps
    );
    let result = train(&cfg.model, &train_set, &holdout, &tcfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join(CHECKPOINT_NAME);
    write_checkpoint(&result.params, &ckpt)?;
    write_meta(
        &ckpt,
        &CheckpointMeta {
            model: cfg.model.clone(),
            class_names,
            best_step: result.best_step,
            config: cfg.clone(),
        },
    )?;
    write_log_csv(&result.log, &out.join("train_log.csv"))?;
    write_json(
        &out.join("metrics.json"),
        &json!({ "best_step": result.best_step, "holdout": result.best_holdout, "steps": result.steps }),
    )?;
    write_run_json(
        out,
        "train",
        BTreeMap::from([("train", tcfg.seed)]),
        Some(&cfg),
        BTreeMap::from([("manifest", path_str(manifest))]),
    )?;
    match &result.best_holdout {
        Some(m) => println!(
            "best holdout step {}: WA {} UA {}; checkpoint {}",
            result.best_step,
            fmt_pct(m.wa),
            fmt_pct(m.ua),
            ckpt.display()
        ),
        None => println!("trained {} steps; checkpoint {}", result.steps, ckpt.display()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    checkpoint: &Path,
    manifest: &Path,
    loso: bool,
    groups: Option<usize>,
    ablation: bool,
    seeds: &[u64],
    test_fraction: f64,
    out: &Path,
) -> Result<()> {
    let (meta, params) = load_model(checkpoint)?;
    let corpus = load_corpus(manifest, &meta.class_names)?;
    let tcfg = meta.config.resolved_train();
    let run_seeds = BTreeMap::from([("train", tcfg.seed)]);
    let report = if ablation {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            bail!(UsageError(format!(
                "--test-fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let protocol = if loso {
            Protocol::Loso { groups }
        } else {
            Protocol::Split { test_fraction }
        };
        let rows = run_ablation(&corpus, &meta.model, &tcfg, seeds, protocol)?;
        print!("{}", format_ablation_table(&rows));
        json!({ "ablation": rows, "protocol": protocol, "seeds": seeds })
    } else if loso {
        let cv = loso_cv(&corpus, groups, &meta.model, &tcfg)?;
        println!(
            "LOSO over {} folds: pooled WA {} UA {} (mean per fold WA {} UA {})",
            cv.folds.len(),
            fmt_pct(cv.pooled.wa),
            fmt_pct(cv.pooled.ua),
            fmt_pct(cv.mean_fold_wa),
            fmt_pct(cv.mean_fold_ua)
        );
        serde_json::to_value(&cv)?
    } else {
        let ev = evaluate(&meta.model, &params, &corpus.examples, 64)?;
        println!("{}", serde_json::to_string(&ev.report)?);
        serde_json::to_value(&ev.report)?
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("eval.json"), &report)?;
    write_run_json(
        out,
        "eval",
        run_seeds,
        Some(&meta.config),
        BTreeMap::from([
            ("checkpoint", path_str(checkpoint)),
            ("manifest", path_str(manifest)),
            (
                "mode",
                if ablation {
                    "ablation"
                } else if loso {
                    "loso"
                } else {
                    "score"
                }
                .to_string(),
            ),
            (
                "ablation_seeds",
                seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            ),
            ("groups", groups.map_or("-".into(), |g| g.to_string())),
            ("test_fraction", test_fraction.to_string()),
        ]),
    )
}

fn predict(checkpoint: &Path, features: &Path, out: &Path) -> Result<()> {
    let (meta, params) = load_model(checkpoint)?;
    let seq: FeatureSequence = read_features(features)?;
    let o = decode_batch(&meta.model, &params, &[&seq])?.pop().expect("one output");
    let c = classification_from_logits(o.logits);
    let probs: BTreeMap<&str, f64> = meta
        .class_names
        .iter()
        .map(String::as_str)
        .zip(c.probabilities.iter().copied())
        .collect();
    let value = json!({
        "class": meta.class_names[c.class],
        "class_index": c.class,
        "probabilities": probs,
        "logits": c.logits,
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    write_run_json(
        out,
        "predict",
        BTreeMap::new(),
        Some(&meta.config),
        BTreeMap::from([("checkpoint", path_str(checkpoint)), ("features", path_str(features))]),
    )
}

fn viz(checkpoint: &Path, manifest: &Path, index: usize, format: &str, head: &str, out: &Path) -> Result<()> {
    let format: RenderFormat = format
        .parse()
        .map_err(|e: speechsent::Error| UsageError(e.to_string()))?;
    let head = match head {
        "mean" => HeadSelect::Mean,
        h => HeadSelect::Head(
            h.parse()
                .map_err(|_| UsageError(format!("--head must be `mean` or a head index, got {h:?}")))?,
        ),
    };
    let (meta, params) = load_model(checkpoint)?;
    if meta.model.variant != Variant::RnnAttn {
        bail!(UsageError(format!(
            "viz needs an rnn_attn checkpoint, this one is {}",
            meta.model.variant
        )));
    }
    let corpus = load_corpus(manifest, &meta.class_names)?;
    let ex = corpus.examples.get(index).ok_or_else(|| {
        UsageError(format!(
            "--index {index} out of range for {} examples",
            corpus.examples.len()
        ))
    })?;
    let alignment = ex
        .alignment
        .as_ref()
        .ok_or_else(|| speechsent::Error::InvalidArgument(format!("example {index} has no word alignment")))?;
    let o = decode_batch(&meta.model, &params, &[&ex.features])?
        .pop()
        .expect("one output");
    let map = o.attention.expect("rnn_attn returns attention");
    let weights = word_attention(&map, alignment, head)?;
    let bins = quantize_bins(&weights);
    let tokens: Vec<&str> = alignment.iter().map(|w| w.token.as_str()).collect();
    let predicted = classification_from_logits(o.logits).class;
    let body = render(&tokens, &bins, format)?;
    let title = format!(
        "{} (label {}, predicted {})",
        ex.id, meta.class_names[ex.label], meta.class_names[predicted]
    );
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match format {
        RenderFormat::Html => {
            let path: PathBuf = out.join(format!("viz_{index}.html"));
            fs::write(&path, html_page(&title, &body)).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
        }
        RenderFormat::Ansi => println!("{title}\n{body}"),
    }
    write_run_json(
        out,
        "viz",
        BTreeMap::new(),
        Some(&meta.config),
        BTreeMap::from([
            ("checkpoint", path_str(checkpoint)),
            ("manifest", path_str(manifest)),
            ("index", index.to_string()),
        ]),
    )
}

fn gradcheck(cfg: RunConfig, variant: &str, seed: u64, coords: usize, tolerance: f64, out: &Path) -> Result<()> {
    let variant: Variant = variant
        .parse()
        .map_err(|e: speechsent::Error| UsageError(e.to_string()))?;
    let model = DecoderConfig {
        variant,
        ..cfg.model.clone()
    };
    let report = gradient_check(&model, seed, coords, 1e-5)?;
    let worst = report.worst().cloned();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "variant": variant,
            "coords": report.coords.len(),
            "max_rel_err": report.max_rel_err,
            "worst": worst,
        }))?
    );
    write_run_json(
        out,
        "gradcheck",
        BTreeMap::from([("gradcheck", seed)]),
        Some(&RunConfig { model, ..cfg }),
        BTreeMap::from([("coords", coords.to_string())]),
    )?;
    if !(report.max_rel_err <= tolerance) {
        bail!(NumericalFailure(format!(
            "gradient check failed: max relative error {:.3e} > {tolerance:.0e}",
            report.max_rel_err
        )));
    }
    Ok(())
}
