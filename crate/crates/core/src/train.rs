//! Batching, the training loop and cross-validation harnesses.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_features, SpecAugmentPolicy};
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::metrics::{confusion, fmt_pct, ConfusionMatrix, MetricsReport};
use crate::model::{argmax, batch_loss, decode_batch, init_params, DecoderConfig, Variant};
use crate::numerics::{clip_global_norm, log_sum_exp, AdamConfig, AdamState, ParamSet, Scalar, Tape, Tensor};
use crate::synthcorpus::{Corpus, SentimentExample};
use crate::util::{derive_seed, hash_str};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// Filled from the run config's `augment` section.
    #[serde(skip)]
    pub augment: SpecAugmentPolicy,
    pub precision: Precision,
    pub adam: AdamConfig,
    /// Fraction of the training split held out for checkpoint selection when
    /// no explicit holdout set is given.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            clip_norm: 4.0,
            batch_size: 16,
            max_steps: 5000,
            eval_interval: 250,
            seed: 0,
            augment: SpecAugmentPolicy::default(),
            precision: Precision::F32,
            adam: AdamConfig::default(),
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm must be > 0, got {}", self.clip_norm));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                self.holdout_fraction
            ));
        }
        self.augment.validate()
    }
}

/// A padded minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T_max, D]`, zero past each length.
    pub features: Tensor<f32>,
    /// `[B, T_max]`: row `i` has `lengths[i]` leading ones.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub speakers: Vec<String>,
    /// Positions of the batch members in the source slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(
        seqs: &[&FeatureSequence],
        labels: Vec<usize>,
        speakers: Vec<String>,
        indices: Vec<usize>,
    ) -> Result<Self> {
        let (features, lengths) = crate::model::pad_batch::<f32>(seqs)?;
        let t_max = features.shape()[1];
        let mask = lengths.iter().flat_map(|&n| (0..t_max).map(move |t| t < n)).collect();
        Ok(Self {
            features,
            mask,
            lengths,
            labels,
            speakers,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Splits `examples` into batches of `batch_size`, shuffled when `rng` is
/// given. Every example lands in exactly one batch.
pub fn make_batches(
    examples: &[SentimentExample],
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Empty("cannot batch an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let seqs: Vec<&FeatureSequence> = idx.iter().map(|&i| &examples[i].features).collect();
            Batch::from_sequences(
                &seqs,
                idx.iter().map(|&i| examples[i].label).collect(),
                idx.iter().map(|&i| examples[i].speaker.clone()).collect(),
                idx.to_vec(),
            )
        })
        .collect()
}

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Holdout evaluation of a parameter snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

/// Scores `examples`, batching utterances of similar length together.
pub fn evaluate<F: Scalar>(
    cfg: &DecoderConfig,
    params: &ParamSet<F>,
    examples: &[SentimentExample],
    batch_size: usize,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| examples[i].features.len());
    let mut predictions = vec![0; examples.len()];
    let mut loss = 0.0;
    for idx in order.chunks(batch_size.max(1)) {
        let seqs: Vec<&FeatureSequence> = idx.iter().map(|&i| &examples[i].features).collect();
        for (&i, out) in idx.iter().zip(decode_batch(cfg, params, &seqs)?) {
            loss += cross_entropy(&out.logits, examples[i].label)?;
            predictions[i] = argmax(&out.logits);
        }
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let m = confusion(&predictions, &labels, cfg.num_classes)?;
    Ok(Evaluation {
        loss: loss / examples.len() as f64,
        predictions,
        report: MetricsReport::from_confusion(&m)?,
        confusion: m,
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub wa: f64,
    pub ua: f64,
}

pub const LOG_HEADER: &str = "step,split,loss,WA,UA";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.2},{:.2}", r.step, r.split, r.loss, r.wa, r.ua);
    }
    out
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    std::fs::write(path, log_to_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters at the best holdout WA (final parameters without holdout).
    pub params: ParamSet<f32>,
    pub best_step: usize,
    pub best_holdout: Option<MetricsReport>,
    pub log: Vec<LogRow>,
    pub steps: usize,
}

/// Seed of the augmentation stream for one example in one epoch.
pub fn augment_seed(seed: u64, example_id: &str, epoch: u64) -> u64 {
    derive_seed(seed, &[1, hash_str(example_id), epoch])
}

/// Trains a decoder from scratch on `train`, selecting the checkpoint with the
/// best WA on `holdout` (earlier step on ties).
pub fn train(
    model: &DecoderConfig,
    train: &[SentimentExample],
    holdout: &[SentimentExample],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let init = init_params(model, derive_seed(cfg.seed, &[0]))?;
    train_from(model, init, train, holdout, cfg)
}

/// Like [`train`] but starting from the given parameters.
pub fn train_from(
    model: &DecoderConfig,
    init: ParamSet<f32>,
    train: &[SentimentExample],
    holdout: &[SentimentExample],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    match cfg.precision {
        Precision::F32 => train_generic::<f32>(model, init, train, holdout, cfg),
        Precision::F64 => train_generic::<f64>(model, init.cast(), train, holdout, cfg),
    }
}

fn train_generic<F: Scalar>(
    model: &DecoderConfig,
    init: ParamSet<F>,
    train: &[SentimentExample],
    holdout: &[SentimentExample],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model.validate()?;
    model.check_params(&init)?;
    if train.is_empty() {
        return Err(Error::Empty("empty training set".into()));
    }
    if let Some(e) = train.iter().find(|e| e.label >= model.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "example {} has label {} but the model has {} classes",
            e.id, e.label, model.num_classes
        )));
    }
    let mut params = init;
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamSet<F>, MetricsReport)> = None;
    let (mut run_loss, mut run_n) = (0.0, 0usize);
    let mut run_preds = Vec::new();
    let mut run_labels = Vec::new();
    let mut step = 0;
    let mut epoch = 0u64;

    let checkpoint = |step: usize,
                      params: &ParamSet<F>,
                      run_loss: f64,
                      run_n: usize,
                      preds: &mut Vec<usize>,
                      labels: &mut Vec<usize>,
                      log: &mut Vec<LogRow>,
                      best: &mut Option<(f64, usize, ParamSet<F>, MetricsReport)>|
     -> Result<()> {
        if run_n > 0 {
            let m = MetricsReport::from_confusion(&confusion(preds, labels, model.num_classes)?)?;
            log.push(LogRow {
                step,
                split: "train".into(),
                loss: run_loss / run_n as f64,
                wa: m.wa,
                ua: m.ua,
            });
        }
        preds.clear();
        labels.clear();
        if !holdout.is_empty() {
            let ev = evaluate(model, params, holdout, cfg.batch_size.max(32))?;
            log.push(LogRow {
                step,
                split: "holdout".into(),
                loss: ev.loss,
                wa: ev.report.wa,
                ua: ev.report.ua,
            });
            if best.as_ref().is_none_or(|b| ev.report.wa > b.0) {
                *best = Some((ev.report.wa, step, params.clone(), ev.report));
            }
        }
        Ok(())
    };

    checkpoint(0, &params, 0.0, 0, &mut run_preds, &mut run_labels, &mut log, &mut best)?;
    'outer: while step < cfg.max_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch]));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let seqs = idx
                .iter()
                .map(|&i| {
                    let e = &train[i];
                    if cfg.augment.enabled {
                        let mut r = ChaCha8Rng::seed_from_u64(augment_seed(cfg.seed, &e.id, epoch));
                        augment_features(&e.features, &cfg.augment, &mut r)
                    } else {
                        Ok(e.features.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FeatureSequence> = seqs.iter().collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let (x, lengths) = crate::model::pad_batch::<F>(&refs)?;

            let mut tape = Tape::new();
            let (loss, fwd) =
                batch_loss(&mut tape, model, &params, &x, &lengths, &labels).map_err(|e| nan_context(e, step + 1))?;
            let loss_value = tape.value(loss).data()[0].to_f64().unwrap();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", step + 1)));
            }
            let c = model.num_classes;
            for row in tape.value(fwd.logits).data().chunks(c) {
                let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
                run_preds.push(argmax(&row));
            }
            run_labels.extend_from_slice(&labels);
            let grads = tape.grad_all(loss).map_err(|e| nan_context(e, step + 1))?;
            let (grads, _) = clip_global_norm(&grads, cfg.clip_norm)?;
            adam.step(&mut params, &grads, cfg.lr)?;
            if let Some((name, _)) = params.iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::NonFinite(format!("parameter {name} after step {}", step + 1)));
            }
            step += 1;
            run_loss += loss_value;
            run_n += 1;
            if step % cfg.eval_interval == 0 || step == cfg.max_steps {
                checkpoint(
                    step,
                    &params,
                    run_loss,
                    run_n,
                    &mut run_preds,
                    &mut run_labels,
                    &mut log,
                    &mut best,
                )?;
                run_loss = 0.0;
                run_n = 0;
            }
            if step >= cfg.max_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }

    let (params, best_step, best_holdout) = match best {
        Some((_, s, p, r)) => (p, s, Some(r)),
        None => (params, step, None),
    };
    Ok(TrainOutput {
        params: params.cast(),
        best_step,
        best_holdout,
        log,
        steps: step,
    })
}

fn nan_context(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at training step {step}")),
        other => other,
    }
}

/// Deterministically splits `0..n` into (train, holdout) with
/// `round(fraction · n)` holdout items.
pub fn split_holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3])));
    let k = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut holdout = order[..k].to_vec();
    let mut rest = order[k..].to_vec();
    holdout.sort_unstable();
    rest.sort_unstable();
    (rest, holdout)
}

/// One cross-validation fold: example indices plus the held-out speakers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub test_speakers: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Leave-one-speaker-out folds. With `groups = Some(k)` speakers are dealt
/// round-robin into `k` groups and each group is held out once.
pub fn loso_folds(corpus: &Corpus, groups: Option<usize>) -> Result<Vec<Fold>> {
    let speakers = corpus.speakers();
    if speakers.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-speaker-out needs >= 2 speakers, found {}",
            speakers.len()
        )));
    }
    let k = groups.unwrap_or(speakers.len());
    if k < 2 || k > speakers.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} speaker groups from {} speakers",
            speakers.len()
        )));
    }
    Ok((0..k)
        .map(|g| {
            let held: Vec<String> = speakers.iter().skip(g).step_by(k).cloned().collect();
            let (test, train) = (0..corpus.examples.len()).partition(|&i| held.contains(&corpus.examples[i].speaker));
            Fold {
                test_speakers: held,
                train,
                test,
            }
        })
        .collect())
}

/// Speaker-agnostic `k`-fold split with a seeded shuffle.
pub fn random_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("cannot make {k} folds of {n} examples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4])));
    Ok((0..k)
        .map(|f| {
            let mut test: Vec<usize> = order.iter().copied().skip(f).step_by(k).collect();
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            Fold {
                test_speakers: Vec::new(),
                train,
                test,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldReport {
    pub test_speakers: Vec<String>,
    pub test_size: usize,
    pub best_step: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    /// Metrics over the pooled predictions of every fold.
    pub pooled: MetricsReport,
    pub mean_fold_wa: f64,
    pub mean_fold_ua: f64,
}

/// Trains on `train_idx` (checkpoint chosen on a holdout carved from it) and
/// scores the chosen checkpoint on `test_idx`.
pub fn train_and_test(
    corpus: &Corpus,
    train_idx: &[usize],
    test_idx: &[usize],
    model: &DecoderConfig,
    cfg: &TrainConfig,
) -> Result<(TrainOutput, Evaluation)> {
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Empty("empty train or test split".into()));
    }
    let (tr, ho) = split_holdout(train_idx.len(), cfg.holdout_fraction, cfg.seed);
    let pick =
        |ix: &[usize]| -> Vec<SentimentExample> { ix.iter().map(|&i| corpus.examples[train_idx[i]].clone()).collect() };
    let out = train(model, &pick(&tr), &pick(&ho), cfg)?;
    let test: Vec<SentimentExample> = test_idx.iter().map(|&i| corpus.examples[i].clone()).collect();
    let ev = evaluate(model, &out.params, &test, 64)?;
    Ok((out, ev))
}

/// Trains and tests one model per fold.
pub fn cross_validate(corpus: &Corpus, folds: &[Fold], model: &DecoderConfig, cfg: &TrainConfig) -> Result<CvReport> {
    if folds.is_empty() {
        return Err(Error::Empty("no folds".into()));
    }
    let mut pooled = ConfusionMatrix::new(corpus.num_classes());
    let mut reports = Vec::new();
    for (fi, fold) in folds.iter().enumerate() {
        let fold_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, &[5, fi as u64]),
            ..cfg.clone()
        };
        let (out, ev) = train_and_test(corpus, &fold.train, &fold.test, model, &fold_cfg).map_err(|e| match e {
            Error::Empty(m) => Error::Empty(format!("fold {fi}: {m}")),
            e => e,
        })?;
        log::info!(
            "fold {fi} ({}): WA {:.2} UA {:.2}",
            fold.test_speakers.join(","),
            ev.report.wa,
            ev.report.ua
        );
        pooled.merge(&ev.confusion)?;
        reports.push(FoldReport {
            test_speakers: fold.test_speakers.clone(),
            test_size: fold.test.len(),
            best_step: out.best_step,
            metrics: ev.report,
        });
    }
    let n = reports.len() as f64;
    Ok(CvReport {
        mean_fold_wa: reports.iter().map(|r| r.metrics.wa).sum::<f64>() / n,
        mean_fold_ua: reports.iter().map(|r| r.metrics.ua).sum::<f64>() / n,
        folds: reports,
        pooled: MetricsReport::from_confusion(&pooled)?,
    })
}

/// Leave-one-speaker-out cross-validation.
pub fn loso_cv(corpus: &Corpus, groups: Option<usize>, model: &DecoderConfig, cfg: &TrainConfig) -> Result<CvReport> {
    cross_validate(corpus, &loso_folds(corpus, groups)?, model, cfg)
}

/// How each ablation setting is scored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Protocol {
    /// One seeded train/test split with the given test fraction.
    Split { test_fraction: f64 },
    /// Leave-one-speaker-out, optionally over `k` speaker groups.
    Loso { groups: Option<usize> },
}

/// One row of the ablation table: medians over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub variant: Variant,
    pub augment: bool,
    pub wa: f64,
    pub ua: f64,
    pub wa_per_seed: Vec<f64>,
    pub ua_per_seed: Vec<f64>,
}

/// The four settings of the ablation table, in report order.
pub fn ablation_settings() -> [(&'static str, Variant, bool); 4] {
    [
        ("rnn_attn + SpecAugment", Variant::RnnAttn, true),
        ("mlp_pool", Variant::MlpPool, true),
        ("rnn_pool", Variant::RnnPool, true),
        ("rnn_attn - SpecAugment", Variant::RnnAttn, false),
    ]
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains every ablation setting once per seed. `base` supplies everything
/// but the variant; `cfg.augment` is the policy used by the `+` rows.
pub fn run_ablation(
    corpus: &Corpus,
    base: &DecoderConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    protocol: Protocol,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let split = match protocol {
        Protocol::Split { test_fraction } => Some(split_holdout(
            corpus.examples.len(),
            test_fraction,
            derive_seed(cfg.seed, &[6]),
        )),
        Protocol::Loso { .. } => None,
    };
    let mut rows = Vec::new();
    for (name, variant, augment) in ablation_settings() {
        let model = DecoderConfig {
            variant,
            ..base.clone()
        };
        let (mut was, mut uas) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let run_cfg = TrainConfig {
                seed,
                augment: if augment {
                    cfg.augment.clone()
                } else {
                    SpecAugmentPolicy::disabled()
                },
                ..cfg.clone()
            };
            let report = match (&split, protocol) {
                (Some((train_idx, test_idx)), _) => {
                    train_and_test(corpus, train_idx, test_idx, &model, &run_cfg)?.1.report
                }
                (None, Protocol::Loso { groups }) => loso_cv(corpus, groups, &model, &run_cfg)?.pooled,
                _ => unreachable!(),
            };
            log::info!("{name} seed {seed}: WA {:.2} UA {:.2}", report.wa, report.ua);
            was.push(report.wa);
            uas.push(report.ua);
        }
        rows.push(AblationRow {
            name: name.to_string(),
            variant,
            augment,
            wa: median(&was),
            ua: median(&uas),
            wa_per_seed: was,
            ua_per_seed: uas,
        });
    }
    Ok(rows)
}

/// Plain-text table with one row per setting and WA/UA columns.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(0)
        .max("Decoder".len());
    let mut out = format!("{:<width$}  {:>6}  {:>6}\n", "Decoder", "WA", "UA");
    for r in rows {
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}", r.name, fmt_pct(r.wa), fmt_pct(r.ua));
    }
    out
}
