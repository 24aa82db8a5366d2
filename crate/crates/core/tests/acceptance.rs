//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any gated criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechsent::augment::SpecAugmentPolicy;
use speechsent::encoder::{encode, init_encoder, read_features, write_features, EncoderConfig, FeatureSequence};
use speechsent::frontend::{log_mel, AudioBuffer, FrontendConfig};
use speechsent::metrics::{confusion, fmt_pct, ua, wa};
use speechsent::model::{gradient_check, init_params, DecoderConfig, Model, Variant};
use speechsent::numerics::{read_checkpoint, write_checkpoint};
use speechsent::synthcorpus::{generate, SentimentExample, SynthConfig};
use speechsent::train::{format_ablation_table, median, run_ablation, split_holdout, train, Protocol, TrainConfig};
use speechsent::visualize::{quantize_bins, word_attention, HeadSelect};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for variant in Variant::ALL {
        let cfg = DecoderConfig {
            variant,
            ..DecoderConfig::default()
        };
        match gradient_check(&cfg, 0, 120, 1e-5) {
            Ok(r) => {
                worst = worst.max(r.max_rel_err);
                parts.push(format!(
                    "{variant} {:.2e} over {} coords",
                    r.max_rel_err,
                    r.coords.len()
                ));
            }
            Err(e) => return outcome(false, format!("{variant}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(120),
        format!("{} in {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn metrics_arithmetic() -> Outcome {
    let cfg = SynthConfig {
        num_examples: 10_000,
        ..SynthConfig::conversational()
    };
    let labels = match generate(&cfg, 0) {
        Ok(out) => out.corpus.labels(),
        Err(e) => return outcome(false, e.to_string()),
    };
    let m = confusion(&vec![0; labels.len()], &labels, 3).unwrap();
    let (w, u) = (wa(&m).unwrap(), ua(&m).unwrap().percent);
    let failures: Vec<String> = (0..1000).filter_map(|s| common::metrics_case(s).err()).collect();
    outcome(
        fmt_pct(u) == "33.33" && (w - 52.6).abs() <= 1.0 && failures.is_empty(),
        format!(
            "constant-neutral WA {} UA {}; oracle mismatches {}/1000",
            fmt_pct(w),
            fmt_pct(u),
            failures.len()
        ),
    )
}

/// Trained criterion-3 model with its test split.
struct SeedRun {
    model: Model,
    test: Vec<SentimentExample>,
    wa: f64,
}

const LEARN_SEEDS: [u64; 3] = [0, 1, 2];
const LEARN_STEPS: usize = 5000;

fn learn_one(seed: u64) -> speechsent::Result<SeedRun> {
    let corpus = generate(&SynthConfig::default(), seed)?.corpus;
    let (train_pool, test) = corpus.examples.split_at(5000);
    let (tr_idx, ho_idx) = split_holdout(train_pool.len(), 0.1, seed);
    let pick = |ix: &[usize]| ix.iter().map(|&i| train_pool[i].clone()).collect::<Vec<_>>();
    let model_cfg = DecoderConfig::default();
    let cfg = TrainConfig {
        lr: 1e-3,
        max_steps: LEARN_STEPS,
        eval_interval: 250,
        seed,
        augment: SpecAugmentPolicy::default(),
        ..TrainConfig::default()
    };
    let out = train(&model_cfg, &pick(&tr_idx), &pick(&ho_idx), &cfg)?;
    let model = Model::new(model_cfg, out.params)?;
    let seqs: Vec<&FeatureSequence> = test.iter().map(|e| &e.features).collect();
    let preds = model.predict(&seqs, 64)?;
    let correct = test.iter().zip(&preds).filter(|(e, (c, _))| c.class == e.label).count();
    Ok(SeedRun {
        model,
        test: test.to_vec(),
        wa: 100.0 * correct as f64 / test.len() as f64,
    })
}

fn synthetic_learning(runs: &mut Vec<SeedRun>) -> Outcome {
    let start = Instant::now();
    let mut times = Vec::new();
    for seed in LEARN_SEEDS {
        let t = Instant::now();
        match learn_one(seed) {
            Ok(r) => runs.push(r),
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        }
        times.push(t.elapsed());
    }
    let was: Vec<f64> = runs.iter().map(|r| r.wa).collect();
    let med = median(&was);
    let slowest = times.iter().max().copied().unwrap_or_default();
    outcome(
        med >= 95.0 && slowest < Duration::from_secs(600),
        format!(
            "test WA per seed {:?}, median {}; {LEARN_STEPS} steps, slowest seed {:.0}s, total {:.0}s",
            was.iter().map(|w| fmt_pct(*w)).collect::<Vec<_>>(),
            fmt_pct(med),
            slowest.as_secs_f64(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn attention_localization(runs: &[SeedRun]) -> Outcome {
    if runs.is_empty() {
        return outcome(false, "no trained models");
    }
    let (mut correct, mut localized, mut top_bin) = (0usize, 0usize, 0usize);
    for run in runs {
        let seqs: Vec<&FeatureSequence> = run.test.iter().map(|e| &e.features).collect();
        let preds = match run.model.predict(&seqs, 64) {
            Ok(p) => p,
            Err(e) => return outcome(false, e.to_string()),
        };
        for (ex, (class, attn)) in run.test.iter().zip(&preds) {
            if class.class != ex.label {
                continue;
            }
            let Some(attn) = attn else {
                return outcome(false, "rnn_attn returned no attention map");
            };
            correct += 1;
            let mean = attn.head_mean();
            let (s, e) = ex.cue_span.expect("synthetic cue span");
            let mass: f64 = mean[s..e].iter().sum();
            let uniform = (e - s) as f64 / mean.len() as f64;
            localized += usize::from(mass >= 3.0 * uniform);
            let weights = word_attention(attn, ex.alignment.as_ref().expect("alignment"), HeadSelect::Mean).unwrap();
            let bins = quantize_bins(&weights);
            top_bin += usize::from(bins[ex.cue_word().expect("cue word")] == 2);
        }
    }
    let loc = 100.0 * localized as f64 / correct as f64;
    let bin = 100.0 * top_bin as f64 / correct as f64;
    outcome(
        loc >= 80.0 && bin >= 80.0,
        format!(
            "over {correct} correct utterances: cue mass >= 3x uniform in {}%, cue word in bin 2 in {}%",
            fmt_pct(loc),
            fmt_pct(bin)
        ),
    )
}

fn ablation_trend() -> Outcome {
    let synth = SynthConfig {
        num_examples: 3000,
        ..SynthConfig::long_range()
    };
    let corpus = match generate(&synth, 7) {
        Ok(o) => o.corpus,
        Err(e) => return outcome(false, e.to_string()),
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        max_steps: 400,
        eval_interval: 200,
        augment: SpecAugmentPolicy::default(),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let rows = match run_ablation(
        &corpus,
        &DecoderConfig::default(),
        &cfg,
        &[0, 1, 2, 3, 4],
        Protocol::Split { test_fraction: 0.2 },
    ) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    println!("{}", format_ablation_table(&rows).trim_end());
    let wa_of = |name: &str| rows.iter().find(|r| r.name == name).map_or(f64::NAN, |r| r.wa);
    let (attn, pool, mlp) = (wa_of("rnn_attn + SpecAugment"), wa_of("rnn_pool"), wa_of("mlp_pool"));
    let ordered = attn >= pool && pool >= mlp;
    outcome(
        true,
        format!(
            "report emitted (not gated); ordering rnn_attn >= rnn_pool >= mlp_pool {} ({} / {} / {}), {:.0}s",
            if ordered { "holds" } else { "does not hold" },
            fmt_pct(attn),
            fmt_pct(pool),
            fmt_pct(mlp),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn spec_augment_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let failures: Vec<String> = (0..1000)
        .filter_map(|_| common::augment_case(rng.random()).err())
        .collect();
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} of 1000 random cases failed{} in {:.2}s",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

fn padding_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for variant in Variant::ALL {
        for case in 0..100 {
            match common::padding_case(1000 * case + variant as u64, variant) {
                Ok(d) => worst = worst.max(d),
                Err(e) => return outcome(false, format!("{variant}: {e}")),
            }
        }
    }
    outcome(
        worst <= 1e-5,
        format!("max |batched - single| {worst:.2e} over 100 batches per variant"),
    )
}

fn shape_and_format_contracts() -> Outcome {
    let start = Instant::now();
    let cfg = EncoderConfig::default();
    let params = match init_encoder(&cfg, 0) {
        Ok(p) => p,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad_shapes = Vec::new();
    for t in 1..=200 {
        let x = common::positive_seq(&mut rng, t, cfg.input_dim);
        match encode(&x, &params) {
            Ok(y) if y.len() == t.div_ceil(8) && y.dim() == 1536 => {}
            Ok(y) => bad_shapes.push(format!("T={t}: {}x{}", y.len(), y.dim())),
            Err(e) => bad_shapes.push(format!("T={t}: {e}")),
        }
    }
    let encoder_time = start.elapsed();

    let dir = tempfile::tempdir().unwrap();
    let seq = common::positive_seq(&mut rng, 37, 1536);
    let fpath = dir.path().join("x.asrf");
    write_features(&seq, &fpath).unwrap();
    let feat_ok = read_features(&fpath).is_ok_and(|back| {
        back.len() == seq.len()
            && back
                .values()
                .iter()
                .zip(seq.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    });
    let mut ckpt_ok = true;
    for variant in Variant::ALL {
        let p = init_params(
            &DecoderConfig {
                variant,
                ..DecoderConfig::default()
            },
            3,
        )
        .unwrap();
        let cpath = dir.path().join(format!("{variant}.sntc"));
        write_checkpoint(&p, &cpath).unwrap();
        ckpt_ok &= read_checkpoint(&cpath).is_ok_and(|back| {
            back.iter().zip(p.iter()).all(|(a, b)| {
                a.0 == b.0
                    && a.1
                        .data()
                        .iter()
                        .zip(b.1.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            }) && back.len() == p.len()
        });
    }
    let loso_failures: Vec<String> = (2..=10).filter_map(|k| common::loso_case(k).err()).collect();
    outcome(
        bad_shapes.is_empty() && feat_ok && ckpt_ok && loso_failures.is_empty(),
        format!(
            "encoder ceil(T/8)x1536 for T=1..200 ({} mismatches, {:.1}s); ASRF round trip {}; checkpoint round trip {}; LOSO 2-10 speakers {} failures",
            bad_shapes.len(),
            encoder_time.as_secs_f64(),
            if feat_ok { "exact" } else { "BROKEN" },
            if ckpt_ok { "exact" } else { "BROKEN" },
            loso_failures.len()
        ),
    )
}

fn frontend_determinism() -> Outcome {
    let cfg = FrontendConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = AudioBuffer {
        samples: (0..16_000).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        sample_rate: 16_000,
    };
    let silence = AudioBuffer {
        samples: vec![0.0; 16_000],
        sample_rate: 16_000,
    };
    let (a, s) = match (log_mel(&noise, &cfg), log_mel(&silence, &cfg)) {
        (Ok(a), Ok(s)) => (a, s),
        (Err(e), _) | (_, Err(e)) => return outcome(false, e.to_string()),
    };
    let floor = (cfg.log_floor).ln() as f32;
    let constant = s.values().iter().all(|&v| v == floor);
    let repeat = log_mel(&noise, &cfg).is_ok_and(|b| b == a);
    outcome(
        (a.len(), a.dim()) == (98, 80) && constant && repeat,
        format!(
            "1 s -> {}x{}; silence constant ln(1e-6): {constant}; repeat identical: {repeat}",
            a.len(),
            a.dim()
        ),
    )
}

type Criterion<'a> = (&'static str, bool, Box<dyn FnOnce() -> Outcome + 'a>);

fn main() {
    let mut runs = Vec::new();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient correctness", true, Box::new(gradient_correctness)),
        ("2 metrics arithmetic", true, Box::new(metrics_arithmetic)),
        ("6 SpecAugment contract", true, Box::new(spec_augment_contract)),
        ("7 padding invariance", true, Box::new(padding_invariance)),
        ("8 shape/format contracts", true, Box::new(shape_and_format_contracts)),
        ("9 frontend determinism", true, Box::new(frontend_determinism)),
        ("3 synthetic learning", true, Box::new(|| synthetic_learning(&mut runs))),
    ];
    let mut failed = Vec::new();
    let mut report = |name: &str, gated: bool, o: Outcome| {
        println!(
            "{} criterion {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if gated && !o.pass {
            failed.push(name.to_string());
        }
    };
    for (name, gated, run) in criteria {
        let o = run();
        report(name, gated, o);
    }
    report("4 attention localization", true, attention_localization(&runs));
    report("5 ablation trend", false, ablation_trend());
    if failed.is_empty() {
        println!("acceptance: all gated criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
