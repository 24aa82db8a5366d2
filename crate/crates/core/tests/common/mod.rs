//! Property checks shared by the proptest suites and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechsent::augment::{apply_policy, augment_features, SpecAugmentPolicy};
use speechsent::encoder::FeatureSequence;
use speechsent::model::{decode, decode_batch, init_params, DecoderConfig, Variant};
use speechsent::numerics::Pooling;
use speechsent::synthcorpus::{SentimentExample, Word};

pub const MASK: f32 = -7.5;

/// Values in `[1, 2)`, so no input cell equals `MASK`.
pub fn positive_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> FeatureSequence {
    let v = (0..t * d).map(|_| rng.random_range(1.0f32..2.0)).collect();
    FeatureSequence::new(t, d, v, 0.08).unwrap()
}

pub fn random_policy(rng: &mut ChaCha8Rng, d: usize, warp: bool) -> SpecAugmentPolicy {
    SpecAugmentPolicy {
        enabled: true,
        warp_w: if warp { rng.random_range(0..6) } else { 0 },
        freq_f: rng.random_range(0..=d),
        freq_masks: rng.random_range(0..3),
        time_t: rng.random_range(0..40),
        time_p: rng.random_range(0.0..=1.0),
        time_masks: rng.random_range(0..3),
        mask_value: MASK,
    }
}

/// One randomized case of the SpecAugment invariants.
#[allow(clippy::needless_range_loop)]
pub fn augment_case(case_seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let (t, d) = (rng.random_range(1..60), rng.random_range(1..12));
    let seq = positive_seq(&mut rng, t, d);
    let aug_seed = rng.random();

    // masking only: every cell is untouched or inside a full masked band
    let policy = random_policy(&mut rng, d, false);
    let out = augment_features(&seq, &policy, &mut ChaCha8Rng::seed_from_u64(aug_seed)).map_err(|e| e.to_string())?;
    if (out.len(), out.dim()) != (t, d) {
        return Err(format!("shape changed to {}x{}", out.len(), out.dim()));
    }
    let row_masked: Vec<bool> = (0..t).map(|i| out.frame(i).iter().all(|&v| v == MASK)).collect();
    let col_masked: Vec<bool> = (0..d).map(|j| (0..t).all(|i| out.frame(i)[j] == MASK)).collect();
    for i in 0..t {
        for j in 0..d {
            let (a, b) = (seq.frame(i)[j], out.frame(i)[j]);
            if row_masked[i] || col_masked[j] {
                if b != MASK {
                    return Err(format!("masked cell ({i},{j}) holds {b}"));
                }
            } else if a.to_bits() != b.to_bits() {
                return Err(format!("unmasked cell ({i},{j}) changed {a} -> {b}"));
            }
        }
    }
    let cols = col_masked.iter().filter(|&&m| m).count();
    if cols > policy.freq_f * policy.freq_masks && cols < d {
        return Err(format!(
            "{cols} bins masked, bound {}",
            policy.freq_f * policy.freq_masks
        ));
    }
    let cap = speechsent::augment::time_mask_cap(t, policy.time_t, policy.time_p);
    let rows = row_masked.iter().filter(|&&m| m).count();
    if rows > cap * policy.time_masks && cols < d {
        return Err(format!("{rows} frames masked, bound {}", cap * policy.time_masks));
    }

    // zero widths leave the sequence bit-identical
    let zero = SpecAugmentPolicy {
        warp_w: 0,
        freq_f: 0,
        time_t: 0,
        ..policy.clone()
    };
    if augment_features(&seq, &zero, &mut rng).map_err(|e| e.to_string())? != seq {
        return Err("zero-width policy changed the input".into());
    }

    // full policy: seeded determinism and untouched metadata
    let full = random_policy(&mut rng, d, true);
    let example = SentimentExample {
        id: "x".into(),
        features: seq.clone(),
        label: 2,
        speaker: "spk03".into(),
        alignment: Some(vec![Word {
            token: "w0".into(),
            start: 0,
            end: t,
        }]),
        cue_span: Some((0, 1)),
    };
    let a = apply_policy(&example, &full, &mut ChaCha8Rng::seed_from_u64(aug_seed)).map_err(|e| e.to_string())?;
    let b = apply_policy(&example, &full, &mut ChaCha8Rng::seed_from_u64(aug_seed)).map_err(|e| e.to_string())?;
    if a != b {
        return Err("same seed gave different augmentations".into());
    }
    if (a.label, &a.speaker, &a.alignment, a.cue_span, &a.id)
        != (2, &example.speaker, &example.alignment, Some((0, 1)), &example.id)
    {
        return Err("metadata changed".into());
    }
    if (a.features.len(), a.features.dim(), a.features.frame_period()) != (t, d, 0.08) {
        return Err("augmented shape changed".into());
    }
    // warped values stay inside each bin's range or equal the mask
    for j in 0..d {
        let col = (0..t).map(|i| seq.frame(i)[j]);
        let (lo, hi) = col.fold((f32::MAX, f32::MIN), |(l, h), v| (l.min(v), h.max(v)));
        for i in 0..t {
            let v = a.features.frame(i)[j];
            if v != MASK && !(lo - 1e-5..=hi + 1e-5).contains(&v) {
                return Err(format!("warped value {v} outside [{lo}, {hi}]"));
            }
        }
    }
    Ok(())
}

/// Decoding a sequence alone and inside a padded batch must agree.
pub fn padding_case(case_seed: u64, variant: Variant) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let cfg = DecoderConfig {
        variant,
        pooling: [Pooling::Mean, Pooling::Max, Pooling::Last][rng.random_range(0..3)],
        input_dim: 16,
        lstm_units: 12,
        heads: 4,
        head_dim: 6,
        mlp_hidden: vec![24, 24],
        num_classes: 3,
    };
    let params = init_params(&cfg, rng.random()).map_err(|e| e.to_string())?;
    let b = rng.random_range(2..6);
    let seqs: Vec<FeatureSequence> = (0..b)
        .map(|_| {
            let t = rng.random_range(1..40);
            positive_seq(&mut rng, t, 16)
        })
        .collect();
    let refs: Vec<&FeatureSequence> = seqs.iter().collect();
    let batched = decode_batch(&cfg, &params, &refs).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (s, out) in seqs.iter().zip(&batched) {
        let (emb, _) = decode(s, &cfg, &params).map_err(|e| e.to_string())?;
        for (x, y) in out.embedding.iter().zip(&emb) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// Random confusion matrix scored two ways: by the library, and by walking
/// an expanded, shuffled list of (label, prediction) pairs.
pub fn metrics_case(case_seed: u64) -> Result<(), String> {
    use rand::seq::SliceRandom;
    use speechsent::metrics::{confusion, ua, wa, ConfusionMatrix};

    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let c = rng.random_range(2..7);
    let rows: Vec<Vec<u64>> = (0..c)
        .map(|_| {
            let empty = rng.random_bool(0.15);
            (0..c)
                .map(|_| if empty { 0 } else { rng.random_range(0..20) })
                .collect()
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (y, row) in rows.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((y, p), n as usize));
        }
    }
    pairs.shuffle(&mut rng);
    if pairs.is_empty() {
        return Ok(());
    }
    let m = ConfusionMatrix::from_counts(rows).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    if confusion(&preds, &labels, c).map_err(|e| e.to_string())? != m {
        return Err("tallied matrix differs".into());
    }

    let correct = pairs.iter().filter(|(y, p)| y == p).count();
    let wa_ref = 100.0 * correct as f64 / pairs.len() as f64;
    let mut recalls = Vec::new();
    for class in 0..c {
        let of_class: Vec<&(usize, usize)> = pairs.iter().filter(|(y, _)| *y == class).collect();
        if !of_class.is_empty() {
            let hit = of_class.iter().filter(|(_, p)| *p == class).count();
            recalls.push(hit as f64 / of_class.len() as f64);
        }
    }
    let ua_ref = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
    let got_wa = wa(&m).map_err(|e| e.to_string())?;
    let got_ua = ua(&m).map_err(|e| e.to_string())?;
    if (got_wa - wa_ref).abs() > 1e-9 || (got_ua.percent - ua_ref).abs() > 1e-9 {
        return Err(format!("WA {got_wa} vs {wa_ref}, UA {} vs {ua_ref}", got_ua.percent));
    }
    if got_ua.excluded.len() != c - recalls.len() {
        return Err("wrong excluded classes".into());
    }
    Ok(())
}

/// Corpus with `speakers` speakers, tiny frames and a strong cue.
pub fn tiny_corpus(n: usize, speakers: usize, seed: u64) -> speechsent::synthcorpus::Corpus {
    let cfg = speechsent::synthcorpus::SynthConfig {
        num_examples: n,
        dim: 6,
        min_len: 6,
        max_len: 12,
        cue_len: 3,
        cue_amplitude: 2.0,
        num_speakers: speakers,
        ..speechsent::synthcorpus::SynthConfig::default()
    };
    speechsent::synthcorpus::generate(&cfg, seed).unwrap().corpus
}

/// LOSO folds cover every example exactly once as test data, never mix a
/// speaker across train and test, and hold out each speaker exactly once.
pub fn loso_case(speakers: usize) -> Result<(), String> {
    use speechsent::train::loso_folds;
    let corpus = tiny_corpus(5 * speakers + 3, speakers, speakers as u64);
    let folds = loso_folds(&corpus, None).map_err(|e| e.to_string())?;
    if folds.len() != speakers {
        return Err(format!("{} folds for {speakers} speakers", folds.len()));
    }
    let n = corpus.examples.len();
    let mut seen = vec![0usize; n];
    let mut held = Vec::new();
    for f in &folds {
        if f.train.len() + f.test.len() != n {
            return Err("fold does not partition the corpus".into());
        }
        for &i in &f.test {
            seen[i] += 1;
            if !f.test_speakers.contains(&corpus.examples[i].speaker) {
                return Err(format!("example {i} tested in the wrong fold"));
            }
        }
        if f.train
            .iter()
            .any(|&i| f.test_speakers.contains(&corpus.examples[i].speaker))
        {
            return Err("held-out speaker leaked into training".into());
        }
        held.extend(f.test_speakers.iter().cloned());
    }
    if seen.iter().any(|&c| c != 1) {
        return Err("some example is not tested exactly once".into());
    }
    held.sort();
    if held != corpus.speakers() {
        return Err("speakers not held out exactly once".into());
    }
    Ok(())
}
