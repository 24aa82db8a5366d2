//! Synthetic sentiment corpora with planted, temporally localised class cues.
//!
//! Every utterance is Gaussian noise plus a per-speaker offset. The class is
//! carried only by an `L`-frame span where the class signature vector is
//! added, so a model has to find the span to recover the label. Utterances
//! are tiled by 3–8 frame pseudo-words; the word overlapping the cue most is
//! the one a good attention map should light up.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{read_features, write_features, FeatureSequence};
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// One aligned word, covering frames `start..end`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub token: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentimentExample {
    pub id: String,
    pub features: FeatureSequence,
    pub label: usize,
    pub speaker: String,
    pub alignment: Option<Vec<Word>>,
    /// Ground-truth cue frames `start..end`.
    pub cue_span: Option<(usize, usize)>,
}

impl SentimentExample {
    /// Index of the word with the largest overlap with the cue span
    /// (earliest on ties).
    pub fn cue_word(&self) -> Option<usize> {
        let (cs, ce) = self.cue_span?;
        let words = self.alignment.as_ref()?;
        let overlap = |w: &Word| w.end.min(ce).saturating_sub(w.start.max(cs));
        let best = words
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| overlap(a).cmp(&overlap(b)).then(ib.cmp(ia)))?;
        (overlap(best.1) > 0).then_some(best.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub examples: Vec<SentimentExample>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            class_names: self.class_names.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// Distinct speakers in first-appearance order.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.examples {
            if !out.contains(&e.speaker) {
                out.push(e.speaker.clone());
            }
        }
        out
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.features.dim())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_examples: usize,
    pub num_classes: usize,
    /// Defaults depend on the class count (see [`default_class_names`]).
    pub class_names: Option<Vec<String>>,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub cue_len: usize,
    pub cue_amplitude: f64,
    pub noise: f64,
    pub num_speakers: usize,
    /// Norm of each speaker's constant offset vector.
    pub speaker_offset: f64,
    /// Norm of a per-speaker, per-class perturbation of the cue signature.
    pub speaker_cue_jitter: f64,
    /// Class priors; uniform when absent.
    pub priors: Option<Vec<f64>>,
    /// Seconds per frame (encoder rate).
    pub frame_period: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_examples: 6000,
            num_classes: 3,
            class_names: None,
            dim: 64,
            min_len: 20,
            max_len: 100,
            cue_len: 5,
            cue_amplitude: 1.0,
            noise: 0.5,
            num_speakers: 10,
            speaker_offset: 0.5,
            speaker_cue_jitter: 0.0,
            priors: None,
            frame_period: 0.08,
        }
    }
}

/// Class priors of the imbalanced three-way conversational preset
/// (neutral, positive, negative).
pub const CONVERSATIONAL_PRIORS: [f64; 3] = [0.526, 0.304, 0.170];

pub fn default_class_names(c: usize) -> Vec<String> {
    match c {
        3 => ["neutral", "positive", "negative"].map(String::from).to_vec(),
        4 => ["happy", "neutral", "sad", "angry"].map(String::from).to_vec(),
        _ => (0..c).map(|i| format!("class{i}")).collect(),
    }
}

impl SynthConfig {
    /// Longer utterances (50–100 frames) with the cue anywhere, so the
    /// class evidence is far from both ends.
    pub fn long_range() -> Self {
        Self {
            min_len: 50,
            max_len: 100,
            ..Self::default()
        }
    }

    /// Three classes with imbalanced conversational priors.
    pub fn conversational() -> Self {
        Self {
            priors: Some(CONVERSATIONAL_PRIORS.to_vec()),
            ..Self::default()
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| default_class_names(self.num_classes))
    }

    pub fn priors(&self) -> Vec<f64> {
        self.priors
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.num_classes as f64; self.num_classes])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("synth: {m}")));
        if self.num_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.class_names().len() != self.num_classes {
            return bad("class_names length differs from num_classes".into());
        }
        if self.dim == 0 || self.num_speakers == 0 {
            return bad("dim and num_speakers must be >= 1".into());
        }
        if !(1..=self.min_len).contains(&self.cue_len) || self.min_len > self.max_len {
            return bad(format!(
                "need 1 <= cue_len ({}) <= min_len ({}) <= max_len ({})",
                self.cue_len, self.min_len, self.max_len
            ));
        }
        if self.min_len < 3 {
            return bad("min_len must be >= 3 so words can tile the utterance".into());
        }
        if !(self.noise >= 0.0 && self.cue_amplitude >= 0.0 && self.speaker_offset >= 0.0)
            || !(self.speaker_cue_jitter >= 0.0)
        {
            return bad("amplitudes must be >= 0".into());
        }
        if !(self.frame_period > 0.0) {
            return bad("frame_period must be > 0".into());
        }
        let priors = self.priors();
        if priors.len() != self.num_classes
            || priors.iter().any(|&p| !(p >= 0.0))
            || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::InvalidArgument(format!(
                "invalid priors {priors:?}: need {} non-negative values summing to 1",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// A generated corpus plus the hidden generative parameters.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub corpus: Corpus,
    /// Class signature vectors, unit norm scaled by the cue amplitude.
    pub signatures: Vec<Vec<f32>>,
    pub speaker_offsets: Vec<Vec<f32>>,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / n * norm) as f32).collect()
}

/// Pseudo-word segments of 3–8 frames tiling `0..len`.
fn tile_words(rng: &mut ChaCha8Rng, len: usize) -> Vec<Word> {
    let mut words = Vec::new();
    let mut start = 0;
    while start < len {
        let remaining = len - start;
        let mut w = if remaining <= 8 {
            remaining
        } else {
            rng.random_range(3..=8)
        };
        if remaining - w < 3 && remaining - w > 0 {
            // leave no fragment shorter than 3 frames
            w = if remaining <= 8 { remaining } else { remaining - 3 };
        }
        words.push(Word {
            token: format!("w{}", words.len()),
            start,
            end: start + w,
        });
        start += w;
    }
    words
}

fn sample_class(rng: &mut ChaCha8Rng, priors: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    priors.len() - 1
}

/// Deterministically generates a corpus from `cfg` and `seed`.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut global = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let signatures: Vec<Vec<f32>> = (0..cfg.num_classes)
        .map(|_| random_direction(&mut global, cfg.dim, cfg.cue_amplitude))
        .collect();
    let speaker_offsets: Vec<Vec<f32>> = (0..cfg.num_speakers)
        .map(|_| random_direction(&mut global, cfg.dim, cfg.speaker_offset))
        .collect();
    let jitter: Vec<Vec<Vec<f32>>> = (0..cfg.num_speakers)
        .map(|_| {
            (0..cfg.num_classes)
                .map(|_| random_direction(&mut global, cfg.dim, cfg.speaker_cue_jitter))
                .collect()
        })
        .collect();
    let priors = cfg.priors();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let width = (cfg.num_examples.max(1) - 1).to_string().len().max(5);

    let examples = (0..cfg.num_examples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, i as u64]));
            let label = sample_class(&mut rng, &priors);
            let speaker = i % cfg.num_speakers;
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let cue_start = rng.random_range(0..=len - cfg.cue_len);
            let mut values: Vec<f32> = (0..len * cfg.dim).map(|_| noise.sample(&mut rng) as f32).collect();
            for (t, frame) in values.chunks_mut(cfg.dim).enumerate() {
                for (j, v) in frame.iter_mut().enumerate() {
                    *v += speaker_offsets[speaker][j];
                    if (cue_start..cue_start + cfg.cue_len).contains(&t) {
                        *v += signatures[label][j] + jitter[speaker][label][j];
                    }
                }
            }
            let alignment = tile_words(&mut rng, len);
            Ok(SentimentExample {
                id: format!("utt{i:0width$}"),
                features: FeatureSequence::new(len, cfg.dim, values, cfg.frame_period)?,
                label,
                speaker: format!("spk{speaker:02}"),
                alignment: Some(alignment),
                cue_span: Some((cue_start, cue_start + cfg.cue_len)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SynthOutput {
        corpus: Corpus {
            class_names: cfg.class_names(),
            examples,
        },
        signatures,
        speaker_offsets,
    })
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// One manifest line. Feature paths are relative to the manifest's
/// directory unless absolute.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: usize,
    pub speaker: String,
    pub cue_span: Option<(usize, usize)>,
    pub alignment: Option<Vec<Word>>,
}

fn alignment_json(words: &Option<Vec<Word>>) -> String {
    match words {
        None => "null".into(),
        Some(ws) => {
            let triples: Vec<(&str, usize, usize)> = ws.iter().map(|w| (w.token.as_str(), w.start, w.end)).collect();
            serde_json::to_string(&triples).expect("serialisable")
        }
    }
}

/// Writes `features/<id>.asrf` files and a tab-separated manifest into
/// `dir`; returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut out = String::new();
    for ex in &corpus.examples {
        let rel = PathBuf::from("features").join(format!("{}.asrf", ex.id));
        write_features(&ex.features, &dir.join(&rel))?;
        let (cs, ce) = match ex.cue_span {
            Some((s, e)) => (s.to_string(), e.to_string()),
            None => ("-".into(), "-".into()),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            rel.display(),
            corpus.class_names[ex.label],
            ex.speaker,
            cs,
            ce,
            alignment_json(&ex.alignment)
        ));
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Parses a manifest, checking class names and that feature files exist.
pub fn read_manifest(path: &Path, class_names: &[String]) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(perr(format!("expected 6 tab-separated fields, found {}", cols.len())));
        }
        let label = class_names.iter().position(|c| c == cols[1]).ok_or_else(|| {
            perr(format!(
                "unknown class {:?} (known: {})",
                cols[1],
                class_names.join(", ")
            ))
        })?;
        let cue_span = match (cols[3], cols[4]) {
            ("-", "-") => None,
            (s, e) => {
                let s: usize = s.parse().map_err(|_| perr(format!("bad cue start {s:?}")))?;
                let e: usize = e.parse().map_err(|_| perr(format!("bad cue end {e:?}")))?;
                if e <= s {
                    return Err(perr(format!("empty cue span {s}..{e}")));
                }
                Some((s, e))
            }
        };
        let alignment = match cols[5] {
            "null" | "-" | "" => None,
            json => {
                let triples: Vec<(String, usize, usize)> =
                    serde_json::from_str(json).map_err(|e| perr(format!("bad alignment JSON: {e}")))?;
                Some(
                    triples
                        .into_iter()
                        .map(|(token, start, end)| Word { token, start, end })
                        .collect(),
                )
            }
        };
        let rel = PathBuf::from(cols[0]);
        let full = if rel.is_absolute() { rel } else { base.join(rel) };
        if !full.is_file() {
            return Err(perr(format!("feature file {} does not exist", full.display())));
        }
        records.push(ManifestRecord {
            path: full,
            label,
            speaker: cols[2].to_string(),
            cue_span,
            alignment,
        });
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("manifest {} has no records", path.display())));
    }
    Ok(records)
}

/// Reads a manifest and all referenced feature files.
pub fn load_corpus(path: &Path, class_names: &[String]) -> Result<Corpus> {
    let records = read_manifest(path, class_names)?;
    let examples = records
        .into_iter()
        .map(|r| {
            let features = read_features(&r.path)?;
            let t = features.len();
            if let Some((_, e)) = r.cue_span {
                if e > t {
                    return Err(Error::format(
                        &r.path,
                        format!("cue span ends at {e} beyond {t} frames"),
                    ));
                }
            }
            if let Some(ws) = &r.alignment {
                if ws.iter().any(|w| w.end > t || w.start > w.end) {
                    return Err(Error::format(&r.path, "alignment span outside the utterance"));
                }
            }
            Ok(SentimentExample {
                id: r
                    .path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                features,
                label: r.label,
                speaker: r.speaker,
                alignment: r.alignment,
                cue_span: r.cue_span,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        class_names: class_names.to_vec(),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_examples: 60,
            dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn words_tile_each_utterance() {
        let out = generate(&small(), 5).unwrap();
        for ex in &out.corpus.examples {
            let ws = ex.alignment.as_ref().unwrap();
            assert_eq!(ws[0].start, 0);
            assert_eq!(ws.last().unwrap().end, ex.features.len());
            for pair in ws.windows(2) {
                assert_eq!(pair[0].end, pair[1].start);
            }
            for w in ws {
                assert!((3..=10).contains(&(w.end - w.start)), "{w:?}");
            }
            let (cs, ce) = ex.cue_span.unwrap();
            assert_eq!(ce - cs, 5);
            assert!(ce <= ex.features.len());
            assert!(ex.cue_word().is_some());
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&small(), 11).unwrap();
        let b = generate(&small(), 11).unwrap();
        assert_eq!(a.corpus, b.corpus);
        let c = generate(&small(), 12).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn speakers_are_round_robin() {
        let cfg = SynthConfig {
            num_examples: 23,
            num_speakers: 4,
            ..small()
        };
        let out = generate(&cfg, 1).unwrap();
        let counts: Vec<usize> = out
            .corpus
            .speakers()
            .iter()
            .map(|s| out.corpus.examples.iter().filter(|e| &e.speaker == s).count())
            .collect();
        assert_eq!(counts.len(), 4);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn invalid_priors_are_rejected() {
        let cfg = SynthConfig {
            priors: Some(vec![0.5, 0.6, -0.1]),
            ..small()
        };
        assert!(matches!(generate(&cfg, 0), Err(Error::InvalidArgument(_))));
        let cfg = SynthConfig {
            priors: Some(vec![0.5, 0.5]),
            ..small()
        };
        assert!(generate(&cfg, 0).is_err());
    }

    #[test]
    fn cue_word_prefers_largest_overlap() {
        let ex = SentimentExample {
            id: "x".into(),
            features: FeatureSequence::new(12, 1, vec![0.0; 12], 0.08).unwrap(),
            label: 0,
            speaker: "s".into(),
            alignment: Some(vec![
                Word {
                    token: "a".into(),
                    start: 0,
                    end: 4,
                },
                Word {
                    token: "b".into(),
                    start: 4,
                    end: 8,
                },
                Word {
                    token: "c".into(),
                    start: 8,
                    end: 12,
                },
            ]),
            cue_span: Some((3, 8)),
        };
        assert_eq!(ex.cue_word(), Some(1));
    }
}
