//! PCM16 WAV loading and log-mel feature extraction.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub mel_bins: usize,
    pub fft_size: usize,
    pub log_floor: f64,
    /// Per-utterance mean/variance normalisation of each mel bin.
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            mel_bins: 80,
            fft_size: 512,
            log_floor: 1e-6,
            normalize: false,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("frontend: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be > 0");
        }
        if !(self.window_ms > self.hop_ms && self.hop_ms > 0.0) {
            return bad("need window_ms > hop_ms > 0");
        }
        if self.mel_bins == 0 {
            return bad("mel_bins must be >= 1");
        }
        if self.fft_size < self.window_samples() {
            return bad("fft_size shorter than the window");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be > 0");
        }
        Ok(())
    }
}

/// Reads a mono 16-bit PCM WAV file, scaling samples by 1/32768.
pub fn load_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected mono audio, found {} channels", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit PCM, found {:?} {} bits",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    if samples.len() != expected {
        return Err(Error::format(path, "truncated sample data"));
    }
    Ok(AudioBuffer {
        samples,
        sample_rate: spec.sample_rate,
    })
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        // hound reports short reads as synthetic io errors without an OS code
        hound::Error::IoError(io) if io.raw_os_error().is_none() => {
            Error::format(path, format!("truncated file: {io}"))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Writes mono PCM16; samples are clamped to [-1, 1).
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters spanning 0 Hz to Nyquist, as
/// `mel_bins` rows of `fft_size / 2 + 1` weights.
pub fn mel_filterbank(mel_bins: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_freqs = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;
    (0..mel_bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_freqs)
                .map(|k| {
                    let f = bin_hz(k);
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Number of frames for `n` samples: `1 + (n - win) / hop`.
pub fn frame_count(n: usize, win: usize, hop: usize) -> Option<usize> {
    (n >= win).then(|| 1 + (n - win) / hop)
}

/// Reusable log-mel extractor (window, filters and FFT plan built once).
pub struct LogMel {
    cfg: FrontendConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMel {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.window_samples();
        // periodic Hann
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let filters = mel_filterbank(cfg.mel_bins, cfg.fft_size, cfg.sample_rate);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn compute(&self, audio: &AudioBuffer) -> Result<FeatureSequence> {
        let cfg = &self.cfg;
        if audio.sample_rate != cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "audio is {} Hz, frontend expects {} Hz",
                audio.sample_rate, cfg.sample_rate
            )));
        }
        if let Some(i) = audio.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        let (win, hop) = (cfg.window_samples(), cfg.hop_samples());
        let frames = frame_count(audio.samples.len(), win, hop).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "audio has {} samples, shorter than one {win}-sample window",
                audio.samples.len()
            ))
        })?;
        let n_freqs = cfg.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut power = vec![0.0f64; n_freqs];
        let mut values = Vec::with_capacity(frames * cfg.mel_bins);
        for f in 0..frames {
            let start = f * hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < win {
                    Complex::new(audio.samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                values.push((e + cfg.log_floor).ln() as f32);
            }
        }
        if cfg.normalize {
            normalize_columns(&mut values, cfg.mel_bins);
        }
        FeatureSequence::new(frames, cfg.mel_bins, values, hop as f64 / cfg.sample_rate as f64)
    }
}

/// Log-mel features of `audio` (T frames × `mel_bins`).
pub fn log_mel(audio: &AudioBuffer, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    LogMel::new(cfg.clone())?.compute(audio)
}

fn normalize_columns(values: &mut [f32], dim: usize) {
    let rows = values.len() / dim;
    for j in 0..dim {
        let mean = (0..rows).map(|r| values[r * dim + j] as f64).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| (values[r * dim + j] as f64 - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        let inv = 1.0 / (var.sqrt() + 1e-8);
        for r in 0..rows {
            values[r * dim + j] = ((values[r * dim + j] as f64 - mean) * inv) as f32;
        }
    }
}
