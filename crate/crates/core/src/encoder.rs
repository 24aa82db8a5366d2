//! Frozen ASR-style encoder and the "ASRF" feature file format.
//!
//! The encoder is forward-only: its weights live in plain buffers, not in a
//! [`ParamSet`](crate::numerics::ParamSet), so nothing in the crate can put
//! them on a gradient tape. Output length is `ceil(T / 8)` for the default
//! three conv/pool macro layers.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::lstm_forward;

/// A `T × D` matrix of per-frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    len: usize,
    dim: usize,
    values: Vec<f32>,
    frame_period: f64,
}

impl FeatureSequence {
    pub fn new(len: usize, dim: usize, values: Vec<f32>, frame_period: f64) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature sequence must be non-empty, got {len}x{dim}"
            )));
        }
        if values.len() != len * dim {
            return Err(Error::Shape(format!(
                "{len}x{dim} features need {} values, got {}",
                len * dim,
                values.len()
            )));
        }
        if !(frame_period > 0.0 && frame_period.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "frame period {frame_period} must be > 0"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value at frame {}", i / dim)));
        }
        Ok(Self {
            len,
            dim,
            values,
            frame_period,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access for in-place transforms; length and dim stay fixed.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"ASRF";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + seq.values.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.len as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    out.extend_from_slice(&seq.frame_period.to_le_bytes());
    for v in &seq.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(buf: &[u8], path: &Path) -> Result<FeatureSequence> {
    if buf.len() < 24 {
        return Err(Error::format(path, "truncated header"));
    }
    if &buf[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected ASRF"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported feature file version {version}"),
        ));
    }
    let (len, dim) = (u32_at(8) as usize, u32_at(12) as usize);
    let frame_period = f64::from_le_bytes(buf[16..24].try_into().unwrap());
    let payload = &buf[24..];
    let expected = len
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "header extents overflow"))?;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureSequence::new(len, dim, values, frame_period).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&buf, path)
}

/// Where the bi-LSTM stack sits relative to the conv/pool macro layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderLayout {
    /// `macro_repeats × {conv, pool}` followed by the bi-LSTM layers.
    Stacked,
    /// Each macro layer is `{conv, pool, bi-LSTM layers}`.
    Interleaved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub conv_filters: usize,
    pub conv_width: usize,
    pub conv_stride: usize,
    pub pool_width: usize,
    pub pool_stride: usize,
    pub macro_repeats: usize,
    pub bilstm_layers: usize,
    pub bilstm_units: usize,
    pub projection_dim: usize,
    pub layout: EncoderLayout,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            conv_filters: 512,
            conv_width: 5,
            conv_stride: 1,
            pool_width: 2,
            pool_stride: 2,
            macro_repeats: 3,
            bilstm_layers: 3,
            bilstm_units: 512,
            projection_dim: 1536,
            layout: EncoderLayout::Stacked,
        }
    }
}

impl EncoderConfig {
    /// Total time reduction, `(conv_stride · pool_stride)^macro_repeats`.
    pub fn reduction(&self) -> usize {
        (self.conv_stride * self.pool_stride).pow(self.macro_repeats as u32)
    }

    /// Output frames for `t` input frames.
    pub fn output_len(&self, t: usize) -> usize {
        (0..self.macro_repeats).fold(t, |n, _| n.div_ceil(self.conv_stride).div_ceil(self.pool_stride))
    }

    pub fn output_dim(&self) -> usize {
        if self.bilstm_layers == 0 {
            self.conv_filters
        } else {
            self.projection_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("input_dim", self.input_dim),
            ("conv_filters", self.conv_filters),
            ("conv_width", self.conv_width),
            ("conv_stride", self.conv_stride),
            ("pool_width", self.pool_width),
            ("pool_stride", self.pool_stride),
            ("bilstm_units", self.bilstm_units),
            ("projection_dim", self.projection_dim),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("encoder.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    width: usize,
    in_dim: usize,
    out_dim: usize,
    /// `[width · in_dim, out_dim]`, tap-major.
    w: Vec<f32>,
    b: Vec<f32>,
}

#[derive(Clone, Debug)]
struct LstmWeights {
    w_ih: Vec<f32>,
    w_hh: Vec<f32>,
    b: Vec<f32>,
}

#[derive(Clone, Debug)]
struct BiLstmLayer {
    units: usize,
    fwd: LstmWeights,
    bwd: LstmWeights,
    /// `[2 · units, out_dim]`
    proj_w: Vec<f32>,
    proj_b: Vec<f32>,
    out_dim: usize,
}

enum Stage {
    Conv(usize),
    Pool,
    Lstm(usize),
}

/// Frozen encoder weights.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    config: EncoderConfig,
    convs: Vec<Conv>,
    lstms: Vec<BiLstmLayer>,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn init_lstm(rng: &mut ChaCha8Rng, in_dim: usize, units: usize) -> LstmWeights {
    let g4 = 4 * units;
    let mut b = uniform_vec(rng, g4, units);
    b[units..2 * units].iter_mut().for_each(|v| *v += 1.0);
    LstmWeights {
        w_ih: uniform_vec(rng, in_dim * g4, in_dim),
        w_hh: uniform_vec(rng, units * g4, units),
        b,
    }
}

/// Deterministic uniform(±1/√fan_in) initialisation; forget-gate biases
/// are shifted by +1.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::new();
    let mut lstms = Vec::new();
    let mut dim = cfg.input_dim;
    let mut add_lstms = |rng: &mut ChaCha8Rng, dim: &mut usize| {
        for _ in 0..cfg.bilstm_layers {
            let units = cfg.bilstm_units;
            let fwd = init_lstm(rng, *dim, units);
            let bwd = init_lstm(rng, *dim, units);
            lstms.push(BiLstmLayer {
                units,
                fwd,
                bwd,
                proj_w: uniform_vec(rng, 2 * units * cfg.projection_dim, 2 * units),
                proj_b: uniform_vec(rng, cfg.projection_dim, 2 * units),
                out_dim: cfg.projection_dim,
            });
            *dim = cfg.projection_dim;
        }
    };
    for _ in 0..cfg.macro_repeats {
        let fan_in = cfg.conv_width * dim;
        convs.push(Conv {
            width: cfg.conv_width,
            in_dim: dim,
            out_dim: cfg.conv_filters,
            w: uniform_vec(&mut rng, fan_in * cfg.conv_filters, fan_in),
            b: uniform_vec(&mut rng, cfg.conv_filters, fan_in),
        });
        dim = cfg.conv_filters;
        if cfg.layout == EncoderLayout::Interleaved {
            add_lstms(&mut rng, &mut dim);
        }
    }
    if cfg.layout == EncoderLayout::Stacked {
        add_lstms(&mut rng, &mut dim);
    }
    Ok(EncoderParams {
        config: cfg.clone(),
        convs,
        lstms,
    })
}

impl EncoderParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// SHA-256 over every weight, in a fixed order, as hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: &[f32]| {
            for x in v {
                h.update(x.to_le_bytes());
            }
        };
        for c in &self.convs {
            feed(&c.w);
            feed(&c.b);
        }
        for l in &self.lstms {
            for d in [&l.fwd, &l.bwd] {
                feed(&d.w_ih);
                feed(&d.w_hh);
                feed(&d.b);
            }
            feed(&l.proj_w);
            feed(&l.proj_b);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn stages(&self) -> Vec<Stage> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let mut lstm_idx = 0;
        let mut push_lstms = |out: &mut Vec<Stage>| {
            for _ in 0..cfg.bilstm_layers {
                out.push(Stage::Lstm(lstm_idx));
                lstm_idx += 1;
            }
        };
        for i in 0..cfg.macro_repeats {
            out.push(Stage::Conv(i));
            out.push(Stage::Pool);
            if cfg.layout == EncoderLayout::Interleaved {
                push_lstms(&mut out);
            }
        }
        if cfg.layout == EncoderLayout::Stacked {
            push_lstms(&mut out);
        }
        out
    }
}

/// Runs the frozen encoder over `input` (T × input_dim).
pub fn encode(input: &FeatureSequence, params: &EncoderParams) -> Result<FeatureSequence> {
    let cfg = &params.config;
    if input.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "encoder expects {}-dim input, got {}",
            cfg.input_dim,
            input.dim()
        )));
    }
    let mut t = input.len();
    let mut dim = input.dim();
    let mut x = input.values().to_vec();
    for stage in params.stages() {
        match stage {
            Stage::Conv(i) => {
                let c = &params.convs[i];
                let (y, t_out) = conv1d(&x, t, c, cfg.conv_stride);
                x = y;
                t = t_out;
                dim = c.out_dim;
            }
            Stage::Pool => {
                let (y, t_out) = max_pool(&x, t, dim, cfg.pool_width, cfg.pool_stride);
                x = y;
                t = t_out;
            }
            Stage::Lstm(i) => {
                let l = &params.lstms[i];
                x = bilstm_project(&x, t, l);
                dim = l.out_dim;
            }
        }
    }
    FeatureSequence::new(t, dim, x, input.frame_period() * params.config.reduction() as f64)
}

/// Same-padded 1-D convolution followed by ReLU.
fn conv1d(x: &[f32], t: usize, c: &Conv, stride: usize) -> (Vec<f32>, usize) {
    let t_out = t.div_ceil(stride);
    let half = c.width / 2;
    let k = c.width * c.in_dim;
    let mut cols = vec![0.0f32; t_out * k];
    for o in 0..t_out {
        let centre = o * stride;
        for tap in 0..c.width {
            let src = centre as isize + tap as isize - half as isize;
            if src >= 0 && (src as usize) < t {
                let s = src as usize;
                cols[o * k + tap * c.in_dim..o * k + (tap + 1) * c.in_dim]
                    .copy_from_slice(&x[s * c.in_dim..(s + 1) * c.in_dim]);
            }
        }
    }
    let mut y = vec![0.0f32; t_out * c.out_dim];
    for row in y.chunks_mut(c.out_dim) {
        row.copy_from_slice(&c.b);
    }
    <f32 as crate::numerics::Scalar>::gemm(t_out, k, c.out_dim, 1.0, &cols, false, &c.w, false, 1.0, &mut y);
    y.iter_mut().for_each(|v| *v = v.max(0.0));
    (y, t_out)
}

/// Max pooling; the trailing window is padded by repeating the last frame.
fn max_pool(x: &[f32], t: usize, dim: usize, width: usize, stride: usize) -> (Vec<f32>, usize) {
    let t_out = t.div_ceil(stride);
    let mut y = vec![f32::NEG_INFINITY; t_out * dim];
    for o in 0..t_out {
        for w in 0..width {
            let s = (o * stride + w).min(t - 1);
            for j in 0..dim {
                y[o * dim + j] = y[o * dim + j].max(x[s * dim + j]);
            }
        }
    }
    (y, t_out)
}

fn bilstm_project(x: &[f32], t: usize, l: &BiLstmLayer) -> Vec<f32> {
    let h = l.units;
    let run = |w: &LstmWeights, reverse| lstm_forward(x, &w.w_ih, &w.w_hh, &w.b, &[t], t, h, reverse, false).hidden;
    let (fwd, bwd) = (run(&l.fwd, false), run(&l.bwd, true));
    let mut cat = Vec::with_capacity(t * 2 * h);
    for i in 0..t {
        cat.extend_from_slice(&fwd[i * h..(i + 1) * h]);
        cat.extend_from_slice(&bwd[i * h..(i + 1) * h]);
    }
    let mut y = vec![0.0f32; t * l.out_dim];
    for row in y.chunks_mut(l.out_dim) {
        row.copy_from_slice(&l.proj_b);
    }
    <f32 as crate::numerics::Scalar>::gemm(t, 2 * h, l.out_dim, 1.0, &cat, false, &l.proj_w, false, 1.0, &mut y);
    y
}
