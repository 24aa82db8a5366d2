//! Sentiment decoders and the softmax classifier.
//!
//! Three decoders map a variable-length feature sequence to a fixed-length
//! embedding:
//!
//! * `mlp_pool`: a per-frame ReLU MLP followed by pooling over time;
//! * `rnn_pool`: a bi-LSTM whose concatenated outputs are pooled;
//! * `rnn_attn`: a bi-LSTM followed by multi-head attention with one
//!   learned query per head. Head `i` scores frame `t` as
//!   `q_i · (K_i h_t) / sqrt(d_a)`, takes a softmax over valid frames and
//!   returns the weighted sum of the value projections `V_i h_t`.
//!
//! Weights are stored input-major (`[in, out]`). The per-head key and value
//! matrices are stacked column-wise: columns `i*d_a..(i+1)*d_a` of
//! `attn.w_k` hold head `i`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{check_gradients, softmax_rows, GradCheckReport, ParamSet, Pooling, Scalar, Tape, Tensor, Var};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MlpPool,
    RnnPool,
    RnnAttn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MlpPool, Variant::RnnPool, Variant::RnnAttn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MlpPool => "mlp_pool",
            Variant::RnnPool => "rnn_pool",
            Variant::RnnAttn => "rnn_attn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown decoder variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub variant: Variant,
    /// Pooling for the `*_pool` variants.
    pub pooling: Pooling,
    pub input_dim: usize,
    /// Hidden units per LSTM direction; `d_k = 2 * lstm_units`.
    pub lstm_units: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            variant: Variant::RnnAttn,
            pooling: Pooling::Mean,
            input_dim: 64,
            lstm_units: 64,
            heads: 8,
            head_dim: 32,
            mlp_hidden: vec![128, 128],
            num_classes: 3,
        }
    }
}

impl DecoderConfig {
    pub fn d_k(&self) -> usize {
        2 * self.lstm_units
    }

    pub fn embedding_dim(&self) -> usize {
        match self.variant {
            Variant::MlpPool => *self.mlp_hidden.last().unwrap_or(&self.input_dim),
            Variant::RnnPool => self.d_k(),
            Variant::RnnAttn => self.heads * self.head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1");
        }
        match self.variant {
            Variant::MlpPool if self.mlp_hidden.contains(&0) => bad("mlp widths must be >= 1"),
            Variant::RnnPool | Variant::RnnAttn if self.lstm_units == 0 => bad("lstm_units must be >= 1"),
            Variant::RnnAttn if self.heads == 0 || self.head_dim == 0 => bad("heads and head_dim must be >= 1"),
            _ => Ok(()),
        }
    }

    /// Expected parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut emb = self.input_dim;
        match self.variant {
            Variant::MlpPool => {
                for (i, &w) in self.mlp_hidden.iter().enumerate() {
                    out.push((format!("mlp.{i}.w"), vec![emb, w]));
                    out.push((format!("mlp.{i}.b"), vec![w]));
                    emb = w;
                }
            }
            Variant::RnnPool | Variant::RnnAttn => {
                let h = self.lstm_units;
                for dir in ["fwd", "bwd"] {
                    out.push((format!("lstm.{dir}.w_ih"), vec![self.input_dim, 4 * h]));
                    out.push((format!("lstm.{dir}.w_hh"), vec![h, 4 * h]));
                    out.push((format!("lstm.{dir}.b"), vec![4 * h]));
                }
                emb = self.d_k();
                if self.variant == Variant::RnnAttn {
                    let nd = self.heads * self.head_dim;
                    out.push(("attn.w_q".into(), vec![self.heads, self.head_dim]));
                    out.push(("attn.w_k".into(), vec![self.d_k(), nd]));
                    out.push(("attn.w_v".into(), vec![self.d_k(), nd]));
                    emb = nd;
                }
            }
        }
        out.push(("cls.w".into(), vec![emb, self.num_classes]));
        out.push(("cls.b".into(), vec![self.num_classes]));
        out
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check_params<F: Scalar>(&self, params: &ParamSet<F>) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} decoder expects {} tensors, got {}",
                self.variant,
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in shapes {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Uniform(±1/√fan_in) init with LSTM forget-gate biases shifted by +1.
pub fn init_params(cfg: &DecoderConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in cfg.param_shapes() {
        let fan_in = if name.ends_with(".b") {
            // biases share the fan-in of their weight matrix
            match name.as_str() {
                "cls.b" => cfg.embedding_dim(),
                n if n.starts_with("lstm") => cfg.lstm_units,
                n => {
                    let layer: usize = n.split('.').nth(1).unwrap().parse().unwrap();
                    if layer == 0 {
                        cfg.input_dim
                    } else {
                        cfg.mlp_hidden[layer - 1]
                    }
                }
            }
        } else if name == "attn.w_q" {
            cfg.head_dim
        } else if name.ends_with("w_hh") {
            cfg.lstm_units
        } else {
            shape[0]
        };
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let mut data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        if name.starts_with("lstm") && name.ends_with(".b") {
            let h = cfg.lstm_units;
            data[h..2 * h].iter_mut().for_each(|v| *v += 1.0);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

/// Pads sequences to a `[B, T_max, D]` tensor (zeros past each length).
pub fn pad_batch<F: Scalar>(seqs: &[&FeatureSequence]) -> Result<(Tensor<F>, Vec<usize>)> {
    let first = seqs.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let d = first.dim();
    if let Some(s) = seqs.iter().find(|s| s.dim() != d) {
        return Err(Error::Shape(format!("mixed feature dims {d} and {}", s.dim())));
    }
    let t_max = seqs.iter().map(|s| s.len()).max().unwrap();
    let mut data = vec![F::zero(); seqs.len() * t_max * d];
    for (b, s) in seqs.iter().enumerate() {
        for (dst, &v) in data[b * t_max * d..].iter_mut().zip(s.values()) {
            *dst = F::from_f32(v).unwrap();
        }
    }
    let lengths = seqs.iter().map(|s| s.len()).collect();
    Ok((Tensor::new(vec![seqs.len(), t_max, d], data)?, lengths))
}

/// Handles produced by one forward pass.
pub struct Forward {
    pub embedding: Var,
    pub logits: Var,
    /// `[B, T, heads]` attention weights for `rnn_attn`.
    pub attention: Option<Var>,
}

fn p(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Shape(format!("missing parameter {name:?}")))
}

/// Records the decoder and classifier for a padded batch on `tape`.
pub fn forward<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &DecoderConfig,
    vars: &BTreeMap<String, Var>,
    x: Var,
    lengths: &[usize],
) -> Result<Forward> {
    let d = tape.value(x).last_dim();
    if d != cfg.input_dim {
        return Err(Error::Shape(format!(
            "decoder expects {}-dim features, got {d}",
            cfg.input_dim
        )));
    }
    let (embedding, attention) = match cfg.variant {
        Variant::MlpPool => {
            let mut hcur = x;
            for i in 0..cfg.mlp_hidden.len() {
                let z = tape.matmul(hcur, p(vars, &format!("mlp.{i}.w"))?)?;
                let z = tape.add_bias(z, p(vars, &format!("mlp.{i}.b"))?)?;
                hcur = tape.relu(z)?;
            }
            (tape.pool(hcur, lengths, cfg.pooling)?, None)
        }
        Variant::RnnPool | Variant::RnnAttn => {
            let mut dirs = Vec::with_capacity(2);
            for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                dirs.push(tape.lstm(
                    x,
                    p(vars, &format!("lstm.{dir}.w_ih"))?,
                    p(vars, &format!("lstm.{dir}.w_hh"))?,
                    p(vars, &format!("lstm.{dir}.b"))?,
                    lengths,
                    reverse,
                )?);
            }
            let h = tape.concat_last(dirs[0], dirs[1])?;
            if cfg.variant == Variant::RnnPool {
                (tape.pool(h, lengths, cfg.pooling)?, None)
            } else {
                let keys = tape.matmul(h, p(vars, "attn.w_k")?)?;
                let scores = tape.head_logits(keys, p(vars, "attn.w_q")?)?;
                let attn = tape.masked_softmax_time(scores, lengths)?;
                let values = tape.matmul(h, p(vars, "attn.w_v")?)?;
                (tape.weighted_sum_heads(attn, values)?, Some(attn))
            }
        }
    };
    let logits = tape.matmul(embedding, p(vars, "cls.w")?)?;
    let logits = tape.add_bias(logits, p(vars, "cls.b")?)?;
    Ok(Forward {
        embedding,
        logits,
        attention,
    })
}

/// Mean cross-entropy of the batch (for gradient checks and training).
pub fn batch_loss<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &DecoderConfig,
    params: &ParamSet<F>,
    x: &Tensor<F>,
    lengths: &[usize],
    labels: &[usize],
) -> Result<(Var, Forward)> {
    let vars = tape.params(params)?;
    let xv = tape.input(x.clone())?;
    let fwd = forward(tape, cfg, &vars, xv, lengths)?;
    let loss = tape.cross_entropy(fwd.logits, labels)?;
    Ok((loss, fwd))
}

/// Frame-level attention for one utterance: `heads × T` rows summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub weights: Vec<Vec<f64>>,
    pub frame_period: f64,
}

impl AttentionMap {
    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    pub fn frames(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Mean over heads per frame.
    pub fn head_mean(&self) -> Vec<f64> {
        let n = self.heads() as f64;
        (0..self.frames())
            .map(|t| self.weights.iter().map(|row| row[t]).sum::<f64>() / n)
            .collect()
    }
}

/// Per-utterance results of a batched forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub attention: Option<AttentionMap>,
}

/// Runs the decoder on a padded batch and splits the results per utterance.
pub fn decode_batch<F: Scalar>(
    cfg: &DecoderConfig,
    params: &ParamSet<F>,
    seqs: &[&FeatureSequence],
) -> Result<Vec<DecodeOutput>> {
    let (x, lengths) = pad_batch::<F>(seqs)?;
    let t_max = x.shape()[1];
    let mut tape = Tape::new();
    let vars = tape.params(params)?;
    let xv = tape.input(x)?;
    let fwd = forward(&mut tape, cfg, &vars, xv, &lengths)?;
    let to64 = |v: &F| v.to_f64().unwrap();
    let emb = tape.value(fwd.embedding);
    let e_dim = emb.last_dim();
    let logits = tape.value(fwd.logits);
    let c = cfg.num_classes;
    let attn = fwd.attention.map(|a| tape.value(a));
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(b, s)| DecodeOutput {
            embedding: emb.data()[b * e_dim..(b + 1) * e_dim].iter().map(to64).collect(),
            logits: logits.data()[b * c..(b + 1) * c].iter().map(to64).collect(),
            attention: attn.map(|a| {
                let n = cfg.heads;
                AttentionMap {
                    weights: (0..n)
                        .map(|i| {
                            (0..lengths[b])
                                .map(|t| to64(&a.data()[(b * t_max + t) * n + i]))
                                .collect()
                        })
                        .collect(),
                    frame_period: s.frame_period(),
                }
            }),
        })
        .collect())
}

/// Embedding (and attention map for `rnn_attn`) of a single utterance.
pub fn decode<F: Scalar>(
    seq: &FeatureSequence,
    cfg: &DecoderConfig,
    params: &ParamSet<F>,
) -> Result<(Vec<f64>, Option<AttentionMap>)> {
    let out = decode_batch(cfg, params, &[seq])?.pop().unwrap();
    Ok((out.embedding, out.attention))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Classification {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub class: usize,
}

/// Index of the largest value; earliest wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

pub fn classification_from_logits(logits: Vec<f64>) -> Classification {
    let probabilities = softmax_rows(&logits, logits.len());
    let class = argmax(&logits);
    Classification {
        logits,
        probabilities,
        class,
    }
}

/// Applies the softmax classifier (`cls.w`, `cls.b`) to an embedding.
pub fn classify<F: Scalar>(embedding: &[f64], params: &ParamSet<F>) -> Result<Classification> {
    let w = params.require("cls.w")?;
    let b = params.require("cls.b")?;
    let [e, c] = *w.shape() else {
        return Err(Error::Shape("cls.w must be rank 2".into()));
    };
    if embedding.len() != e || b.numel() != c {
        return Err(Error::Shape(format!(
            "embedding of {} values for classifier {:?}",
            embedding.len(),
            w.shape()
        )));
    }
    let logits = (0..c)
        .map(|j| {
            b.data()[j].to_f64().unwrap()
                + (0..e)
                    .map(|i| embedding[i] * w.data()[i * c + j].to_f64().unwrap())
                    .sum::<f64>()
        })
        .collect();
    Ok(classification_from_logits(logits))
}

/// A decoder configuration with its trained weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: DecoderConfig,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn new(config: DecoderConfig, params: ParamSet<f32>) -> Result<Self> {
        config.check_params(&params)?;
        Ok(Self { config, params })
    }

    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Batched inference; chunks of `batch_size` utterances.
    pub fn predict(
        &self,
        seqs: &[&FeatureSequence],
        batch_size: usize,
    ) -> Result<Vec<(Classification, Option<AttentionMap>)>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            for o in decode_batch(&self.config, &self.params, chunk)? {
                out.push((classification_from_logits(o.logits), o.attention));
            }
        }
        Ok(out)
    }
}

/// Finite-difference check of the full decoder + classifier loss in `f64`,
/// on a random padded batch of three utterances (lengths 7, 4 and 1).
pub fn gradient_check(cfg: &DecoderConfig, seed: u64, n_coords: usize, h: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let params: ParamSet<f64> = init_params(cfg, derive_seed(seed, &[0]))?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let lengths = vec![7, 4, 1];
    let (b, t, d) = (lengths.len(), lengths[0], cfg.input_dim);
    let mut x = vec![0.0f64; b * t * d];
    for (bi, &len) in lengths.iter().enumerate() {
        for v in &mut x[bi * t * d..(bi * t + len) * d] {
            *v = rng.sample(StandardNormal);
        }
    }
    let x = Tensor::new(vec![b, t, d], x)?;
    let labels: Vec<usize> = (0..b).map(|i| i % cfg.num_classes).collect();
    check_gradients(
        &params,
        |tape, p| Ok(batch_loss(tape, cfg, p, &x, &lengths, &labels)?.0),
        n_coords,
        h,
        &mut rng,
    )
}
