//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. `Tape::grad` walks the nodes in reverse and
//! accumulates adjoints into their parents. Ops whose parents carry no
//! parameters are never differentiated.

use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::{log_sum_exp, sigmoid, softmax_in_place, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction over the time axis of a `[B, T, F]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
    Last,
}

enum Op<F> {
    Input,
    Param,
    MatMul {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    SoftmaxLast(Var),
    ConcatLast(Var, Var),
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        lengths: Vec<usize>,
        reverse: bool,
        gates: Vec<F>,
        cells: Vec<F>,
    },
    HeadLogits {
        keys: Var,
        query: Var,
        scale: F,
    },
    MaskedSoftmaxTime {
        lengths: Vec<usize>,
    },
    WeightedSumHeads {
        attn: Var,
        values: Var,
    },
    Pool {
        x: Var,
        lengths: Vec<usize>,
        kind: Pooling,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::SoftmaxLast(_) => "softmax",
            Op::ConcatLast(..) => "concat",
            Op::Lstm { .. } => "lstm",
            Op::HeadLogits { .. } => "head_logits",
            Op::MaskedSoftmaxTime { .. } => "masked_softmax",
            Op::WeightedSumHeads { .. } => "weighted_sum",
            Op::Pool { .. } => "pool",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    parents: Vec<Var>,
    needs_grad: bool,
}

/// Single-threaded recording context for one forward/backward pass.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: impl std::fmt::Display) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

/// Splits `[.., T, F]` into (B, T, F) for rank-3 tensors.
fn btf(t: &Tensor<impl Scalar>, op: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, tt, f] => Ok((b, tt, f)),
        ref s => Err(shape_err(op, format!("expected rank-3 [B, T, F], got {s:?}"))),
    }
}

fn check_lengths(lengths: &[usize], b: usize, t: usize, op: &str) -> Result<()> {
    if lengths.len() != b {
        return Err(shape_err(op, format!("{} lengths for batch of {b}", lengths.len())));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t) {
        return Err(shape_err(op, format!("length {bad} outside 1..={t}")));
    }
    Ok(())
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: Vec<Var>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let needs_grad = match op {
            Op::Param => true,
            Op::Input => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient flows into it).
    pub fn input(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Input, Vec::new())
    }

    /// Records a named trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor<F>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("parameter {name:?} registered twice")));
        }
        let v = self.push(value, Op::Param, Vec::new())?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Registers every tensor in `params` and returns name → handle.
    pub fn params(&mut self, params: &ParamSet<F>) -> Result<BTreeMap<String, Var>> {
        params
            .iter()
            .map(|(name, t)| Ok((name.clone(), self.param(name, t.clone())?)))
            .collect()
    }

    /// `x[.., k] · w[k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = xv.last_dim();
        let [wk, n] = *wv.shape() else {
            return Err(shape_err(
                "matmul",
                format!("weight must be rank 2, got {:?}", wv.shape()),
            ));
        };
        if xv.rank() == 0 || wk != k {
            return Err(shape_err("matmul", format!("{:?} x {:?}", xv.shape(), wv.shape())));
        }
        let rows = xv.numel() / k;
        let mut out = vec![F::zero(); rows * n];
        F::gemm(
            rows,
            k,
            n,
            F::one(),
            xv.data(),
            false,
            wv.data(),
            false,
            F::zero(),
            &mut out,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul { x, w }, vec![x, w])
    }

    /// Adds a `[n]` bias to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.last_dim();
        if bv.numel() != n || bv.rank() != 1 {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(value, Op::AddBias { x, bias }, vec![x, bias])
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(value, Op::Add(a, b), vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), vec![a, b])
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), vec![x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x), vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), vec![x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(F::zero()));
        self.push(value, Op::Relu(x), vec![x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), vec![x])
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(value, Op::SoftmaxLast(x), vec![x])
    }

    /// Concatenates `a[.., p]` and `b[.., q]` into `[.., p + q]`.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q) = (av.last_dim(), bv.last_dim());
        let lead_a = &av.shape()[..av.rank().saturating_sub(1)];
        let lead_b = &bv.shape()[..bv.rank().saturating_sub(1)];
        if lead_a != lead_b {
            return Err(shape_err("concat", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let rows = av.numel() / p.max(1);
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv.data()[r * q..(r + 1) * q]);
        }
        let mut shape = lead_a.to_vec();
        shape.push(p + q);
        self.push(Tensor::from_parts(shape, out), Op::ConcatLast(a, b), vec![a, b])
    }

    /// One-direction LSTM over a padded batch `x[B, T, D]`.
    ///
    /// Gate layout along the `4H` axis is input, forget, cell, output.
    /// Sequence `b` occupies frames `0..lengths[b]`; with `reverse` it is
    /// consumed from its own last valid frame backwards. Padded output frames
    /// are exactly zero.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, lengths: &[usize], reverse: bool) -> Result<Var> {
        let (b, t, d) = btf(self.value(x), "lstm")?;
        check_lengths(lengths, b, t, "lstm")?;
        let [wd, g4] = *self.value(w_ih).shape() else {
            return Err(shape_err("lstm", "w_ih must be rank 2"));
        };
        let h = g4 / 4;
        if wd != d || g4 != 4 * h || h == 0 {
            return Err(shape_err("lstm", format!("w_ih {:?} for input dim {d}", [wd, g4])));
        }
        if self.value(w_hh).shape() != [h, 4 * h] || self.value(bias).shape() != [4 * h] {
            return Err(shape_err(
                "lstm",
                format!(
                    "w_hh {:?} / bias {:?} inconsistent with hidden {h}",
                    self.value(w_hh).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let out = lstm_forward(
            self.value(x).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(bias).data(),
            lengths,
            t,
            h,
            reverse,
            true,
        );
        let value = Tensor::from_parts(vec![b, t, h], out.hidden);
        self.push(
            value,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                lengths: lengths.to_vec(),
                reverse,
                gates: out.gates,
                cells: out.cells,
            },
            vec![x, w_ih, w_hh, bias],
        )
    }

    /// Per-head query/key logits: `keys[B, T, n·d]`, `query[n, d]` ->
    /// `[B, T, n]` with entry `(q_i · k_{t,i}) / sqrt(d)`.
    pub fn head_logits(&mut self, keys: Var, query: Var) -> Result<Var> {
        let (b, t, nd) = btf(self.value(keys), "head_logits")?;
        let [n, d] = *self.value(query).shape() else {
            return Err(shape_err("head_logits", "query must be rank 2 [heads, dim]"));
        };
        if n * d != nd {
            return Err(shape_err("head_logits", format!("keys width {nd} != {n}x{d}")));
        }
        let scale = F::one() / F::lit(d as f64).sqrt();
        let (kv, qv) = (self.value(keys).data(), self.value(query).data());
        let mut out = vec![F::zero(); b * t * n];
        for (row, o) in kv.chunks(nd).zip(out.chunks_mut(n)) {
            for i in 0..n {
                let dot: F = (0..d).map(|j| qv[i * d + j] * row[i * d + j]).sum();
                o[i] = dot * scale;
            }
        }
        let value = Tensor::from_parts(vec![b, t, n], out);
        self.push(value, Op::HeadLogits { keys, query, scale }, vec![keys, query])
    }

    /// Softmax over the time axis of `x[B, T, n]`, restricted to the first
    /// `lengths[b]` frames. Padded frames get exactly zero weight.
    pub fn masked_softmax_time(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (b, t, n) = btf(self.value(x), "masked_softmax")?;
        check_lengths(lengths, b, t, "masked_softmax")?;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); b * t * n];
        let mut col = Vec::with_capacity(t);
        for (bi, &len) in lengths.iter().enumerate() {
            for i in 0..n {
                col.clear();
                col.extend((0..len).map(|ti| xv[(bi * t + ti) * n + i]));
                softmax_in_place(&mut col);
                for (ti, &p) in col.iter().enumerate() {
                    out[(bi * t + ti) * n + i] = p;
                }
            }
        }
        let value = Tensor::from_parts(vec![b, t, n], out);
        self.push(
            value,
            Op::MaskedSoftmaxTime {
                lengths: lengths.to_vec(),
            },
            vec![x],
        )
    }

    /// `attn[B, T, n]`, `values[B, T, n·d]` -> `[B, n·d]`, head `i` taking the
    /// `attn[.., i]`-weighted sum of its `d`-wide value slice.
    pub fn weighted_sum_heads(&mut self, attn: Var, values: Var) -> Result<Var> {
        let (b, t, n) = btf(self.value(attn), "weighted_sum")?;
        let (vb, vt, nd) = btf(self.value(values), "weighted_sum")?;
        if vb != b || vt != t || n == 0 || nd % n != 0 {
            return Err(shape_err(
                "weighted_sum",
                format!("{:?} vs {:?}", self.value(attn).shape(), self.value(values).shape()),
            ));
        }
        let d = nd / n;
        let (av, vv) = (self.value(attn).data(), self.value(values).data());
        let mut out = vec![F::zero(); b * nd];
        for bi in 0..b {
            let o = &mut out[bi * nd..(bi + 1) * nd];
            for ti in 0..t {
                let row = (bi * t + ti) * nd;
                for i in 0..n {
                    let a = av[(bi * t + ti) * n + i];
                    if a == F::zero() {
                        continue;
                    }
                    for j in 0..d {
                        o[i * d + j] += a * vv[row + i * d + j];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, nd], out);
        self.push(value, Op::WeightedSumHeads { attn, values }, vec![attn, values])
    }

    /// Masked pooling over time: `x[B, T, F]` -> `[B, F]`.
    pub fn pool(&mut self, x: Var, lengths: &[usize], kind: Pooling) -> Result<Var> {
        let (b, t, f) = btf(self.value(x), "pool")?;
        check_lengths(lengths, b, t, "pool")?;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); b * f];
        let mut argmax = Vec::new();
        for (bi, &len) in lengths.iter().enumerate() {
            let o = &mut out[bi * f..(bi + 1) * f];
            let frame = |ti: usize| &xv[(bi * t + ti) * f..(bi * t + ti + 1) * f];
            match kind {
                Pooling::Mean => {
                    for ti in 0..len {
                        for (acc, &v) in o.iter_mut().zip(frame(ti)) {
                            *acc += v;
                        }
                    }
                    let inv = F::one() / F::lit(len as f64);
                    o.iter_mut().for_each(|v| *v *= inv);
                }
                Pooling::Max => {
                    for j in 0..f {
                        let mut best = 0;
                        for ti in 1..len {
                            if xv[(bi * t + ti) * f + j] > xv[(bi * t + best) * f + j] {
                                best = ti;
                            }
                        }
                        o[j] = xv[(bi * t + best) * f + j];
                        argmax.push(best);
                    }
                }
                Pooling::Last => o.copy_from_slice(frame(len - 1)),
            }
        }
        let value = Tensor::from_parts(vec![b, f], out);
        self.push(
            value,
            Op::Pool {
                x,
                lengths: lengths.to_vec(),
                kind,
                argmax,
            },
            vec![x],
        )
    }

    /// Mean cross-entropy of `logits[B, C]` against integer labels, via
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, c] = *lv.shape() else {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} must be [B, C]", lv.shape()),
            ));
        };
        if labels.len() != b || b == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for batch {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = F::zero();
        let mut probs = Vec::with_capacity(b * c);
        for (row, &y) in lv.data().chunks(c).zip(labels) {
            let lse = log_sum_exp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / F::lit(b as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
        )
    }

    /// Gradients of a scalar `loss` with respect to the named parameters.
    /// Parameters that do not influence the loss get zero gradients.
    pub fn grad<'a>(&self, loss: Var, names: impl IntoIterator<Item = &'a str>) -> Result<ParamSet<F>> {
        let wanted: Vec<(&str, Var)> = names
            .into_iter()
            .map(|n| {
                self.params
                    .get(n)
                    .map(|&v| (n, v))
                    .ok_or_else(|| Error::InvalidArgument(format!("parameter {n:?} is not on the tape")))
            })
            .collect::<Result<_>>()?;
        let adj = self.backward(loss)?;
        let mut out = ParamSet::new();
        for (name, v) in wanted {
            let value = &self.nodes[v.0].value;
            let g = match &adj[v.0] {
                Some(g) => Tensor::from_parts(value.shape().to_vec(), g.clone()),
                None => Tensor::zeros(value.shape()),
            };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            out.insert(name, g);
        }
        Ok(out)
    }

    /// Gradients for every parameter registered on the tape.
    pub fn grad_all(&self, loss: Var) -> Result<ParamSet<F>> {
        let names: Vec<String> = self.params.keys().cloned().collect();
        self.grad(loss, names.iter().map(String::as_str))
    }

    fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<F>>>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Shape(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut adj: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = adj[idx].take() else { continue };
            self.backprop_node(node, &dout, &mut adj);
            if matches!(node.op, Op::Param) {
                adj[idx] = Some(dout);
            }
        }
        Ok(adj)
    }

    fn backprop_node(&self, node: &Node<F>, dout: &[F], adj: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].needs_grad;
        // Returns the adjoint buffer for `v`, allocating zeros on first use.
        fn slot<'a, F: Scalar>(adj: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'a mut Vec<F> {
            adj[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()])
        }
        let y = node.value.data();

        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { x, w } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let k = xv.last_dim();
                let n = wv.shape()[1];
                let rows = xv.numel() / k;
                if needs(*x) {
                    let g = slot(adj, nodes, *x);
                    F::gemm(rows, n, k, F::one(), dout, false, wv.data(), true, F::one(), g);
                }
                if needs(*w) {
                    let g = slot(adj, nodes, *w);
                    F::gemm(k, rows, n, F::one(), xv.data(), true, dout, false, F::one(), g);
                }
            }
            Op::AddBias { x, bias } => {
                if needs(*x) {
                    add_into(slot(adj, nodes, *x), dout);
                }
                if needs(*bias) {
                    let g = slot(adj, nodes, *bias);
                    let n = g.len();
                    for row in dout.chunks(n) {
                        add_into(g, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        add_into(slot(adj, nodes, *v), dout);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b);
                    let g = slot(adj, nodes, *a);
                    for ((g, &d), &o) in g.iter_mut().zip(dout).zip(bv) {
                        *g += d * o;
                    }
                }
                if needs(*b) {
                    let av = val(*a);
                    let g = slot(adj, nodes, *b);
                    for ((g, &d), &o) in g.iter_mut().zip(dout).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(x, factor) => {
                let g = slot(adj, nodes, *x);
                for (g, &d) in g.iter_mut().zip(dout) {
                    *g += d * *factor;
                }
            }
            Op::Tanh(x) => {
                let g = slot(adj, nodes, *x);
                for ((g, &d), &o) in g.iter_mut().zip(dout).zip(y) {
                    *g += d * (F::one() - o * o);
                }
            }
            Op::Sigmoid(x) => {
                let g = slot(adj, nodes, *x);
                for ((g, &d), &o) in g.iter_mut().zip(dout).zip(y) {
                    *g += d * o * (F::one() - o);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let g = slot(adj, nodes, *x);
                for ((g, &d), &i) in g.iter_mut().zip(dout).zip(xv) {
                    if i > F::zero() {
                        *g += d;
                    }
                }
            }
            Op::Sum(x) => {
                let d = dout[0];
                slot(adj, nodes, *x).iter_mut().for_each(|g| *g += d);
            }
            Op::SoftmaxLast(x) => {
                let width = node.value.last_dim();
                let g = slot(adj, nodes, *x);
                for ((g, d), p) in g.chunks_mut(width).zip(dout.chunks(width)).zip(y.chunks(width)) {
                    let dot: F = d.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    for j in 0..width {
                        g[j] += p[j] * (d[j] - dot);
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let p = nodes[a.0].value.last_dim();
                let q = nodes[b.0].value.last_dim();
                let rows = dout.len() / (p + q);
                if needs(*a) {
                    let g = slot(adj, nodes, *a);
                    for r in 0..rows {
                        add_into(&mut g[r * p..(r + 1) * p], &dout[r * (p + q)..r * (p + q) + p]);
                    }
                }
                if needs(*b) {
                    let g = slot(adj, nodes, *b);
                    for r in 0..rows {
                        add_into(&mut g[r * q..(r + 1) * q], &dout[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                }
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                lengths,
                reverse,
                gates,
                cells,
            } => {
                let (_, t, d) = btf(&nodes[x.0].value, "lstm").expect("checked on record");
                let h = nodes[w_hh.0].value.shape()[0];
                let grads = lstm_backward(
                    LstmSaved {
                        x: val(*x),
                        w_ih: val(*w_ih),
                        w_hh: val(*w_hh),
                        hidden: y,
                        gates,
                        cells,
                        lengths,
                        t,
                        d,
                        h,
                        reverse: *reverse,
                    },
                    dout,
                    needs(*x),
                );
                if needs(*x) {
                    add_into(slot(adj, nodes, *x), &grads.dx);
                }
                if needs(*w_ih) {
                    add_into(slot(adj, nodes, *w_ih), &grads.dw_ih);
                }
                if needs(*w_hh) {
                    add_into(slot(adj, nodes, *w_hh), &grads.dw_hh);
                }
                if needs(*bias) {
                    add_into(slot(adj, nodes, *bias), &grads.dbias);
                }
            }
            Op::HeadLogits { keys, query, scale } => {
                let nd = nodes[keys.0].value.last_dim();
                let [n, d] = *nodes[query.0].value.shape() else {
                    unreachable!()
                };
                let (kv, qv) = (val(*keys), val(*query));
                if needs(*keys) {
                    let g = slot(adj, nodes, *keys);
                    for (grow, drow) in g.chunks_mut(nd).zip(dout.chunks(n)) {
                        for i in 0..n {
                            let s = drow[i] * *scale;
                            for j in 0..d {
                                grow[i * d + j] += s * qv[i * d + j];
                            }
                        }
                    }
                }
                if needs(*query) {
                    let g = slot(adj, nodes, *query);
                    for (krow, drow) in kv.chunks(nd).zip(dout.chunks(n)) {
                        for i in 0..n {
                            let s = drow[i] * *scale;
                            for j in 0..d {
                                g[i * d + j] += s * krow[i * d + j];
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmaxTime { lengths } => {
                let x = node.parents[0];
                let (_, t, n) = btf(&node.value, "masked_softmax").expect("checked on record");
                let g = slot(adj, nodes, x);
                for (bi, &len) in lengths.iter().enumerate() {
                    for i in 0..n {
                        let idx = |ti: usize| (bi * t + ti) * n + i;
                        let dot: F = (0..len).map(|ti| y[idx(ti)] * dout[idx(ti)]).sum();
                        for ti in 0..len {
                            g[idx(ti)] += y[idx(ti)] * (dout[idx(ti)] - dot);
                        }
                    }
                }
            }
            Op::WeightedSumHeads { attn, values } => {
                let (b, t, n) = btf(&nodes[attn.0].value, "weighted_sum").expect("checked");
                let nd = nodes[values.0].value.last_dim();
                let d = nd / n;
                let (av, vv) = (val(*attn), val(*values));
                if needs(*attn) {
                    let g = slot(adj, nodes, *attn);
                    for bi in 0..b {
                        for ti in 0..t {
                            let row = (bi * t + ti) * nd;
                            for i in 0..n {
                                let s: F = (0..d).map(|j| dout[bi * nd + i * d + j] * vv[row + i * d + j]).sum();
                                g[(bi * t + ti) * n + i] += s;
                            }
                        }
                    }
                }
                if needs(*values) {
                    let g = slot(adj, nodes, *values);
                    for bi in 0..b {
                        for ti in 0..t {
                            let row = (bi * t + ti) * nd;
                            for i in 0..n {
                                let a = av[(bi * t + ti) * n + i];
                                for j in 0..d {
                                    g[row + i * d + j] += a * dout[bi * nd + i * d + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Pool {
                x,
                lengths,
                kind,
                argmax,
            } => {
                let (_, t, f) = btf(&nodes[x.0].value, "pool").expect("checked on record");
                let g = slot(adj, nodes, *x);
                for (bi, &len) in lengths.iter().enumerate() {
                    let d = &dout[bi * f..(bi + 1) * f];
                    match kind {
                        Pooling::Mean => {
                            let inv = F::one() / F::lit(len as f64);
                            for ti in 0..len {
                                for j in 0..f {
                                    g[(bi * t + ti) * f + j] += d[j] * inv;
                                }
                            }
                        }
                        Pooling::Max => {
                            for j in 0..f {
                                let ti = argmax[bi * f + j];
                                g[(bi * t + ti) * f + j] += d[j];
                            }
                        }
                        Pooling::Last => {
                            add_into(&mut g[(bi * t + len - 1) * f..(bi * t + len) * f], d);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = nodes[logits.0].value.last_dim();
                let s = dout[0] / F::lit(labels.len() as f64);
                let g = slot(adj, nodes, *logits);
                for (bi, &yl) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == yl { F::one() } else { F::zero() };
                        g[bi * c + j] += s * (probs[bi * c + j] - target);
                    }
                }
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) struct LstmForward<F> {
    pub hidden: Vec<F>,
    pub gates: Vec<F>,
    pub cells: Vec<F>,
}

/// Position of step `s` within a sequence of length `len`.
fn step_pos(s: usize, len: usize, reverse: bool) -> usize {
    if reverse {
        len - 1 - s
    } else {
        s
    }
}

/// Plain LSTM forward pass shared by the tape op and the frozen encoder.
/// Keeps gate activations and cell states only when `keep_cache` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_forward<F: Scalar>(
    x: &[F],
    w_ih: &[F],
    w_hh: &[F],
    bias: &[F],
    lengths: &[usize],
    t: usize,
    h: usize,
    reverse: bool,
    keep_cache: bool,
) -> LstmForward<F> {
    let b = lengths.len();
    let g4 = 4 * h;
    let d = w_ih.len() / g4;
    let rows = b * t;

    let mut pre = vec![F::zero(); rows * g4];
    for row in pre.chunks_mut(g4) {
        row.copy_from_slice(bias);
    }
    F::gemm(rows, d, g4, F::one(), x, false, w_ih, false, F::one(), &mut pre);

    let mut hidden = vec![F::zero(); rows * h];
    let mut cells = vec![F::zero(); rows * h];
    let mut gates = if keep_cache {
        vec![F::zero(); rows * g4]
    } else {
        Vec::new()
    };

    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut active: Vec<usize> = Vec::with_capacity(b);
    let mut hprev = Vec::new();
    let mut rec = Vec::new();
    for s in 0..max_len {
        active.clear();
        active.extend((0..b).filter(|&bi| lengths[bi] > s));
        let n_act = active.len();
        if s > 0 {
            hprev.clear();
            for &bi in &active {
                let p = step_pos(s - 1, lengths[bi], reverse);
                hprev.extend_from_slice(&hidden[(bi * t + p) * h..(bi * t + p + 1) * h]);
            }
            rec.clear();
            rec.resize(n_act * g4, F::zero());
            F::gemm(n_act, h, g4, F::one(), &hprev, false, w_hh, false, F::zero(), &mut rec);
        }
        for (r, &bi) in active.iter().enumerate() {
            let pos = step_pos(s, lengths[bi], reverse);
            let row = bi * t + pos;
            let prev_row = (s > 0).then(|| bi * t + step_pos(s - 1, lengths[bi], reverse));
            let pr = &mut pre[row * g4..(row + 1) * g4];
            if s > 0 {
                add_into(pr, &rec[r * g4..(r + 1) * g4]);
            }
            for j in 0..h {
                let i_g = sigmoid(pr[j]);
                let f_g = sigmoid(pr[h + j]);
                let c_g = pr[2 * h + j].tanh();
                let o_g = sigmoid(pr[3 * h + j]);
                let c_prev = prev_row.map_or(F::zero(), |p| cells[p * h + j]);
                let c = f_g * c_prev + i_g * c_g;
                cells[row * h + j] = c;
                hidden[row * h + j] = o_g * c.tanh();
                if keep_cache {
                    let gr = &mut gates[row * g4..(row + 1) * g4];
                    gr[j] = i_g;
                    gr[h + j] = f_g;
                    gr[2 * h + j] = c_g;
                    gr[3 * h + j] = o_g;
                }
            }
        }
    }
    if !keep_cache {
        cells = Vec::new();
    }
    LstmForward { hidden, gates, cells }
}

struct LstmSaved<'a, F> {
    x: &'a [F],
    w_ih: &'a [F],
    w_hh: &'a [F],
    hidden: &'a [F],
    gates: &'a [F],
    cells: &'a [F],
    lengths: &'a [usize],
    t: usize,
    d: usize,
    h: usize,
    reverse: bool,
}

struct LstmGrads<F> {
    dx: Vec<F>,
    dw_ih: Vec<F>,
    dw_hh: Vec<F>,
    dbias: Vec<F>,
}

fn lstm_backward<F: Scalar>(s: LstmSaved<'_, F>, dout: &[F], want_dx: bool) -> LstmGrads<F> {
    let LstmSaved {
        x,
        w_ih,
        w_hh,
        hidden,
        gates,
        cells,
        lengths,
        t,
        d,
        h,
        reverse,
    } = s;
    let b = lengths.len();
    let g4 = 4 * h;
    let rows = b * t;
    let mut dpre = vec![F::zero(); rows * g4];
    let mut hprev_all = vec![F::zero(); rows * h];
    let mut dh_rec = vec![F::zero(); b * h];
    let mut dc_rec = vec![F::zero(); b * h];
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut active = Vec::with_capacity(b);
    let mut dg_act = Vec::new();
    let mut dh_act = Vec::new();

    for step in (0..max_len).rev() {
        active.clear();
        active.extend((0..b).filter(|&bi| lengths[bi] > step));
        for &bi in &active {
            let pos = step_pos(step, lengths[bi], reverse);
            let row = bi * t + pos;
            let prev_row = (step > 0).then(|| bi * t + step_pos(step - 1, lengths[bi], reverse));
            if let Some(p) = prev_row {
                hprev_all[row * h..(row + 1) * h].copy_from_slice(&hidden[p * h..(p + 1) * h]);
            }
            let gr = &gates[row * g4..(row + 1) * g4];
            let dr = &mut dpre[row * g4..(row + 1) * g4];
            for j in 0..h {
                let (i_g, f_g, c_g, o_g) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let c = cells[row * h + j];
                let tc = c.tanh();
                let dh = dout[row * h + j] + dh_rec[bi * h + j];
                let d_o = dh * tc;
                let dc = dc_rec[bi * h + j] + dh * o_g * (F::one() - tc * tc);
                let c_prev = prev_row.map_or(F::zero(), |p| cells[p * h + j]);
                dc_rec[bi * h + j] = dc * f_g;
                dr[j] = dc * c_g * i_g * (F::one() - i_g);
                dr[h + j] = dc * c_prev * f_g * (F::one() - f_g);
                dr[2 * h + j] = dc * i_g * (F::one() - c_g * c_g);
                dr[3 * h + j] = d_o * o_g * (F::one() - o_g);
            }
        }
        if step > 0 {
            dg_act.clear();
            for &bi in &active {
                let row = bi * t + step_pos(step, lengths[bi], reverse);
                dg_act.extend_from_slice(&dpre[row * g4..(row + 1) * g4]);
            }
            dh_act.clear();
            dh_act.resize(active.len() * h, F::zero());
            F::gemm(
                active.len(),
                g4,
                h,
                F::one(),
                &dg_act,
                false,
                w_hh,
                true,
                F::zero(),
                &mut dh_act,
            );
            for (r, &bi) in active.iter().enumerate() {
                dh_rec[bi * h..(bi + 1) * h].copy_from_slice(&dh_act[r * h..(r + 1) * h]);
            }
        }
    }

    let mut dbias = vec![F::zero(); g4];
    for row in dpre.chunks(g4) {
        add_into(&mut dbias, row);
    }
    let mut dw_ih = vec![F::zero(); d * g4];
    F::gemm(d, rows, g4, F::one(), x, true, &dpre, false, F::zero(), &mut dw_ih);
    let mut dw_hh = vec![F::zero(); h * g4];
    F::gemm(
        h,
        rows,
        g4,
        F::one(),
        &hprev_all,
        true,
        &dpre,
        false,
        F::zero(),
        &mut dw_hh,
    );
    let mut dx = Vec::new();
    if want_dx {
        dx = vec![F::zero(); rows * d];
        F::gemm(rows, g4, d, F::one(), &dpre, false, w_ih, true, F::zero(), &mut dx);
    }
    LstmGrads {
        dx,
        dw_ih,
        dw_hh,
        dbias,
    }
}
