//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op in execution order on a tape. Parameters live
//! in a [`ParamStore`] owned outside the graph; the graph borrows them, so a
//! parameter leaf never copies its value. [`Graph::backward`] walks the tape in
//! exact reverse order and returns one accumulated gradient per parameter.

use std::collections::HashMap;

use super::fft::{irfft_real_axis0, rfft_packed_axis0, transform_packed_axis0};
use super::{matmul_nt_into, matmul_tn_into, sigmoid, softmax_rows, Tensor};
use crate::error::{dim_err, Error, Result};

const LN_EPS: f64 = 1e-5;
const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named registry of learnable leaf tensors, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Accumulated gradients, one slot per parameter of the store that was
/// differentiated. Parameters the loss never touched have no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros shaped like the parameter.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.slots.iter_mut().enumerate().filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, g) in self.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gather { table: Var, ids: Vec<usize>, skip_zero: bool },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
    WeightedRows(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Prelu(Var, Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Fft { x: Var, inverse: bool },
    RFft { x: Var },
    IRFftReal { x: Var },
    ComplexBlockMix { x: Var, wr: Var, wi: Var, heads: usize },
    ComplexHadamard { x: Var, wr: Var, wi: Var },
    Bce { p: Var, labels: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_leaves: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter leaves borrow their value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, _) in self.nodes.iter().enumerate() {
            if !self.value(Var(i)).is_finite() {
                return Err(Error::Contract(format!("non-finite value at node {i}")));
            }
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds a bias row (length = cols) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// Row lookup. With `skip_zero`, id 0 yields a zero row that receives no
    /// gradient (the padding convention).
    pub fn gather(&mut self, table: Var, ids: &[usize], skip_zero: bool) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; ids.len() * c];
        for (k, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Input(format!("lookup id {id} out of range for {rows} rows")));
            }
            if skip_zero && id == 0 {
                continue;
            }
            data[k * c..(k + 1) * c].copy_from_slice(t.row_slice(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec(), skip_zero }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&ts)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&ts)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// `sum_i w_i * row_i`, producing a `1 x cols` row.
    pub fn weighted_rows(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if weights.len() != t.rows() {
            return Err(dim_err!("{} weights for {} rows", weights.len(), t.rows()));
        }
        let c = t.cols();
        let mut out = vec![0.0; c];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += w * v;
            }
        }
        Ok(self.push(Tensor::row(&out), Op::WeightedRows(a, weights.to_vec())))
    }

    /// Mean over rows; errors on zero rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rows();
        if r == 0 {
            return Err(dim_err!("mean over empty axis"));
        }
        self.weighted_rows(a, &vec![1.0 / r as f64; r])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    /// Parametric rectifier with one learnable slope per column.
    pub fn prelu(&mut self, a: Var, alpha: Var) -> Result<Var> {
        let x = self.value(a);
        let al = self.value(alpha);
        let c = x.cols();
        if al.len() != c {
            return Err(dim_err!("prelu slopes {} vs {} channels", al.len(), c));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(al.data()) {
                if *v <= 0.0 {
                    *v *= s;
                }
            }
        }
        Ok(self.push(out, Op::Prelu(a, alpha)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        if c == 0 {
            return Err(dim_err!("layer norm over empty axis"));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(dim_err!("layer norm affine params must have {c} entries"));
        }
        let mut xhat = xt.clone();
        let mut inv_std = Vec::with_capacity(xt.rows());
        for row in xhat.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, gv), bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// FFT along the row axis of a packed `[re | im]` matrix.
    pub fn fft_rows(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let t = self.value(x);
        if t.cols() % 2 != 0 {
            return Err(dim_err!("packed complex input needs even width, got {}", t.cols()));
        }
        let out = transform_packed_axis0(t, inverse);
        Ok(self.push(out, Op::Fft { x, inverse }))
    }

    /// FFT along the rows of a real `K x d` matrix, packed `K x 2d`. Equals
    /// `fft_rows` of `[x | 0]`.
    pub fn rfft_rows(&mut self, x: Var) -> Var {
        let out = rfft_packed_axis0(self.value(x));
        self.push(out, Op::RFft { x })
    }

    /// Real part of the inverse FFT along the rows of a packed `K x 2d`
    /// matrix, as `K x d`.
    pub fn irfft_real_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.cols() % 2 != 0 {
            return Err(dim_err!("packed complex input needs even width, got {}", t.cols()));
        }
        let out = irfft_real_axis0(t);
        Ok(self.push(out, Op::IRFftReal { x }))
    }

    /// Per-head complex linear map on a packed `K x 2d` input: head `h` maps
    /// channels `h*b..(h+1)*b` through `W_h = wr[h] + i wi[h]` (row-vector
    /// convention, `y = x W_h`). `wr`, `wi` have shape `[heads, b, b]`.
    pub fn complex_block_mix(&mut self, x: Var, wr: Var, wi: Var, heads: usize) -> Result<Var> {
        let (xt, wrt, wit) = (self.value(x), self.value(wr), self.value(wi));
        let d = xt.cols() / 2;
        if xt.cols() % 2 != 0 || heads == 0 || d % heads != 0 {
            return Err(dim_err!("{} packed channels not divisible into {} heads", xt.cols(), heads));
        }
        let b = d / heads;
        if wrt.shape() != [heads, b, b] || wit.shape() != [heads, b, b] {
            return Err(dim_err!("mixing weights must be [{heads}, {b}, {b}], got {:?}", wrt.shape()));
        }
        let k = xt.rows();
        let mut out = vec![0.0; k * 2 * d];
        let (w_r, w_i) = (wrt.data(), wit.data());
        match b {
            1 => block_mix_fixed::<1>(xt.data(), w_r, w_i, d, &mut out),
            2 => block_mix_fixed::<2>(xt.data(), w_r, w_i, d, &mut out),
            4 => block_mix_fixed::<4>(xt.data(), w_r, w_i, d, &mut out),
            8 => block_mix_fixed::<8>(xt.data(), w_r, w_i, d, &mut out),
            16 => block_mix_fixed::<16>(xt.data(), w_r, w_i, d, &mut out),
            _ => block_mix_any(xt.data(), w_r, w_i, d, b, &mut out),
        }
        let out = Tensor::new(vec![k, 2 * d], out)?;
        Ok(self.push(out, Op::ComplexBlockMix { x, wr, wi, heads }))
    }

    /// Elementwise complex product of a packed `K x 2d` input with `wr + i wi`
    /// (each `K x d`).
    pub fn complex_hadamard(&mut self, x: Var, wr: Var, wi: Var) -> Result<Var> {
        let (xt, wrt, wit) = (self.value(x), self.value(wr), self.value(wi));
        let d = xt.cols() / 2;
        let k = xt.rows();
        if wrt.shape() != [k, d] || wit.shape() != [k, d] {
            return Err(dim_err!("filter must be [{k}, {d}], got {:?}", wrt.shape()));
        }
        let mut out = vec![0.0; k * 2 * d];
        for t in 0..k {
            for j in 0..d {
                let (a, b) = (xt.data()[t * 2 * d + j], xt.data()[t * 2 * d + d + j]);
                let (c, e) = (wrt.data()[t * d + j], wit.data()[t * d + j]);
                out[t * 2 * d + j] = a * c - b * e;
                out[t * 2 * d + d + j] = a * e + b * c;
            }
        }
        let out = Tensor::new(vec![k, 2 * d], out)?;
        Ok(self.push(out, Op::ComplexHadamard { x, wr, wi }))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pt = self.value(p);
        if labels.is_empty() {
            return Err(Error::Contract("binary cross-entropy of an empty batch".into()));
        }
        if pt.len() != labels.len() {
            return Err(dim_err!("{} predictions vs {} labels", pt.len(), labels.len()));
        }
        let loss = bce_value(pt.data(), labels);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, labels: labels.to_vec() }))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let mut sink = Sink { graph: self, grads: &mut grads, pgrads: &mut pgrads };
            self.backprop_node(i, &g, &mut sink)?;
        }
        Ok(Gradients { slots: pgrads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, sink: &mut Sink<'_, 'p>) -> Result<()> {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Const => {}
            Op::Param(id) => sink.add_param(*id, g),
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (p, q, r) = (at.rows(), at.cols(), bt.cols());
                let mut da = vec![0.0; p * q];
                matmul_nt_into(g.data(), bt.data(), &mut da, p, r, q);
                let mut db = vec![0.0; q * r];
                matmul_tn_into(at.data(), g.data(), &mut db, p, q, r);
                sink.add(*a, Tensor::new(at.shape().to_vec(), da)?);
                sink.add(*b, Tensor::new(bt.shape().to_vec(), db)?);
            }
            Op::Add(a, b) => {
                sink.add(*a, g.clone());
                sink.add(*b, g.clone());
            }
            Op::Sub(a, b) => {
                sink.add(*a, g.clone());
                sink.add(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                sink.add(*a, g.hadamard(self.value(*b))?);
                sink.add(*b, g.hadamard(self.value(*a))?);
            }
            Op::Scale(a, s) => sink.add(*a, g.scale(*s)),
            Op::AddRow(a, bias) => {
                let c = g.cols();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                sink.add(*a, g.clone());
                sink.add(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?);
            }
            Op::Gather { table, ids, skip_zero } => sink.add_rows(*table, ids, *skip_zero, g),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    sink.add(p, g.slice_cols(off, w)?.reshape(self.value(p).shape())?);
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let slice = g.data()[off..off + n].to_vec();
                    debug_assert_eq!(n % c.max(1), 0);
                    sink.add(p, Tensor::new(self.value(p).shape().to_vec(), slice)?);
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let at = self.value(*a);
                let (c, w) = (at.cols(), g.cols());
                let mut da = vec![0.0; at.len()];
                for (r, row) in g.data().chunks(w).enumerate() {
                    da[r * c + start..r * c + start + w].copy_from_slice(row);
                }
                sink.add(*a, Tensor::new(at.shape().to_vec(), da)?);
            }
            Op::Transpose(a) => sink.add(*a, g.transpose().reshape(self.value(*a).shape())?),
            Op::Sum(a) => sink.add(*a, Tensor::full(self.value(*a).shape(), g.data()[0])),
            Op::WeightedRows(a, w) => {
                let at = self.value(*a);
                let c = at.cols();
                let mut da = vec![0.0; at.len()];
                for (r, &wr) in w.iter().enumerate() {
                    for (d, gv) in da[r * c..(r + 1) * c].iter_mut().zip(g.data()) {
                        *d = wr * gv;
                    }
                }
                sink.add(*a, Tensor::new(at.shape().to_vec(), da)?);
            }
            Op::Sigmoid(a) => sink.add(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))?),
            Op::Tanh(a) => sink.add(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))?),
            Op::LeakyRelu(a, s) => {
                sink.add(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { s * gv })?)
            }
            Op::Prelu(a, alpha) => {
                let (xt, al) = (self.value(*a), self.value(*alpha));
                let c = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                let mut dal = vec![0.0; c];
                for (idx, (&x, &gv)) in xt.data().iter().zip(g.data()).enumerate() {
                    let j = idx % c;
                    if x > 0.0 {
                        dx[idx] = gv;
                    } else {
                        dx[idx] = al.data()[j] * gv;
                        dal[j] += x * gv;
                    }
                }
                sink.add(*a, Tensor::new(xt.shape().to_vec(), dx)?);
                sink.add(*alpha, Tensor::new(al.shape().to_vec(), dal)?);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut da = vec![0.0; out.len()];
                for ((drow, yrow), grow) in
                    da.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c))
                {
                    let s: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    for ((d, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = y * (gv - s);
                    }
                }
                sink.add(*a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = out.cols();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; out.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (r, is) in inv_std.iter().enumerate() {
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let xrow = &xhat.data()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxhat[j] = grow[j] * gam[j];
                        dg[j] += grow[j] * xrow[j];
                        db[j] += grow[j];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                    let n = c as f64;
                    for j in 0..c {
                        dx[r * c + j] = is / n * (n * dxhat[j] - s1 - xrow[j] * s2);
                    }
                }
                sink.add(*x, Tensor::new(out.shape().to_vec(), dx)?);
                sink.add(*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?);
                sink.add(*beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?);
            }
            Op::Fft { x, inverse } => {
                // Adjoint of the unnormalized DFT is K * IDFT; of the IDFT, DFT / K.
                let k = g.rows() as f64;
                let dx = if *inverse {
                    transform_packed_axis0(g, false).scale(1.0 / k)
                } else {
                    transform_packed_axis0(g, true).scale(k)
                };
                sink.add(*x, dx);
            }
            Op::RFft { x } => {
                let k = g.rows() as f64;
                sink.add(*x, irfft_real_axis0(g).scale(k));
            }
            Op::IRFftReal { x } => {
                let k = g.rows() as f64;
                sink.add(*x, rfft_packed_axis0(g).scale(1.0 / k));
            }
            Op::ComplexBlockMix { x, wr, wi, heads } => {
                let (xt, wrt, wit) = (self.value(*x), self.value(*wr), self.value(*wi));
                let d = xt.cols() / 2;
                let b = d / heads;
                let k = xt.rows();
                let mut dx = vec![0.0; xt.len()];
                let mut dwr = vec![0.0; wrt.len()];
                let mut dwi = vec![0.0; wit.len()];
                let (mut xr, mut xi) = (vec![0.0; k * b], vec![0.0; k * b]);
                let (mut gr, mut gi) = (vec![0.0; k * b], vec![0.0; k * b]);
                for h in 0..*heads {
                    extract_head(xt, h, b, d, &mut xr, &mut xi);
                    extract_head(g, h, b, d, &mut gr, &mut gi);
                    let wrh = &wrt.data()[h * b * b..(h + 1) * b * b];
                    let wih = &wit.data()[h * b * b..(h + 1) * b * b];
                    // dX = g W^H
                    let mut dxr = vec![0.0; k * b];
                    let mut dxi = vec![0.0; k * b];
                    matmul_nt_into(&gr, wrh, &mut dxr, k, b, b);
                    matmul_nt_into(&gi, wih, &mut dxr, k, b, b);
                    matmul_nt_into(&gi, wrh, &mut dxi, k, b, b);
                    let mut tmp = vec![0.0; k * b];
                    matmul_nt_into(&gr, wih, &mut tmp, k, b, b);
                    for (v, t) in dxi.iter_mut().zip(&tmp) {
                        *v -= t;
                    }
                    scatter_head(&mut dx, h, b, d, &dxr, &dxi);
                    // dW = X^H g
                    let dwrh = &mut dwr[h * b * b..(h + 1) * b * b];
                    matmul_tn_into(&xr, &gr, dwrh, k, b, b);
                    matmul_tn_into(&xi, &gi, dwrh, k, b, b);
                    let dwih = &mut dwi[h * b * b..(h + 1) * b * b];
                    matmul_tn_into(&xr, &gi, dwih, k, b, b);
                    let mut tmp = vec![0.0; b * b];
                    matmul_tn_into(&xi, &gr, &mut tmp, k, b, b);
                    for (v, t) in dwih.iter_mut().zip(&tmp) {
                        *v -= t;
                    }
                }
                sink.add(*x, Tensor::new(xt.shape().to_vec(), dx)?);
                sink.add(*wr, Tensor::new(wrt.shape().to_vec(), dwr)?);
                sink.add(*wi, Tensor::new(wit.shape().to_vec(), dwi)?);
            }
            Op::ComplexHadamard { x, wr, wi } => {
                let (xt, wrt, wit) = (self.value(*x), self.value(*wr), self.value(*wi));
                let d = xt.cols() / 2;
                let k = xt.rows();
                let mut dx = vec![0.0; xt.len()];
                let mut dwr = vec![0.0; wrt.len()];
                let mut dwi = vec![0.0; wit.len()];
                for t in 0..k {
                    for j in 0..d {
                        let (a, b) = (xt.data()[t * 2 * d + j], xt.data()[t * 2 * d + d + j]);
                        let (c, e) = (wrt.data()[t * d + j], wit.data()[t * d + j]);
                        let (gr, gi) = (g.data()[t * 2 * d + j], g.data()[t * 2 * d + d + j]);
                        dx[t * 2 * d + j] = gr * c + gi * e;
                        dx[t * 2 * d + d + j] = gi * c - gr * e;
                        dwr[t * d + j] = gr * a + gi * b;
                        dwi[t * d + j] = gi * a - gr * b;
                    }
                }
                sink.add(*x, Tensor::new(xt.shape().to_vec(), dx)?);
                sink.add(*wr, Tensor::new(wrt.shape().to_vec(), dwr)?);
                sink.add(*wi, Tensor::new(wit.shape().to_vec(), dwi)?);
            }
            Op::Bce { p, labels } => {
                let pt = self.value(*p);
                let n = labels.len() as f64;
                let scale = g.data()[0] / n;
                let dp: Vec<f64> = pt
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &y)| {
                        if pv < BCE_EPS || pv > 1.0 - BCE_EPS {
                            0.0
                        } else {
                            -scale * (y / pv - (1.0 - y) / (1.0 - pv))
                        }
                    })
                    .collect();
                sink.add(*p, Tensor::new(pt.shape().to_vec(), dp)?);
            }
        }
        Ok(())
    }
}

struct Sink<'a, 'p> {
    graph: &'a Graph<'p>,
    grads: &'a mut Vec<Option<Tensor>>,
    pgrads: &'a mut Vec<Option<Tensor>>,
}

impl Sink<'_, '_> {
    fn add(&mut self, v: Var, g: Tensor) {
        if let Op::Param(id) = self.graph.nodes[v.0].op {
            self.add_param(id, &g);
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g).expect("gradient shape matches value"),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_param(&mut self, id: ParamId, g: &Tensor) {
        let slot = &mut self.pgrads[id.0];
        match slot {
            Some(acc) => acc.add_assign(g).expect("gradient shape matches parameter"),
            None => *slot = Some(g.clone()),
        }
    }

    /// Scatter-add of gathered rows. Parameter tables accumulate sparsely.
    fn add_rows(&mut self, table: Var, ids: &[usize], skip_zero: bool, g: &Tensor) {
        let shape = self.graph.value(table).shape().to_vec();
        let c = g.cols();
        let target = match self.graph.nodes[table.0].op {
            Op::Param(id) => &mut self.pgrads[id.0],
            _ => &mut self.grads[table.0],
        };
        let acc = target.get_or_insert_with(|| Tensor::zeros(&shape));
        for (k, &id) in ids.iter().enumerate() {
            if skip_zero && id == 0 {
                continue;
            }
            for (a, gv) in acc.row_slice_mut(id).iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                *a += gv;
            }
        }
    }
}

/// Row-major block mix with the head width known at compile time.
fn block_mix_fixed<const B: usize>(x: &[f64], wr: &[f64], wi: &[f64], d: usize, out: &mut [f64]) {
    for (row, orow) in x.chunks_exact(2 * d).zip(out.chunks_exact_mut(2 * d)) {
        let (xre, xim) = row.split_at(d);
        let (ore, oim) = orow.split_at_mut(d);
        let heads = xre.chunks_exact(B).zip(xim.chunks_exact(B)).zip(ore.chunks_exact_mut(B).zip(oim.chunks_exact_mut(B)));
        for (((xr, xi), (yr, yi)), (wrh, wih)) in heads.zip(wr.chunks_exact(B * B).zip(wi.chunks_exact(B * B))) {
            let mut ar = [0.0; B];
            let mut ai = [0.0; B];
            for i in 0..B {
                let (a, c) = (xr[i], xi[i]);
                for j in 0..B {
                    let (p, q) = (wrh[i * B + j], wih[i * B + j]);
                    ar[j] += a * p - c * q;
                    ai[j] += a * q + c * p;
                }
            }
            yr.copy_from_slice(&ar);
            yi.copy_from_slice(&ai);
        }
    }
}

fn block_mix_any(x: &[f64], wr: &[f64], wi: &[f64], d: usize, b: usize, out: &mut [f64]) {
    for (row, orow) in x.chunks_exact(2 * d).zip(out.chunks_exact_mut(2 * d)) {
        let (xre, xim) = row.split_at(d);
        let (ore, oim) = orow.split_at_mut(d);
        for h in 0..d / b {
            for i in 0..b {
                let (a, c) = (xre[h * b + i], xim[h * b + i]);
                for j in 0..b {
                    let (p, q) = (wr[(h * b + i) * b + j], wi[(h * b + i) * b + j]);
                    ore[h * b + j] += a * p - c * q;
                    oim[h * b + j] += a * q + c * p;
                }
            }
        }
    }
}

fn extract_head(z: &Tensor, h: usize, b: usize, d: usize, re: &mut [f64], im: &mut [f64]) {
    let k = z.rows();
    let src = z.data();
    for t in 0..k {
        let row = &src[t * 2 * d..(t + 1) * 2 * d];
        re[t * b..(t + 1) * b].copy_from_slice(&row[h * b..(h + 1) * b]);
        im[t * b..(t + 1) * b].copy_from_slice(&row[d + h * b..d + (h + 1) * b]);
    }
}

fn scatter_head(out: &mut [f64], h: usize, b: usize, d: usize, re: &[f64], im: &[f64]) {
    let k = re.len() / b.max(1);
    for t in 0..k {
        let row = &mut out[t * 2 * d..(t + 1) * 2 * d];
        row[h * b..(h + 1) * b].copy_from_slice(&re[t * b..(t + 1) * b]);
        row[d + h * b..d + (h + 1) * b].copy_from_slice(&im[t * b..(t + 1) * b]);
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub(crate) fn bce_value(p: &[f64], labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    -p.iter()
        .zip(labels)
        .map(|(&pv, &y)| {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central differences over every parameter entry; returns the worst
    /// tensor-wise relative error.
    fn fd_check(store: &mut ParamStore, f: &dyn Fn(&mut Graph) -> Var) -> f64 {
        let grads = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss).unwrap()
        };
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = f(&mut g);
            g.value(l).data()[0]
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let analytic = grads.get_or_zeros(id, store);
            let mut numeric = vec![0.0; analytic.len()];
            for j in 0..analytic.len() {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + h;
                let up = eval(store);
                store.get_mut(id).data_mut()[j] = orig - h;
                let down = eval(store);
                store.get_mut(id).data_mut()[j] = orig;
                numeric[j] = (up - down) / (2.0 * h);
            }
            let numeric = Tensor::new(analytic.shape().to_vec(), numeric).unwrap();
            let diff = analytic.sub(&numeric).unwrap().norm();
            let scale = analytic.norm().max(numeric.norm());
            let rel = if scale < 1e-9 { diff } else { diff / scale };
            worst = worst.max(rel);
        }
        worst
    }

    fn store_with(shapes: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, sh) in shapes {
            s.add(*n, Tensor::randn(sh, rng));
        }
        s
    }

    // Random weighting keeps the loss from being degenerate (e.g. sum of a softmax).
    fn weighted_sum(g: &mut Graph, v: Var, w: &Tensor) -> Var {
        let wc = g.constant(w.clone());
        let m = g.mul(v, wc).unwrap();
        g.sum(m)
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = store_with(&[("p", &[2, 3])], &mut rng);
        let pid = store.id("p").unwrap();
        let mut g = Graph::new(&store);
        let p = g.param(pid);
        let l = g.sum(p);
        assert_eq!(g.backward(l).unwrap().get(pid).unwrap(), &Tensor::ones(&[2, 3]));

        let mut g = Graph::new(&store);
        let p = g.param(pid);
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        let grad = g.backward(l).unwrap();
        assert!(grad.get(pid).unwrap().max_abs_diff(&store.get(pid).scale(2.0)) < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn every_op_passes_randomized_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        type Case = (&'static str, Vec<(&'static str, Vec<usize>)>, Box<dyn Fn(&mut Graph, &Tensor) -> Var>);
        let cases: Vec<Case> = vec![
            (
                "matmul",
                vec![("a", vec![3, 4]), ("b", vec![4, 2])],
                Box::new(|g, w| {
                    let a = g.param(ParamId(0));
                    let b = g.param(ParamId(1));
                    let m = g.matmul(a, b).unwrap();
                    weighted_sum(g, m, &w.slice_cols(0, 2).unwrap().reshape(&[3, 2]).unwrap())
                }),
            ),
            (
                "bias+sub+transpose",
                vec![("a", vec![3, 4]), ("b", vec![4]), ("c", vec![4, 3])],
                Box::new(|g, w| {
                    let a = g.param(ParamId(0));
                    let b = g.param(ParamId(1));
                    let c = g.param(ParamId(2));
                    let ab = g.add_row(a, b).unwrap();
                    let ct = g.transpose(c);
                    let s = g.sub(ab, ct).unwrap();
                    let s = g.scale(s, 1.7);
                    weighted_sum(g, s, &w.slice_cols(0, 4).unwrap())
                }),
            ),
            (
                "activations",
                vec![("x", vec![3, 4]), ("alpha", vec![4])],
                Box::new(|g, w| {
                    let x = g.param(ParamId(0));
                    let al = g.param(ParamId(1));
                    let a = g.sigmoid(x);
                    let b = g.tanh(x);
                    let c = g.leaky_relu(x, 0.01);
                    let d = g.prelu(x, al).unwrap();
                    let ab = g.add(a, b).unwrap();
                    let cd = g.mul(c, d).unwrap();
                    let s = g.add(ab, cd).unwrap();
                    weighted_sum(g, s, &w.slice_cols(0, 4).unwrap())
                }),
            ),
            (
                "softmax+concat+slice",
                vec![("x", vec![3, 4]), ("y", vec![3, 2])],
                Box::new(|g, w| {
                    let x = g.param(ParamId(0));
                    let y = g.param(ParamId(1));
                    let cat = g.concat_cols(&[x, y]).unwrap();
                    let sm = g.softmax_rows(cat).unwrap();
                    let sl = g.slice_cols(sm, 1, 4).unwrap();
                    let rows = g.concat_rows(&[sl, x]).unwrap();
                    let pooled = g.weighted_rows(rows, &[0.1, 0.5, -0.3, 0.2, 0.9, 0.4]).unwrap();
                    weighted_sum(g, pooled, &w.slice_cols(0, 4).unwrap().select_rows(&[0]).unwrap())
                }),
            ),
            (
                "layernorm",
                vec![("x", vec![4, 8]), ("g", vec![8]), ("b", vec![8])],
                Box::new(|g, w| {
                    let x = g.param(ParamId(0));
                    let ga = g.param(ParamId(1));
                    let be = g.param(ParamId(2));
                    let y = g.layer_norm(x, ga, be).unwrap();
                    weighted_sum(g, y, &w.select_rows(&[0, 1, 2, 0]).unwrap())
                }),
            ),
            (
                "gather",
                vec![("t", vec![5, 8])],
                Box::new(|g, w| {
                    let t = g.param(ParamId(0));
                    let r = g.gather(t, &[3, 0, 3, 1], true).unwrap();
                    let r2 = g.gather(t, &[0, 4], false).unwrap();
                    let both = g.concat_rows(&[r, r2]).unwrap();
                    let sq = g.mul(both, both).unwrap();
                    weighted_sum(g, sq, &w.select_rows(&[0, 1, 2, 0, 1, 2]).unwrap())
                }),
            ),
            (
                "fft+block mix+hadamard",
                vec![("x", vec![5, 8]), ("wr", vec![2, 2, 2]), ("wi", vec![2, 2, 2]), ("hr", vec![5, 4]), ("hi", vec![5, 4])],
                Box::new(|g, w| {
                    let x = g.param(ParamId(0));
                    let wr = g.param(ParamId(1));
                    let wi = g.param(ParamId(2));
                    let hr = g.param(ParamId(3));
                    let hi = g.param(ParamId(4));
                    let f = g.fft_rows(x, false).unwrap();
                    let m = g.complex_block_mix(f, wr, wi, 2).unwrap();
                    let h = g.complex_hadamard(m, hr, hi).unwrap();
                    let back = g.fft_rows(h, true).unwrap();
                    let sq = g.mul(back, back).unwrap();
                    weighted_sum(g, sq, &w.select_rows(&[0, 1, 2, 0, 1]).unwrap())
                }),
            ),
            (
                "real fft pair",
                vec![("x", vec![5, 8]), ("wr", vec![4, 2, 2]), ("wi", vec![4, 2, 2]), ("hr", vec![5, 8]), ("hi", vec![5, 8])],
                Box::new(|g, w| {
                    let x = g.param(ParamId(0));
                    let wr = g.param(ParamId(1));
                    let wi = g.param(ParamId(2));
                    let hr = g.param(ParamId(3));
                    let hi = g.param(ParamId(4));
                    let f = g.rfft_rows(x);
                    let m = g.complex_block_mix(f, wr, wi, 4).unwrap();
                    let h = g.complex_hadamard(m, hr, hi).unwrap();
                    let back = g.irfft_real_rows(h).unwrap();
                    let sq = g.mul(back, back).unwrap();
                    weighted_sum(g, sq, &w.select_rows(&[0, 1, 2, 0, 1]).unwrap())
                }),
            ),
            (
                "bce",
                vec![("z", vec![6])],
                Box::new(|g, _| {
                    let z = g.param(ParamId(0));
                    let p = g.sigmoid(z);
                    g.bce(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap()
                }),
            ),
        ];
        for (name, shapes, f) in &cases {
            for trial in 0..20 {
                let named: Vec<(&str, &[usize])> = shapes.iter().map(|(n, s)| (*n, s.as_slice())).collect();
                let mut store = store_with(&named, &mut rng);
                let w = Tensor::randn(&[3, 8], &mut rng);
                let rel = fd_check(&mut store, &|g| f(g, &w));
                assert!(rel < 1e-5, "{name} trial {trial}: rel err {rel}");
            }
        }
    }

    #[test]
    fn parameters_accumulate_across_uses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let store = store_with(&[("t", &[4, 2])], &mut rng);
        let id = ParamId(0);
        let mut g = Graph::new(&store);
        let t = g.param(id);
        let a = g.gather(t, &[1], false).unwrap();
        let b = g.gather(t, &[1], false).unwrap();
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let grad = g.backward(l).unwrap();
        let gt = grad.get(id).unwrap();
        assert_eq!(gt.row_slice(1), &[2.0, 2.0]);
        assert_eq!(gt.row_slice(0), &[0.0, 0.0]);
    }

    #[test]
    fn replayed_tape_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = store_with(&[("x", &[6, 4]), ("w", &[2, 1, 1])], &mut rng);
        let run = || {
            let mut g = Graph::new(&store);
            let x = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let f = g.fft_rows(x, false).unwrap();
            let m = g.complex_block_mix(f, w, w, 2).unwrap();
            let sq = g.mul(m, m).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap()
        };
        assert_eq!(run(), run());
        let _ = rng.random::<u8>();
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..20).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let mut want = 0.0;
        for i in 0..20 {
            want += if y[i] == 1.0 { -p[i].ln() } else { -(1.0 - p[i]).ln() };
        }
        want /= 20.0;
        assert!((bce_value(&p, &y) - want).abs() < 1e-12);
        assert!((bce_value(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_value(&[1.0], &[1.0]) < 1e-11);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(g.bce(c, &[]), Err(Error::Contract(_))));
    }
}
