//! Target attention over the interest vectors and the prediction MLP.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{bce_value, Graph, ParamId, ParamStore, Tensor, Var};

/// Multi-head attention with the target embedding as the single query and
/// the stacked interests `E_m` as keys and values. Head `i` uses columns
/// `i*d/h..(i+1)*d/h` of each projection. Scores are scaled by `1/sqrt(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAttention {
    pub d: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl TargetAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} attention heads do not divide d = {d}")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut proj = |n: &str| store.add(format!("{prefix}.{n}"), Tensor::uniform(&[d, d], bound, rng));
        Ok(Self { d, heads, wq: proj("wq"), wk: proj("wk"), wv: proj("wv"), wo: proj("wo") })
    }

    /// `E_u` (`1 x d`) from the target `e_t` (`1 x d`) and interests `em`
    /// (`r x d`).
    pub fn forward(&self, g: &mut Graph, e_t: Var, em: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, e_t, em)?.0)
    }

    /// Also returns the per-head attention rows.
    pub fn forward_with_weights(&self, g: &mut Graph, e_t: Var, em: Var) -> Result<(Var, Vec<Var>)> {
        if g.value(e_t).cols() != self.d || g.value(em).cols() != self.d {
            return Err(dim_err!("target attention built for d = {}", self.d));
        }
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(e_t, wq)?;
        let k = g.matmul(em, wk)?;
        let v = g.matmul(em, wv)?;
        let b = self.d / self.heads;
        let scale = 1.0 / (self.d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * b, b)?;
            let kh = g.slice_cols(k, h * b, b)?;
            let vh = g.slice_cols(v, h * b, b)?;
            let kt = g.transpose(kh);
            let sc = g.matmul(qh, kt)?;
            let sc = g.scale(sc, scale);
            let p = g.softmax_rows(sc)?;
            weights.push(p);
            outs.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        Ok((g.matmul(cat, wo)?, weights))
    }
}

/// Fuses the interests outside of training.
pub fn fuse_interests(store: &ParamStore, attn: &TargetAttention, e_t: &Tensor, em: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let (a, b) = (g.constant(e_t.clone()), g.constant(em.clone()));
    let out = attn.forward(&mut g, a, b)?;
    Ok(g.value(out).clone())
}

pub const HIDDEN: [usize; 2] = [200, 80];
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
    slope: Option<ParamId>,
}

/// `input -> 200 -> 80 -> 2` with PReLU; `p = sigmoid(l_1 - l_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    pub input: usize,
    layers: Vec<Dense>,
}

impl PredictionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, rng: &mut R) -> Self {
        Self::with_sizes(store, prefix, input, &HIDDEN, rng)
    }

    pub fn with_sizes<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        let mut layers = Vec::new();
        for (i, win) in sizes.windows(2).enumerate() {
            let (a, b) = (win[0], win[1]);
            let w = store.add(format!("{prefix}.w{i}"), Tensor::uniform(&[a, b], 1.0 / (a as f64).sqrt(), rng));
            let bias = store.add(format!("{prefix}.b{i}"), Tensor::zeros(&[1, b]));
            let slope = (i + 2 < sizes.len()).then(|| store.add(format!("{prefix}.a{i}"), Tensor::full(&[b], PRELU_INIT)));
            layers.push(Dense { w, b: bias, slope });
        }
        Self { input, layers }
    }

    /// Two-class logits, `B x 2`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.input {
            return Err(dim_err!("prediction head expects {} inputs, got {}", self.input, g.value(x).cols()));
        }
        let mut h = x;
        for l in &self.layers {
            let (w, b) = (g.param(l.w), g.param(l.b));
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if let Some(a) = l.slope {
                let a = g.param(a);
                h = g.prelu(h, a)?;
            }
        }
        Ok(h)
    }

    /// Click probabilities, `B x 1`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let logits = self.logits(g, x)?;
        let diff = g.constant(Tensor::new(vec![2, 1], vec![-1.0, 1.0])?);
        let z = g.matmul(logits, diff)?;
        Ok(g.sigmoid(z))
    }

    /// Weight, bias and optional slope ids of each layer.
    pub fn layer_params(&self) -> Vec<(ParamId, ParamId, Option<ParamId>)> {
        self.layers.iter().map(|l| (l.w, l.b, l.slope)).collect()
    }
}

/// `sigmoid(MLP([e_t; E_u; E_other]))` outside of training.
pub fn predict(store: &ParamStore, head: &PredictionHead, e_t: &Tensor, e_u: &Tensor, e_other: &Tensor) -> Result<f64> {
    let x = Tensor::concat_cols(&[e_t, e_u, e_other])?;
    let mut g = Graph::new(store);
    let v = g.constant(x);
    let p = head.forward(&mut g, v)?;
    Ok(g.value(p).data()[0])
}

/// Mean binary cross-entropy with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Contract("binary cross-entropy of an empty batch".into()));
    }
    if p.len() != y.len() {
        return Err(dim_err!("{} predictions vs {} labels", p.len(), y.len()));
    }
    Ok(bce_value(p, y))
}
