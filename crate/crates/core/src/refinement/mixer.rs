//! Sequence mixers applied to a retrieved subsequence (`K x d`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Leaky rectifier, slope 0.01, on re and im separately.
    #[default]
    Leaky,
    Identity,
}

const LEAK: f64 = 0.01;

/// Where the Fourier mixers apply their layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormSite {
    /// On the packed spectrum, before the inverse transform.
    Frequency,
    /// Per row after the inverse transform.
    #[default]
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    #[default]
    Mhft,
    Ft,
    Mhsa,
    None,
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mhft" => Ok(MixerKind::Mhft),
            "ft" => Ok(MixerKind::Ft),
            "mhsa" => Ok(MixerKind::Mhsa),
            "none" => Ok(MixerKind::None),
            _ => Err(Error::Config(format!("unknown mixer {s:?}"))),
        }
    }
}

/// Residual and normalization switches shared by all mixers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerOptions {
    pub residual: bool,
    pub layer_norm: bool,
    pub norm_site: NormSite,
    pub activation: Activation,
}

impl Default for MixerOptions {
    fn default() -> Self {
        Self { residual: true, layer_norm: true, norm_site: NormSite::Time, activation: Activation::Leaky }
    }
}

impl MixerOptions {
    fn norm_width(&self, d: usize) -> usize {
        match self.norm_site {
            NormSite::Frequency => 2 * d,
            NormSite::Time => d,
        }
    }
}

/// Multi-head Fourier mixer: FFT along the sequence, per-head complex channel
/// map shared across frequencies, residual, inverse FFT and real part, then
/// a norm at the configured site.
#[derive(Debug, Clone, PartialEq)]
pub struct MhftLayer {
    pub d: usize,
    pub heads: usize,
    /// Real and imaginary mixing weights, `[heads, d/heads, d/heads]`.
    pub wr: ParamId,
    pub wi: ParamId,
    /// Norm affine over the packed `2d` channels.
    pub gamma: ParamId,
    pub beta: ParamId,
    pub opts: MixerOptions,
}

impl MhftLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        opts: MixerOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide d = {d}")));
        }
        let b = d / heads;
        let bound = 1.0 / (b as f64).sqrt();
        let wr = store.add(format!("{prefix}.wr"), Tensor::uniform(&[heads, b, b], bound, rng));
        let wi = store.add(format!("{prefix}.wi"), Tensor::uniform(&[heads, b, b], bound, rng));
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones(&[opts.norm_width(d)]));
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[opts.norm_width(d)]));
        Ok(Self { d, heads, wr, wi, gamma, beta, opts })
    }

    /// Real mixing weights: `2 * heads * (d/heads)^2 = 2 d^2 / n`.
    pub fn mixing_params(&self) -> usize {
        let b = self.d / self.heads;
        2 * self.heads * b * b
    }

    pub fn forward(&self, g: &mut Graph, s: Var) -> Result<Var> {
        let (wr, wi) = (g.param(self.wr), g.param(self.wi));
        spectral_forward(g, s, self.d, &self.opts, (self.gamma, self.beta), |g, x| {
            g.complex_block_mix(x, wr, wi, self.heads)
        })
    }
}

/// Global-filter Fourier mixer: one complex weight per (frequency, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct FtLayer {
    pub k: usize,
    pub d: usize,
    /// `K x d` real and imaginary filters.
    pub wr: ParamId,
    pub wi: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub opts: MixerOptions,
}

impl FtLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        d: usize,
        opts: MixerOptions,
        rng: &mut R,
    ) -> Self {
        let wr = store.add(format!("{prefix}.wr"), Tensor::uniform(&[k, d], 1.0, rng));
        let wi = store.add(format!("{prefix}.wi"), Tensor::uniform(&[k, d], 1.0, rng));
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones(&[opts.norm_width(d)]));
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[opts.norm_width(d)]));
        Self { k, d, wr, wi, gamma, beta, opts }
    }

    /// `2 K d` real numbers (`K d` complex).
    pub fn mixing_params(&self) -> usize {
        2 * self.k * self.d
    }

    pub fn forward(&self, g: &mut Graph, s: Var) -> Result<Var> {
        if g.value(s).rows() != self.k {
            return Err(Error::Contract(format!("filter built for K = {}, got {} rows", self.k, g.value(s).rows())));
        }
        let (wr, wi) = (g.param(self.wr), g.param(self.wi));
        spectral_forward(g, s, self.d, &self.opts, (self.gamma, self.beta), |g, x| g.complex_hadamard(x, wr, wi))
    }
}

fn spectral_forward(
    g: &mut Graph,
    s: Var,
    d: usize,
    opts: &MixerOptions,
    norm: (ParamId, ParamId),
    mix: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let st = g.value(s);
    if st.cols() != d {
        return Err(dim_err!("mixer built for d = {d}, got {}", st.cols()));
    }
    let x = g.rfft_rows(s);
    let mut y = mix(g, x)?;
    if opts.activation == Activation::Leaky {
        y = g.leaky_relu(y, LEAK);
    }
    if opts.residual {
        y = g.add(y, x)?;
    }
    let spectral_norm = opts.layer_norm && opts.norm_site == NormSite::Frequency;
    if spectral_norm {
        let (gamma, beta) = (g.param(norm.0), g.param(norm.1));
        y = g.layer_norm(y, gamma, beta)?;
    }
    let out = g.irfft_real_rows(y)?;
    if opts.layer_norm && !spectral_norm {
        let (gamma, beta) = (g.param(norm.0), g.param(norm.1));
        return g.layer_norm(out, gamma, beta);
    }
    Ok(out)
}

/// Multi-head self-attention over the rows with four `d x d` projections.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaLayer {
    pub d: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub opts: MixerOptions,
}

impl MhsaLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        opts: MixerOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide d = {d}")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut proj = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::uniform(&[d, d], bound, rng));
        let (wq, wk, wv, wo) = (proj("wq"), proj("wk"), proj("wv"), proj("wo"));
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones(&[d]));
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]));
        Ok(Self { d, heads, wq, wk, wv, wo, gamma, beta, opts })
    }

    /// `4 d^2`.
    pub fn mixing_params(&self) -> usize {
        4 * self.d * self.d
    }

    /// Rows with `mask[i] == false` are not attended to.
    pub fn forward(&self, g: &mut Graph, s: Var, mask: &[bool]) -> Result<Var> {
        let st = g.value(s);
        let (k, d) = (st.rows(), st.cols());
        if d != self.d || mask.len() != k {
            return Err(dim_err!("mhsa expects {k} mask flags and d = {}, got {} / {d}", self.d, mask.len()));
        }
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(s, wq)?;
        let kk = g.matmul(s, wk)?;
        let v = g.matmul(s, wv)?;
        let b = d / self.heads;
        let scale = 1.0 / (b as f64).sqrt();
        let mut bias = Tensor::zeros(&[k, k]);
        for r in 0..k {
            for (c, &m) in mask.iter().enumerate() {
                if !m {
                    bias.set(r, c, -1e9);
                }
            }
        }
        let bias = g.constant(bias);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * b, b)?;
            let kh = g.slice_cols(kk, h * b, b)?;
            let vh = g.slice_cols(v, h * b, b)?;
            let kt = g.transpose(kh);
            let sc = g.matmul(qh, kt)?;
            let sc = g.scale(sc, scale);
            let sc = g.add(sc, bias)?;
            let p = g.softmax_rows(sc)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let mut y = g.matmul(cat, wo)?;
        if self.opts.residual {
            y = g.add(y, s)?;
        }
        if self.opts.layer_norm {
            let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
            y = g.layer_norm(y, gamma, beta)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Mhft(MhftLayer),
    Ft(FtLayer),
    Mhsa(MhsaLayer),
    None,
}

impl Mixer {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        kind: MixerKind,
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        d: usize,
        heads: usize,
        opts: MixerOptions,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            MixerKind::Mhft => Mixer::Mhft(MhftLayer::new(store, prefix, d, heads, opts, rng)?),
            MixerKind::Ft => Mixer::Ft(FtLayer::new(store, prefix, k, d, opts, rng)),
            MixerKind::Mhsa => Mixer::Mhsa(MhsaLayer::new(store, prefix, d, heads, opts, rng)?),
            MixerKind::None => Mixer::None,
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Mhft(_) => MixerKind::Mhft,
            Mixer::Ft(_) => MixerKind::Ft,
            Mixer::Mhsa(_) => MixerKind::Mhsa,
            Mixer::None => MixerKind::None,
        }
    }

    pub fn mixing_params(&self) -> usize {
        match self {
            Mixer::Mhft(l) => l.mixing_params(),
            Mixer::Ft(l) => l.mixing_params(),
            Mixer::Mhsa(l) => l.mixing_params(),
            Mixer::None => 0,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: Var, mask: &[bool]) -> Result<Var> {
        match self {
            Mixer::Mhft(l) => l.forward(g, s),
            Mixer::Ft(l) => l.forward(g, s),
            Mixer::Mhsa(l) => l.forward(g, s, mask),
            Mixer::None => Ok(s),
        }
    }

    /// Forward pass outside of training.
    pub fn apply(&self, store: &ParamStore, s: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let v = g.constant(s.clone());
        let out = self.forward(&mut g, v, mask)?;
        Ok(g.value(out).clone())
    }
}
