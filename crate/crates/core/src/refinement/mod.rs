//! Refinement of retrieved subsequences: target-relative position encoding,
//! a sequence mixer and masked mean pooling.

mod mixer;

use rand::Rng;

pub use mixer::{Activation, FtLayer, MhftLayer, MhsaLayer, Mixer, MixerKind, MixerOptions, NormSite};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Offsets from the target, which sits right after position `l - 1`:
/// `I'_j = l - I_j`, in `[1, l]`.
pub fn tape_indices(indices: &[usize], l: usize) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| if i < l { Ok(l - i) } else { Err(Error::Contract(format!("index {i} outside a length-{l} sequence"))) })
        .collect()
}

/// Learnable position rows indexed by target offset. Row 0 is a frozen zero
/// row used for padded slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeTable {
    pub id: ParamId,
    pub max_offset: usize,
    pub dim: usize,
}

impl TapeTable {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, l_max: usize, dim: usize, rng: &mut R) -> Self {
        let mut w = Tensor::uniform(&[l_max + 1, dim], 1.0 / (dim as f64).sqrt(), rng);
        w.row_slice_mut(0).iter_mut().for_each(|v| *v = 0.0);
        Self { id: store.add(name, w), max_offset: l_max, dim }
    }

    fn check(&self, offsets: &[usize]) -> Result<()> {
        if let Some(&o) = offsets.iter().find(|&&o| o > self.max_offset) {
            return Err(Error::Contract(format!("offset {o} beyond table size {}", self.max_offset)));
        }
        Ok(())
    }

    /// `s + lookup(TPE, offsets)`; offset 0 adds nothing.
    pub fn apply(&self, g: &mut Graph, s: Var, offsets: &[usize]) -> Result<Var> {
        self.check(offsets)?;
        let t = g.param(self.id);
        let pos = g.gather(t, offsets, true)?;
        g.add(s, pos)
    }
}

/// Non-differentiable [`TapeTable::apply`] against an explicit table.
pub fn apply_tape(s: &Tensor, offsets: &[usize], table: &Tensor) -> Result<Tensor> {
    if offsets.len() != s.rows() || table.cols() != s.cols() {
        return Err(dim_err!("{} offsets for {} rows", offsets.len(), s.rows()));
    }
    let mut out = s.clone();
    for (r, &o) in offsets.iter().enumerate() {
        if o == 0 {
            continue;
        }
        if o >= table.rows() {
            return Err(Error::Contract(format!("offset {o} beyond table size {}", table.rows() - 1)));
        }
        for (v, p) in out.row_slice_mut(r).iter_mut().zip(table.row_slice(o)) {
            *v += p;
        }
    }
    Ok(out)
}

/// Mean over the rows flagged in `mask`; a zero row when none are.
pub fn masked_mean(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        let d = g.value(x).cols();
        return Ok(g.constant(Tensor::zeros(&[1, d])));
    }
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
    g.weighted_rows(x, &w)
}

/// `E = Avg_mask(mixer(s + TPE[offsets]))`.
pub fn refine(
    g: &mut Graph,
    s: Var,
    mask: &[bool],
    offsets: &[usize],
    tape: Option<&TapeTable>,
    mixer: &Mixer,
) -> Result<Var> {
    let x = match tape {
        Some(t) => t.apply(g, s, offsets)?,
        None => s,
    };
    let y = mixer.forward(g, x, mask)?;
    masked_mean(g, y, mask)
}

/// One MHFT layer applied outside of training.
pub fn mhft_forward(store: &ParamStore, s: &Tensor, layer: &MhftLayer) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let v = g.constant(s.clone());
    let out = layer.forward(&mut g, v)?;
    Ok(g.value(out).clone())
}
