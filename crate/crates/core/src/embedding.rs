//! Feature encoding and the behavior-sequence matrix.
//!
//! Item id 0 is reserved for padding: it maps to a frozen zero row and is never
//! looked up for gradients. Short sequences are left-padded so the most recent
//! behavior always sits in the last row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const PAD_ID: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    CategoricalSingle { vocab: usize },
    CategoricalMulti { vocab: usize },
    Numeric { boundaries: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<Feature>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        for f in &self.features {
            match &f.kind {
                FeatureKind::Numeric { boundaries } => {
                    if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
                        return Err(Error::Config(format!(
                            "feature {}: bucket boundaries must be strictly increasing",
                            f.name
                        )));
                    }
                }
                FeatureKind::CategoricalSingle { vocab } | FeatureKind::CategoricalMulti { vocab } => {
                    if *vocab == 0 {
                        return Err(Error::Config(format!("feature {}: empty vocabulary", f.name)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rows needed in the embedding table for feature `name`.
    pub fn table_rows(&self, name: &str) -> Option<usize> {
        self.features.iter().find(|f| f.name == name).map(|f| match &f.kind {
            FeatureKind::CategoricalSingle { vocab } | FeatureKind::CategoricalMulti { vocab } => *vocab,
            FeatureKind::Numeric { boundaries } => boundaries.len() + 1,
        })
    }
}

/// Number of boundaries at or below `value`: a value equal to a boundary
/// falls into the upper bucket.
pub fn bucketize(value: f64, boundaries: &[f64]) -> Result<usize> {
    if value.is_nan() {
        return Err(Error::Input("cannot bucketize NaN".into()));
    }
    Ok(boundaries.partition_point(|&b| b <= value))
}

/// A learnable `rows x dim` lookup table stored in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub name: String,
    pub id: ParamId,
    pub rows: usize,
    pub dim: usize,
    /// Row 0 is the frozen padding row.
    pub padded: bool,
}

impl EmbeddingTable {
    /// Uniform init in `[-1/sqrt(d), 1/sqrt(d)]`; row 0 zeroed when `padded`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        padded: bool,
        rng: &mut R,
    ) -> Self {
        let mut w = Tensor::uniform(&[rows, dim], 1.0 / (dim as f64).sqrt(), rng);
        if padded && rows > 0 {
            w.row_slice_mut(PAD_ID).iter_mut().for_each(|v| *v = 0.0);
        }
        let id = store.add(name, w);
        Self { name: name.to_string(), id, rows, dim, padded }
    }

    pub fn weights<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.get(self.id)
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.rows {
            return Err(Error::Input(format!("id {id} out of range for table {} ({} rows)", self.name, self.rows)));
        }
        Ok(())
    }

    /// Differentiable row lookup.
    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.id);
        g.gather(t, ids, self.padded)
    }
}

/// Chronological item ids, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BehaviorSequence {
    pub items: Vec<usize>,
    pub timestamps: Option<Vec<u64>>,
}

impl BehaviorSequence {
    pub fn new(items: Vec<usize>) -> Self {
        Self { items, timestamps: None }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Left-padded to exactly `l_max` ids; longer sequences keep their most
    /// recent `l_max` behaviors.
    pub fn padded_ids(&self, l_max: usize) -> Vec<usize> {
        let take = self.items.len().min(l_max);
        let mut out = vec![PAD_ID; l_max - take];
        out.extend_from_slice(&self.items[self.items.len() - take..]);
        out
    }
}

/// `S = [e_1; ...; e_L]` with zero rows at padded positions.
pub fn embed_sequence(seq: &BehaviorSequence, table: &Tensor, l_max: usize) -> Result<Tensor> {
    let ids = seq.padded_ids(l_max);
    let d = table.cols();
    let mut out = Tensor::zeros(&[l_max, d]);
    for (i, &id) in ids.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        if id >= table.rows() {
            return Err(Error::Input(format!("item id {id} out of range for {} rows", table.rows())));
        }
        out.row_slice_mut(i).copy_from_slice(table.row_slice(id));
    }
    Ok(out)
}

/// Mean of the looked-up rows of the distinct ids; an empty set yields zeros.
pub fn multi_hot_embed(ids: &[usize], table: &Tensor) -> Result<Tensor> {
    let mut uniq = ids.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.is_empty() {
        return Ok(Tensor::zeros(&[1, table.cols()]));
    }
    table.select_rows(&uniq)?.mean_rows()
}

/// Differentiable variant of [`multi_hot_embed`].
pub fn multi_hot_lookup(g: &mut Graph, table: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
    let mut uniq = ids.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[1, table.dim])));
    }
    let rows = table.lookup(g, &uniq)?;
    g.mean_rows(rows)
}
