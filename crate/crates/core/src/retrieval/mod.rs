//! Multi-granularity retrieval: SimHash signatures, Hamming top-K and the
//! target / local / global query builders.

mod query;
mod simhash;
mod topk;

use serde::{Deserialize, Serialize};

pub use query::{
    build_query_gasu, build_query_gasu_with, build_query_lasu, build_query_tasu, masked_mean, recent_rows, Gru,
};
pub use simhash::{hamming, BinarySignature, HashMatrix, ItemSignatureTable, SignatureStore};
pub use topk::{recall, top_k_by_hamming, top_k_by_inner_product, SubSequence};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Signature bits.
    pub m: usize,
    /// Subsequence length.
    #[serde(rename = "K")]
    pub k: usize,
    /// Recent window for the local query.
    #[serde(rename = "J")]
    pub j: usize,
    pub use_gru: bool,
    pub refresh_every: usize,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { m: 64, k: 32, j: 10, use_gru: false, refresh_every: 1, seed: 7 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.j == 0 {
            return Err(Error::Config("m, K and J must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchUnit {
    Tasu,
    Lasu,
    Gasu,
}

impl SearchUnit {
    pub const ALL: [SearchUnit; 3] = [SearchUnit::Tasu, SearchUnit::Lasu, SearchUnit::Gasu];

    pub fn name(self) -> &'static str {
        match self {
            SearchUnit::Tasu => "tasu",
            SearchUnit::Lasu => "lasu",
            SearchUnit::Gasu => "gasu",
        }
    }
}

impl std::str::FromStr for SearchUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tasu" => Ok(SearchUnit::Tasu),
            "lasu" => Ok(SearchUnit::Lasu),
            "gasu" => Ok(SearchUnit::Gasu),
            _ => Err(Error::Config(format!("unknown search unit {s:?}"))),
        }
    }
}

/// Query vectors for one target, before hashing.
#[derive(Debug, Clone, PartialEq)]
pub struct Queries {
    pub target: Tensor,
    pub local: Tensor,
    pub global: Tensor,
}

/// Builds all three queries. `centroid` is the cluster centroid already
/// resolved for the target.
pub fn build_queries(
    s: &Tensor,
    valid: &[bool],
    e_t: &Tensor,
    centroid: &Tensor,
    j: usize,
    gru: Option<&Gru>,
) -> Result<Queries> {
    let recent = recent_rows(s, valid, j)?;
    Ok(Queries {
        target: build_query_tasu(e_t),
        local: build_query_lasu(&recent, gru)?,
        global: build_query_gasu_with(centroid, s, valid)?,
    })
}

/// Same queries as [`build_queries`], read straight from an embedding
/// table for the item ids of a (padded) sequence; pad id 0 is invalid.
pub fn build_queries_from_table(
    table: &Tensor,
    ids: &[usize],
    e_t: &Tensor,
    centroid: &Tensor,
    j: usize,
    gru: Option<&Gru>,
) -> Result<Queries> {
    let d = table.cols();
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for &id in ids.iter().filter(|&&i| i != 0) {
        for (o, v) in sum.iter_mut().zip(table.row_slice(id)) {
            *o += v;
        }
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut recent: Vec<usize> = ids.iter().rev().copied().filter(|&i| i != 0).take(j).collect();
    recent.reverse();
    Ok(Queries {
        target: build_query_tasu(e_t),
        local: build_query_lasu(&table.select_rows(&recent)?, gru)?,
        global: centroid.clone().reshape(&[1, d])?.add(&Tensor::row(&sum))?,
    })
}

/// Hashes `query` and returns its top-`k` behaviors from `store`.
pub fn search(store: &SignatureStore, hash: &HashMatrix, query: &Tensor, k: usize) -> Result<SubSequence> {
    let sig = hash.signature(query.data())?;
    top_k_by_hamming(store, &sig, k)
}

/// Subsequences from the three search units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieved {
    pub target: SubSequence,
    pub local: SubSequence,
    pub global: SubSequence,
}

impl Retrieved {
    pub fn get(&self, unit: SearchUnit) -> &SubSequence {
        match unit {
            SearchUnit::Tasu => &self.target,
            SearchUnit::Lasu => &self.local,
            SearchUnit::Gasu => &self.global,
        }
    }
}

/// Runs the three search units over one behavior sequence `s` whose
/// signatures are in `store` (which also carries padding validity).
pub fn retrieve_all(
    store: &SignatureStore,
    s: &Tensor,
    e_t: &Tensor,
    centroid: &Tensor,
    hash: &HashMatrix,
    cfg: &RetrievalConfig,
    gru: Option<&Gru>,
) -> Result<Retrieved> {
    let valid: Vec<bool> = (0..store.len()).map(|i| store.is_valid(i)).collect();
    let q = build_queries(s, &valid, e_t, centroid, cfg.j, gru)?;
    Ok(Retrieved {
        target: search(store, hash, &q.target, cfg.k)?,
        local: search(store, hash, &q.local, cfg.k)?,
        global: search(store, hash, &q.global, cfg.k)?,
    })
}
