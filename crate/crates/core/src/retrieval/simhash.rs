//! Random-hyperplane signatures packed into `u64` words.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::PAD_ID;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Fixed `d x m` Gaussian projection. Stored column-major (one hyperplane per
/// row of `planes`) so each bit is a contiguous dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct HashMatrix {
    planes: Tensor,
    seed: u64,
}

impl HashMatrix {
    pub fn new(d: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Sampled as d x m, then transposed, so H[i][j] is independent of storage.
        let h = Tensor::randn(&[d, m], &mut rng);
        Self { planes: h.transpose(), seed }
    }

    /// Builds from an explicit `d x m` matrix.
    pub fn from_matrix(h: &Tensor) -> Self {
        Self { planes: h.transpose(), seed: 0 }
    }

    pub fn dim(&self) -> usize {
        self.planes.cols()
    }

    pub fn bits(&self) -> usize {
        self.planes.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn words(&self) -> usize {
        self.bits().div_ceil(64)
    }

    /// Bit `j` is set iff `e . H[:, j] >= 0`.
    pub fn signature(&self, e: &[f64]) -> Result<BinarySignature> {
        if e.len() != self.dim() {
            return Err(dim_err!("vector of dim {} for a {}-dim hash", e.len(), self.dim()));
        }
        let mut words = vec![0u64; self.words()];
        self.sign_into(e, &mut words);
        Ok(BinarySignature { words, bits: self.bits() })
    }

    fn sign_into(&self, e: &[f64], out: &mut [u64]) {
        out.iter_mut().for_each(|w| *w = 0);
        for j in 0..self.bits() {
            let p: f64 = self.planes.row_slice(j).iter().zip(e).map(|(a, b)| a * b).sum();
            if p >= 0.0 {
                out[j / 64] |= 1 << (j % 64);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinarySignature {
    words: Vec<u64>,
    bits: usize,
}

impl BinarySignature {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (j, &b) in bits.iter().enumerate() {
            if b {
                words[j / 64] |= 1 << (j % 64);
            }
        }
        Self { words, bits: bits.len() }
    }

    pub fn bit(&self, j: usize) -> bool {
        self.words[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

/// `popcount(a XOR b)`.
pub fn hamming(a: &BinarySignature, b: &BinarySignature) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::Contract(format!("signature lengths differ: {} vs {}", a.bits, b.bits)));
    }
    Ok(hamming_words(&a.words, &b.words))
}

#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Signatures of every row of an item embedding table, computed ahead of
/// retrieval so each behavior's signature is a lookup.
#[derive(Debug, Clone)]
pub struct ItemSignatureTable {
    words: Vec<u64>,
    words_per: usize,
    bits: usize,
    steps_since_refresh: usize,
}

impl ItemSignatureTable {
    pub fn compute(hash: &HashMatrix, items: &Tensor) -> Result<Self> {
        if items.cols() != hash.dim() {
            return Err(dim_err!("item dim {} vs hash dim {}", items.cols(), hash.dim()));
        }
        let wp = hash.words();
        let mut words = vec![0u64; items.rows() * wp];
        for (r, out) in words.chunks_mut(wp).enumerate() {
            hash.sign_into(items.row_slice(r), out);
        }
        Ok(Self { words, words_per: wp, bits: hash.bits(), steps_since_refresh: 0 })
    }

    pub fn refresh(&mut self, hash: &HashMatrix, items: &Tensor) -> Result<()> {
        *self = Self::compute(hash, items)?;
        Ok(())
    }

    pub fn tick(&mut self) {
        self.steps_since_refresh += 1;
    }

    pub fn staleness(&self) -> usize {
        self.steps_since_refresh
    }

    /// True once more than `refresh_every` updates happened since the last refresh.
    pub fn needs_refresh(&self, refresh_every: usize) -> bool {
        self.steps_since_refresh >= refresh_every.max(1)
    }

    pub fn get(&self, id: usize) -> &[u64] {
        &self.words[id * self.words_per..(id + 1) * self.words_per]
    }

    pub fn len(&self) -> usize {
        self.words.len() / self.words_per.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }
}

/// Signatures aligned with one (padded) behavior sequence.
#[derive(Debug, Clone)]
pub struct SignatureStore {
    words: Vec<u64>,
    words_per: usize,
    bits: usize,
    valid: Vec<bool>,
}

impl SignatureStore {
    /// Looks up each behavior's signature; padding ids are marked invalid.
    pub fn from_ids(table: &ItemSignatureTable, ids: &[usize]) -> Result<Self> {
        let wp = table.words_per;
        let mut words = Vec::with_capacity(ids.len() * wp);
        let mut valid = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= table.len() {
                return Err(Error::Input(format!("item id {id} has no signature")));
            }
            words.extend_from_slice(table.get(id));
            valid.push(id != PAD_ID);
        }
        Ok(Self { words, words_per: wp, bits: table.bits, valid })
    }

    /// Hashes each row of `s` directly; all rows valid unless `valid` says otherwise.
    pub fn from_embeddings(hash: &HashMatrix, s: &Tensor, valid: Option<&[bool]>) -> Result<Self> {
        let t = ItemSignatureTable::compute(hash, s)?;
        let n = s.rows();
        let valid = valid.map_or_else(|| vec![true; n], <[bool]>::to_vec);
        if valid.len() != n {
            return Err(dim_err!("{} validity flags for {} rows", valid.len(), n));
        }
        Ok(Self { words: t.words, words_per: t.words_per, bits: t.bits, valid })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub(crate) fn words_at(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per..(i + 1) * self.words_per]
    }
}
