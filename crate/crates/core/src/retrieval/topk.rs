use super::simhash::{hamming_words, BinarySignature, SignatureStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Retrieved behaviors, chronologically sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubSequence {
    pub indices: Vec<usize>,
    pub distances: Vec<u32>,
}

impl SubSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Item ids of the retrieved positions.
    pub fn ids(&self, padded_ids: &[usize]) -> Vec<usize> {
        self.indices.iter().map(|&i| padded_ids[i]).collect()
    }

    /// Embedding view `K x d`.
    pub fn gather(&self, s: &Tensor) -> Result<Tensor> {
        s.select_rows(&self.indices)
    }
}

/// The `k` valid behaviors nearest to `query` in Hamming distance. Ties go
/// to the more recent (larger) index; the result is re-sorted by position.
/// Fewer than `k` valid behaviors yields a shorter subsequence.
pub fn top_k_by_hamming(store: &SignatureStore, query: &BinarySignature, k: usize) -> Result<SubSequence> {
    if k == 0 {
        return Err(Error::Contract("top-k needs k >= 1".into()));
    }
    if query.len() != store.bits() {
        return Err(Error::Contract(format!("query has {} bits, store {}", query.len(), store.bits())));
    }
    let q = query.words();
    // Distances are bounded by the bit count, so a histogram finds the
    // cut-off distance without sorting.
    let mut dist = vec![u32::MAX; store.len()];
    let mut hist = vec![0usize; store.bits() + 1];
    for (i, d) in dist.iter_mut().enumerate().filter(|(i, _)| store.is_valid(*i)) {
        *d = hamming_words(store.words_at(i), q);
        hist[*d as usize] += 1;
    }
    let mut below = 0usize;
    // With at most k valid behaviors every one of them is kept.
    let mut cut = u32::MAX - 1;
    for (h, &n) in hist.iter().enumerate() {
        if below + n >= k {
            cut = h as u32;
            break;
        }
        below += n;
    }
    // Of the behaviors at the cut-off distance, the most recent ones fill
    // the remaining slots.
    let mut at_cut = k.saturating_sub(below);
    let mut first_at_cut = dist.len();
    for (i, &d) in dist.iter().enumerate().rev() {
        if at_cut == 0 {
            break;
        }
        if d == cut {
            at_cut -= 1;
            first_at_cut = i;
        }
    }
    let mut out = SubSequence::default();
    for (i, &d) in dist.iter().enumerate() {
        if d < cut || (d == cut && i >= first_at_cut) {
            out.indices.push(i);
            out.distances.push(d);
        }
    }
    Ok(out)
}

/// Exact inner-product top-`k` over the valid rows of `s` with the same
/// recency tie-break. Returns chronologically sorted indices.
pub fn top_k_by_inner_product(s: &Tensor, valid: &[bool], query: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Contract("top-k needs k >= 1".into()));
    }
    let mut scored: Vec<(f64, usize)> = (0..s.rows())
        .filter(|&i| valid[i])
        .map(|i| (s.row_slice(i).iter().zip(query).map(|(a, b)| a * b).sum(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    let mut idx: Vec<usize> = scored.into_iter().map(|(_, i)| i).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Fraction of `truth` present in `got`.
pub fn recall(got: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth.iter().filter(|t| got.contains(t)).count();
    hit as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::simhash::{HashMatrix, ItemSignatureTable};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Store whose i-th signature sits at Hamming distance `dist[i]` from the
    /// all-zero query.
    fn store_with_distances(dist: &[u32]) -> (SignatureStore, BinarySignature) {
        let bits: Vec<Vec<bool>> =
            dist.iter().map(|&d| (0..8).map(|j| j < d as usize).collect()).collect();
        // Encode rows as +-1 vectors against an identity hash: bit j set iff row[j] >= 0.
        let rows: Vec<Vec<f64>> =
            bits.iter().map(|b| b.iter().map(|&x| if x { 1.0 } else { -1.0 }).collect()).collect();
        let s = Tensor::from_rows(&rows).unwrap();
        let hm = HashMatrix::from_matrix(&Tensor::eye(8));
        let store = SignatureStore::from_embeddings(&hm, &s, None).unwrap();
        (store, BinarySignature::from_bits(&[false; 8]))
    }

    fn sort_oracle(dist: &[u32], k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist[a].cmp(&dist[b]).then(b.cmp(&a)));
        let mut top: Vec<usize> = order.into_iter().take(k).collect();
        top.sort_unstable();
        top
    }

    #[test]
    fn smallest_distances_win() {
        let (store, q) = store_with_distances(&[3, 1, 2, 1]);
        let sub = top_k_by_hamming(&store, &q, 2).unwrap();
        assert_eq!(sub.indices, vec![1, 3]);
        assert_eq!(sub.distances, vec![1, 1]);
    }

    #[test]
    fn ties_prefer_recent() {
        let (store, q) = store_with_distances(&[2; 5]);
        assert_eq!(top_k_by_hamming(&store, &q, 2).unwrap().indices, vec![3, 4]);
    }

    #[test]
    fn k_equal_length_is_identity() {
        let (store, q) = store_with_distances(&[5, 0, 7, 2]);
        assert_eq!(top_k_by_hamming(&store, &q, 4).unwrap().indices, vec![0, 1, 2, 3]);
        assert_eq!(top_k_by_hamming(&store, &q, 9).unwrap().indices, vec![0, 1, 2, 3]);
        assert!(top_k_by_hamming(&store, &q, 0).is_err());
    }

    #[test]
    fn padding_never_selected() {
        let h = HashMatrix::new(4, 64, 3);
        let items = Tensor::randn(&[6, 4], &mut ChaCha8Rng::seed_from_u64(0));
        let t = ItemSignatureTable::compute(&h, &items).unwrap();
        let store = SignatureStore::from_ids(&t, &[0, 0, 0, 5, 2]).unwrap();
        let q = h.signature(items.row_slice(0)).unwrap();
        let sub = top_k_by_hamming(&store, &q, 4).unwrap();
        assert_eq!(sub.indices, vec![3, 4]);
    }

    #[test]
    fn inner_product_top_k() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let got = top_k_by_inner_product(&s, &[true; 4], &[1.0, 0.0], 2).unwrap();
        assert_eq!(got, vec![2, 3]);
        assert_eq!(recall(&got, &[2, 0]), 0.5);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_sort(dist in proptest::collection::vec(0u32..9, 1..40), k in 1usize..12) {
            let (store, q) = store_with_distances(&dist);
            let sub = top_k_by_hamming(&store, &q, k).unwrap();
            prop_assert_eq!(sub.indices, sort_oracle(&dist, k));
        }

        #[test]
        fn invariant_under_positive_rescaling(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = HashMatrix::new(6, 64, seed);
            let s = Tensor::randn(&[30, 6], &mut rng);
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let run = |scale: f64| {
                let st = SignatureStore::from_embeddings(&h, &s.scale(scale), None).unwrap();
                let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
                top_k_by_hamming(&st, &h.signature(&qs).unwrap(), 8).unwrap()
            };
            prop_assert_eq!(run(1.0), run(c));
        }
    }
}
