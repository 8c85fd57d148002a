use mirrn::retrieval::{search, top_k_by_inner_product, HashMatrix, SignatureStore};
use mirrn::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Behaviors lie near one of `d` orthogonal directions; each user has
/// exactly `k` behaviors in the target's cluster.
#[test]
fn target_search_recovers_planted_cluster() {
    let (d, l, k, m) = (16, 200, 32, 64);
    let hash = HashMatrix::new(d, m, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noisy = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|j| f64::from(u8::from(j == c)) + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let mut total = 0.0;
    let users = 200;
    for _ in 0..users {
        let target_cluster = rng.random_range(0..d);
        let mut clusters: Vec<usize> = vec![target_cluster; k];
        while clusters.len() < l {
            let c = rng.random_range(0..d);
            if c != target_cluster {
                clusters.push(c);
            }
        }
        clusters.shuffle(&mut rng);
        let rows: Vec<f64> = clusters.iter().flat_map(|&c| noisy(c, &mut rng)).collect();
        let s = Tensor::new(vec![l, d], rows).unwrap();
        let target = Tensor::row(&noisy(target_cluster, &mut rng));
        let planted: Vec<usize> = (0..l).filter(|&i| clusters[i] == target_cluster).collect();
        let exact = top_k_by_inner_product(&s, &vec![true; l], target.data(), k).unwrap();
        assert_eq!(exact, planted, "oracle top-K is the planted cluster");
        let store = SignatureStore::from_embeddings(&hash, &s, None).unwrap();
        let got = search(&store, &hash, &target, k).unwrap();
        let hit = got.indices.iter().filter(|i| planted.contains(i)).count();
        total += hit as f64 / k as f64;
    }
    let recall = total / users as f64;
    assert!(recall >= 0.9, "mean recall {recall}");
}
