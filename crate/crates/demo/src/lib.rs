//! Browser demo: SimHash locality, Hamming top-K recall and density-peak
//! clustering, exported through wasm-bindgen. Results are flat `f64`
//! arrays so the page can draw them without glue types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use mirrn::clustering::{default_bandwidth, fit};
use mirrn::retrieval::{hamming, recall, top_k_by_hamming, top_k_by_inner_product, HashMatrix, SignatureStore};
use mirrn::tensor::Tensor;

pub const SIGNATURE_LENGTHS: [usize; 6] = [4, 8, 16, 32, 64, 128];

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `[theta, disagreement rate]` for `steps` angles in `[0, pi]`.
#[wasm_bindgen]
pub fn hash_locality(d: usize, bits: usize, steps: usize, seed: u64) -> Vec<f64> {
    let d = d.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
    w.iter_mut().zip(&u).for_each(|(a, b)| *a -= p * b);
    let w = unit(w);
    let h = HashMatrix::new(d, bits.max(1), seed);
    let su = h.signature(&u).expect("matching dimension");
    let steps = steps.max(2);
    let mut out = Vec::with_capacity(2 * steps);
    for i in 0..steps {
        let theta = std::f64::consts::PI * i as f64 / (steps - 1) as f64;
        let v: Vec<f64> = u.iter().zip(&w).map(|(a, b)| theta.cos() * a + theta.sin() * b).collect();
        let diff = hamming(&su, &h.signature(&v).expect("matching dimension")).expect("same length");
        out.extend([theta, diff as f64 / h.bits() as f64]);
    }
    out
}

/// Mean recall of Hamming top-K against exact inner-product top-K, one
/// value per entry of [`SIGNATURE_LENGTHS`], followed by the random
/// baseline `K / L`.
#[wasm_bindgen]
pub fn recall_vs_m(l: usize, d: usize, k: usize, trials: usize, seed: u64) -> Vec<f64> {
    let (l, d, k, trials) = (l.max(1), d.max(1), k.max(1), trials.max(1));
    let mut out: Vec<f64> = SIGNATURE_LENGTHS
        .iter()
        .map(|&m| {
            let total: f64 = (0..trials as u64)
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
                    let s = Tensor::randn(&[l, d], &mut rng);
                    let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let h = HashMatrix::new(d, m, seed.wrapping_add(1000 + t));
                    let store = SignatureStore::from_embeddings(&h, &s, None).expect("shapes agree");
                    let got = top_k_by_hamming(&store, &h.signature(&q).expect("shapes agree"), k).expect("k > 0");
                    let truth = top_k_by_inner_product(&s, &vec![true; l], &q, k).expect("k > 0");
                    recall(&got.indices, &truth)
                })
                .sum();
            total / trials as f64
        })
        .collect();
    out.push((k as f64 / l as f64).min(1.0));
    out
}

/// Planted 2-D blobs clustered with `C = blobs`. Each point is
/// `[x, y, planted blob, assigned center, is center]`.
#[wasm_bindgen]
pub fn dpc_scatter(blobs: usize, per_blob: usize, spread: f64, seed: u64) -> Vec<f64> {
    let (blobs, per_blob) = (blobs.clamp(1, 12), per_blob.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread.abs().max(1e-6)).expect("positive spread");
    let mut rows = Vec::with_capacity(blobs * per_blob);
    let mut planted = Vec::with_capacity(blobs * per_blob);
    for b in 0..blobs {
        let ang = std::f64::consts::TAU * b as f64 / blobs as f64;
        let (cx, cy) = (4.0 * ang.cos(), 4.0 * ang.sin());
        for _ in 0..per_blob {
            rows.push(vec![cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)]);
            planted.push(b);
        }
    }
    let items = Tensor::from_rows(&rows).expect("equal rows");
    let model = fit(&items, blobs, default_bandwidth(&items)).expect("C <= points");
    let mut out = Vec::with_capacity(5 * rows.len());
    for (i, r) in rows.iter().enumerate() {
        let center = model.assignment[i] as f64;
        out.extend([r[0], r[1], planted[i] as f64, center, f64::from(u8::from(model.centers.contains(&i)))]);
    }
    out
}
