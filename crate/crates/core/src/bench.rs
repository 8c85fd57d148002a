//! Wall-time micro benchmarks: Hamming vs inner-product top-K, the three
//! mixers, and MIRRN vs the single-search baseline end to end.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasynth::{generate, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Mirrn, ModelConfig, SimBaseline};
use crate::refinement::{Mixer, MixerKind, MixerOptions};
use crate::retrieval::{
    recall, top_k_by_hamming, top_k_by_inner_product, HashMatrix, RetrievalConfig, SignatureStore,
};
use crate::tensor::{ParamStore, Tensor};
use crate::clustering::fit_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub name: String,
    pub median_ns: f64,
    pub p95_ns: f64,
    /// Dominant operation count of one repetition.
    pub ops: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub bench: String,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub config: BTreeMap<String, u64>,
    pub cases: Vec<BenchCase>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl BenchReport {
    fn new(bench: &str, reps: usize, config: &[(&str, usize)]) -> Self {
        Self {
            bench: bench.into(),
            reps,
            warmup: warmup_for(reps),
            threads: 1,
            config: config.iter().map(|&(k, v)| (k.to_string(), v as u64)).collect(),
            cases: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn case(&self, name: &str) -> Option<&BenchCase> {
        self.cases.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }
}

/// Minimum repetitions recorded by every benchmark.
pub const MIN_REPS: usize = 30;

fn warmup_for(reps: usize) -> usize {
    (reps / 10).max(3)
}

/// Median and 95th percentile of per-repetition wall time, after warmup.
pub fn time_reps(reps: usize, mut f: impl FnMut()) -> (f64, f64) {
    for _ in 0..warmup_for(reps) {
        f();
    }
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_nanos() as f64
        })
        .collect();
    t.sort_by(f64::total_cmp);
    let pick = |q: f64| t[((t.len() - 1) as f64 * q).round() as usize];
    (pick(0.5), pick(0.95))
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("reps = {reps}, at least {MIN_REPS} required")));
    }
    Ok(())
}

/// Runs `threads` copies of a benchmark at once and returns the report of
/// the first, tagged with the thread count. One thread runs inline.
pub fn run_concurrent(threads: usize, f: impl Fn() -> Result<BenchReport> + Sync) -> Result<BenchReport> {
    if threads <= 1 {
        return f();
    }
    let mut report = std::thread::scope(|s| {
        let others: Vec<_> = (1..threads).map(|_| s.spawn(&f)).collect();
        let first = f();
        for h in others {
            h.join().map_err(|_| Error::Contract("benchmark thread panicked".into()))??;
        }
        first
    })?;
    report.threads = threads;
    Ok(report)
}

/// Hamming top-K over precomputed packed signatures vs exact inner-product
/// top-K over the raw rows, on the same `L x d` data.
pub fn bench_retrieval(l: usize, d: usize, m: usize, k: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    check_reps(reps)?;
    if l == 0 || d == 0 || m == 0 || k == 0 {
        return Err(Error::Config("L, d, m and K must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Tensor::randn(&[l, d], &mut rng);
    let q = Tensor::randn(&[1, d], &mut rng);
    let valid = vec![true; l];
    let hash = HashMatrix::new(d, m, seed);
    let store = SignatureStore::from_embeddings(&hash, &s, None)?;
    let qsig = hash.signature(q.data())?;

    let mut report = BenchReport::new("retrieval", reps, &[("L", l), ("d", d), ("m", m), ("K", k), ("reps", reps)]);
    let (med, p95) = time_reps(reps, || {
        black_box(top_k_by_hamming(black_box(&store), black_box(&qsig), k).expect("valid inputs"));
    });
    report.cases.push(BenchCase {
        name: "hamming".into(),
        median_ns: med,
        p95_ns: p95,
        ops: (l * hash.words()) as u64,
        params: None,
    });
    let (med, p95) = time_reps(reps, || {
        black_box(top_k_by_inner_product(black_box(&s), &valid, black_box(q.data()), k).expect("valid inputs"));
    });
    report.cases.push(BenchCase { name: "inner_product".into(), median_ns: med, p95_ns: p95, ops: (l * d) as u64, params: None });
    let (med, p95) = time_reps(reps, || {
        black_box(hash.signature(black_box(q.data())).expect("valid query"));
    });
    report.cases.push(BenchCase { name: "hash_query".into(), median_ns: med, p95_ns: p95, ops: (m * d) as u64, params: None });

    let got = top_k_by_hamming(&store, &qsig, k)?.indices;
    let truth = top_k_by_inner_product(&s, &valid, q.data(), k)?;
    report.metrics.insert("recall".into(), recall(&got, &truth));
    report.metrics.insert("random_recall".into(), (k as f64 / l as f64).min(1.0));
    Ok(report)
}

/// One forward pass of each mixer over the same `K x d` input.
pub fn bench_mixer(k: usize, d: usize, n: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    check_reps(reps)?;
    if k == 0 || d == 0 || n == 0 || d % n != 0 {
        return Err(Error::Config(format!("need K, d > 0 and n | d (K = {k}, d = {d}, n = {n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Tensor::randn(&[k, d], &mut rng);
    let mask = vec![true; k];
    let mut report = BenchReport::new("mixer", reps, &[("K", k), ("d", d), ("n", n), ("reps", reps)]);
    for (name, kind) in [("mhsa", MixerKind::Mhsa), ("ft", MixerKind::Ft), ("mhft", MixerKind::Mhft)] {
        let mut store = ParamStore::new();
        let mixer = Mixer::build(kind, &mut store, name, k, d, n, MixerOptions::default(), &mut rng)?;
        let out = mixer.apply(&store, &s, &mask)?;
        if !out.is_finite() {
            return Err(Error::Contract(format!("{name} produced non-finite output")));
        }
        let (med, p95) = time_reps(reps, || {
            black_box(mixer.apply(&store, black_box(&s), &mask).expect("valid input"));
        });
        let logk = (k.max(2) as f64).log2().ceil() as usize;
        let ops = match kind {
            MixerKind::Mhsa => k * k * d + 4 * k * d * d,
            MixerKind::Ft => k * d * logk + k * d,
            _ => k * d * logk + k * d * d / n,
        };
        report.cases.push(BenchCase {
            name: name.into(),
            median_ns: med,
            p95_ns: p95,
            ops: ops as u64,
            params: Some(mixer.mixing_params()),
        });
    }
    Ok(report)
}

/// Batched inference (retrieval included) of the full three-unit model vs
/// the single-search baseline on the same synthetic samples.
pub fn bench_overhead(
    model: &ModelConfig,
    retrieval: &RetrievalConfig,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    check_reps(reps)?;
    let synth = SynthConfig {
        vocab: model.vocab,
        users: batch.max(1),
        l: model.l_max,
        seed,
        ..SynthConfig::default()
    };
    let samples: Vec<Sample> = generate(&synth)?.samples.into_iter().take(batch).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = ModelConfig { users: synth.users, ..model.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warm = Tensor::randn(&[cfg.vocab + 1, cfg.d], &mut rng);
    let ids: Vec<usize> = (1..=cfg.vocab).collect();
    let clusters = fit_rows(&warm, &ids, 16.min(cfg.vocab), 1.0e3)?;

    let mut ms = ParamStore::new();
    let mirrn = Mirrn::new(cfg.clone(), retrieval.clone(), &mut ms, Some(clusters), Some(&warm), &mut rng)?;
    let msig = mirrn.signatures(&ms)?;
    let mut bs = ParamStore::new();
    let base = SimBaseline::new(cfg.clone(), retrieval, &mut bs, Some(&warm), &mut rng)?;
    let bsig = base.signatures(&bs)?;

    let mut report = BenchReport::new(
        "overhead",
        reps,
        &[("L", cfg.l_max), ("d", cfg.d), ("K", retrieval.k), ("m", retrieval.m), ("n", cfg.n), ("batch", batch), ("reps", reps)],
    );
    let (med, p95) = time_reps(reps, || {
        black_box(mirrn.predict(&ms, &msig, black_box(&refs)).expect("valid batch"));
    });
    report.cases.push(BenchCase {
        name: "mirrn".into(),
        median_ns: med,
        p95_ns: p95,
        ops: (3 * batch * retrieval.k) as u64,
        params: Some(ms.num_scalars()),
    });
    let (bmed, bp95) = time_reps(reps, || {
        black_box(base.predict(&bs, &bsig, black_box(&refs)).expect("valid batch"));
    });
    report.cases.push(BenchCase {
        name: "single_search".into(),
        median_ns: bmed,
        p95_ns: bp95,
        ops: (batch * base.k) as u64,
        params: Some(bs.num_scalars()),
    });
    report.metrics.insert("ratio".into(), med / bmed);
    Ok(report)
}
