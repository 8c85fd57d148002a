//! Experiment driver: config, training loop, evaluation and ablations.

pub mod adam;
pub mod checkpoint;
pub mod metrics;

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use metrics::{auc, permutation_null, read_metrics, write_metrics, MetricRecord, NullAuc};

use crate::clustering::{default_bandwidth, fit_rows, pretrain_skipgram, ClusterModel, SkipGramConfig};
use crate::datasynth::{generate, read_dataset, split, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Mirrn, ModelConfig};
use crate::refinement::MhsaLayer;
use crate::retrieval::RetrievalConfig;
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: PathBuf,
    pub clusters: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dataset: "data/synth.jsonl".into(), clusters: "data/clusters.bin".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(rename = "C")]
    pub c: usize,
    /// Density bandwidth; the data-driven default when absent.
    pub sigma: Option<f64>,
    pub skipgram: SkipGramConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { c: 16, sigma: None, skipgram: SkipGramConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub clip: f64,
    pub null_shuffles: usize,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 256,
            epochs: 1,
            clip: 5.0,
            null_shuffles: 100,
            metrics: "runs/metrics.jsonl".into(),
            checkpoint: "runs/model.ckpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    pub results: PathBuf,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: ["full", "tasu", "no-mhft", "no-tape"].map(String::from).to_vec(),
            results: "runs/ablation.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub clustering: ClusterConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse { line, msg: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact { what: "config file", path: path.to_path_buf() })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.resolved_model().validate()?;
        self.retrieval.validate()?;
        if self.train.batch == 0 || self.train.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        if !(self.train.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.train.lr)));
        }
        if self.clustering.c == 0 {
            return Err(Error::Config("C must be positive".into()));
        }
        if self.clustering.sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        Ok(())
    }

    /// Model settings with the vocabulary and user count taken from the data.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig { vocab: self.synth.vocab, users: self.synth.users, ..self.model.clone() }
    }
}

/// Dataset plus everything derived from the training split before training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub samples: Vec<Sample>,
    pub splits: [Range<usize>; 3],
    /// Skip-gram item table used as the warm start.
    pub warm: Tensor,
    pub clusters: Option<ClusterModel>,
}

impl Prepared {
    pub fn train(&self) -> &[Sample] {
        &self.samples[self.splits[0].clone()]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.splits[1].clone()]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.splits[2].clone()]
    }
}

/// One history per user, in user order.
pub fn user_sequences(samples: &[Sample]) -> Vec<Vec<usize>> {
    let mut by_user: Vec<(usize, &Vec<usize>)> = samples.iter().map(|s| (s.user, &s.seq)).collect();
    by_user.sort_by_key(|p| p.0);
    by_user.dedup_by_key(|p| p.0);
    by_user.into_iter().map(|(_, s)| s.clone()).collect()
}

pub fn warm_start(cfg: &ExperimentConfig, train: &[Sample]) -> Result<Tensor> {
    pretrain_skipgram(&user_sequences(train), cfg.synth.vocab + 1, cfg.model.d, &cfg.clustering.skipgram)
}

/// Density-peak clustering of the item rows `1..=vocab`.
pub fn fit_clusters(cfg: &ExperimentConfig, items: &Tensor) -> Result<ClusterModel> {
    let ids: Vec<usize> = (1..items.rows()).collect();
    let sigma = match cfg.clustering.sigma {
        Some(s) => s,
        None => default_bandwidth(&items.select_rows(&ids)?),
    };
    fit_rows(items, &ids, cfg.clustering.c, sigma)
}

pub fn load_samples(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    read_dataset(&cfg.data.dataset)
}

/// Splits the data, pretrains the item table and (optionally) clusters it.
pub fn prepare(cfg: &ExperimentConfig, samples: Vec<Sample>, clusters: Option<ClusterModel>) -> Result<Prepared> {
    let splits = split(samples.len());
    if splits.iter().any(|r| r.is_empty()) {
        return Err(Error::Input(format!("{} samples are too few to split", samples.len())));
    }
    let warm = warm_start(cfg, &samples[splits[0].clone()])?;
    Ok(Prepared { samples, splits, warm, clusters })
}

/// In-memory pipeline: generate, pretrain and cluster.
pub fn prepare_synthetic(cfg: &ExperimentConfig) -> Result<Prepared> {
    let samples = generate(&cfg.synth)?.samples;
    let mut p = prepare(cfg, samples, None)?;
    p.clusters = Some(fit_clusters(cfg, &p.warm)?);
    Ok(p)
}

pub fn build_model(
    cfg: &ExperimentConfig,
    model_cfg: ModelConfig,
    prepared: &Prepared,
) -> Result<(ParamStore, Mirrn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let clusters = if model_cfg.needs_clusters() { prepared.clusters.clone() } else { None };
    let model = Mirrn::new(model_cfg, cfg.retrieval.clone(), &mut store, clusters, Some(&prepared.warm), &mut rng)?;
    Ok((store, model))
}

/// Click probabilities for `samples`, scored in batches.
pub fn evaluate(model: &Mirrn, store: &ParamStore, samples: &[Sample], batch: usize) -> Result<Vec<f64>> {
    let sigs = model.signatures(store)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(model.predict(store, &sigs, &refs)?);
    }
    Ok(out)
}

pub fn labels_of(samples: &[Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}

#[derive(Debug)]
pub struct TrainResult {
    pub store: ParamStore,
    pub model: Mirrn,
    pub log: Vec<MetricRecord>,
    pub val_scores: Vec<f64>,
    pub val_auc: f64,
}

/// Trains one model on the training split; logs loss per step and
/// validation AUC after every epoch.
pub fn train_model(cfg: &ExperimentConfig, model_cfg: ModelConfig, prepared: &Prepared) -> Result<TrainResult> {
    let (mut store, model) = build_model(cfg, model_cfg, prepared)?;
    let mut adam = AdamState::new(&store, cfg.train.lr);
    let mut sigs = model.signatures(&store)?;
    let mut log = Vec::new();
    let val_labels = labels_of(prepared.val());
    let mut step = 0;
    let mut val_scores = Vec::new();
    let mut val_auc = f64::NAN;
    for _ in 0..cfg.train.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in prepared.train().chunks(cfg.train.batch) {
            if sigs.needs_refresh(model.retrieval.refresh_every) {
                sigs.refresh(&model.hash, model.items.weights(&store))?;
            }
            let batch: Vec<&Sample> = chunk.iter().collect();
            let plans = batch.iter().map(|s| model.plan(&store, &sigs, s)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<f64> = chunk.iter().map(|s| s.label as f64).collect();
            let mut grads = {
                let mut g = Graph::new(&store);
                let p = model.forward(&mut g, &batch, &plans)?;
                let loss = g.bce(p, &labels)?;
                let lv = g.value(loss).data()[0];
                step += 1;
                if !lv.is_finite() {
                    return Err(Error::Diverged { step, msg: format!("loss is {lv}") });
                }
                epoch_loss += lv;
                batches += 1;
                log.push(MetricRecord { step, loss: lv, auc: None });
                g.backward(loss)?
            };
            let norm = clip_global_norm(&mut grads, cfg.train.clip);
            if !norm.is_finite() {
                return Err(Error::Diverged { step, msg: format!("gradient norm is {norm}") });
            }
            adam.update(&mut store, &grads)?;
            sigs.tick();
        }
        val_scores = evaluate(&model, &store, prepared.val(), cfg.train.batch)?;
        val_auc = auc(&val_scores, &val_labels)?;
        log.push(MetricRecord { step, loss: epoch_loss / batches.max(1) as f64, auc: Some(val_auc) });
    }
    Ok(TrainResult { store, model, log, val_scores, val_auc })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub auc: f64,
    pub null_mean: f64,
    pub null_std: f64,
    pub params: usize,
    pub mixing_params: usize,
    pub seconds: f64,
}

/// Trains every variant with the same seed and data.
pub fn run_ablation(cfg: &ExperimentConfig, prepared: &Prepared, variants: &[String]) -> Result<Vec<AblationRow>> {
    let base = cfg.resolved_model();
    let labels = labels_of(prepared.val());
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mc = base.with_variant(v)?;
        let t0 = Instant::now();
        let res = train_model(cfg, mc, prepared)?;
        let null = permutation_null(&res.val_scores, &labels, cfg.train.null_shuffles, cfg.seed)?;
        rows.push(AblationRow {
            variant: v.clone(),
            auc: res.val_auc,
            null_mean: null.mean,
            null_std: null.std,
            params: res.store.num_scalars(),
            mixing_params: res.model.mixers.iter().map(|m| m.mixing_params()).sum(),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

pub fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        buf.extend(serde_json::to_vec(r).map_err(|e| Error::Format(e.to_string()))?);
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Validation AUC of the configured model for each seed.
pub fn seed_sweep(cfg: &ExperimentConfig, prepared: &Prepared, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&s| {
            let c = ExperimentConfig { seed: s, ..cfg.clone() };
            train_model(&c, c.resolved_model(), prepared).map(|r| r.val_auc)
        })
        .collect()
}

/// Self-attention mixer over all `K` rows of `s`.
pub fn mhsa_mixer(store: &ParamStore, layer: &MhsaLayer, s: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let x = g.constant(s.clone());
    let y = layer.forward(&mut g, x, &vec![true; s.rows()])?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refinement::MixerOptions;
    use crate::tensor::softmax_rows;

    fn layer(d: usize, heads: usize, opts: MixerOptions, seed: u64) -> (ParamStore, MhsaLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = MhsaLayer::new(&mut store, "sa", d, heads, opts, &mut rng).unwrap();
        (store, l)
    }

    fn bare() -> MixerOptions {
        MixerOptions { residual: false, layer_norm: false, ..Default::default() }
    }

    #[test]
    fn mhsa_single_row_is_the_value_path() {
        let (store, l) = layer(8, 2, bare(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::randn(&[1, 8], &mut rng);
        let y = mhsa_mixer(&store, &l, &s).unwrap();
        let want = s.matmul(store.get(l.wv)).unwrap().matmul(store.get(l.wo)).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn mhsa_uniform_rows_give_identical_outputs() {
        let (store, l) = layer(8, 4, MixerOptions::default(), 3);
        let row = [0.3, -1.0, 0.5, 2.0, 0.0, 0.1, -0.4, 0.9];
        let s = Tensor::from_rows(&vec![row.to_vec(); 5]).unwrap();
        let y = mhsa_mixer(&store, &l, &s).unwrap();
        for r in 1..5 {
            for c in 0..8 {
                assert!((y.get(r, c) - y.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_matches_per_head_oracle() {
        let (d, heads, k) = (8, 2, 6);
        let (store, l) = layer(d, heads, bare(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Tensor::randn(&[k, d], &mut rng);
        let q = s.matmul(store.get(l.wq)).unwrap();
        let kk = s.matmul(store.get(l.wk)).unwrap();
        let v = s.matmul(store.get(l.wv)).unwrap();
        let b = d / heads;
        let mut cat = Tensor::zeros(&[k, d]);
        for h in 0..heads {
            let mut sc = Tensor::zeros(&[k, k]);
            for i in 0..k {
                for j in 0..k {
                    let dot: f64 = (0..b).map(|c| q.get(i, h * b + c) * kk.get(j, h * b + c)).sum();
                    sc.set(i, j, dot / (b as f64).sqrt());
                }
            }
            let p = softmax_rows(&sc).unwrap();
            for i in 0..k {
                for c in 0..b {
                    let val: f64 = (0..k).map(|j| p.get(i, j) * v.get(j, h * b + c)).sum();
                    cat.set(i, h * b + c, val);
                }
            }
        }
        let want = cat.matmul(store.get(l.wo)).unwrap();
        let got = mhsa_mixer(&store, &l, &s).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert_eq!(l.mixing_params(), 4 * d * d);
    }

    #[test]
    fn config_defaults_and_toml() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.batch, 256);
        assert_eq!(c.train.epochs, 1);
        assert_eq!(c.model.d, 16);
        assert_eq!(c.retrieval.k, 32);
        assert_eq!(c.clustering.c, 16);
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        let partial = ExperimentConfig::from_toml_str("seed = 4\n[model]\nd = 8\nn = 2\n").unwrap();
        assert_eq!((partial.seed, partial.model.d, partial.train.batch), (4, 8, 256));
        match ExperimentConfig::from_toml_str("[model]\nd = 8\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_toml_str("[model]\nd = 10\nn = 4\n").is_err());
    }

    #[test]
    fn user_sequences_dedupe() {
        let s = |user, seq: Vec<usize>| Sample { user, seq, ts: None, target: 1, label: 0 };
        let out = user_sequences(&[s(2, vec![5]), s(0, vec![1, 2]), s(2, vec![5])]);
        assert_eq!(out, vec![vec![1, 2], vec![5]]);
    }
}
