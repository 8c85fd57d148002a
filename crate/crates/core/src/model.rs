//! The full network: retrieval, refinement, interest fusion and prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{PredictionHead, TargetAttention};
use crate::clustering::ClusterModel;
use crate::datasynth::Sample;
use crate::embedding::{BehaviorSequence, EmbeddingTable, PAD_ID};
use crate::error::{Error, Result};
use crate::refinement::{refine, tape_indices, Mixer, MixerKind, MixerOptions, NormSite, TapeTable};
use crate::retrieval::{
    build_queries_from_table, search, Gru, HashMatrix, ItemSignatureTable, RetrievalConfig, SearchUnit, SignatureStore,
};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Samples per inference graph; small tapes stay cache resident.
const PREDICT_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    #[serde(rename = "L_max")]
    pub l_max: usize,
    /// Fourier mixer heads.
    pub n: usize,
    /// Target attention heads.
    pub h: usize,
    pub units: Vec<SearchUnit>,
    pub tape: bool,
    pub mixer: MixerKind,
    pub shared_mixer: bool,
    pub layer_norm: bool,
    pub norm_site: NormSite,
    /// Target attention over interests; off means a plain mean.
    pub miam: bool,
    pub user_embedding: bool,
    /// Item ids run `1..=vocab`.
    pub vocab: usize,
    pub users: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            l_max: 300,
            n: 4,
            h: 2,
            units: SearchUnit::ALL.to_vec(),
            tape: true,
            mixer: MixerKind::Mhft,
            shared_mixer: false,
            layer_norm: true,
            norm_site: NormSite::Time,
            miam: true,
            user_embedding: true,
            vocab: 5000,
            users: 20_000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.l_max == 0 || self.vocab == 0 {
            return Err(Error::Config("d, L_max and vocab must be positive".into()));
        }
        if self.n == 0 || self.d % self.n != 0 {
            return Err(Error::Config(format!("n = {} must divide d = {}", self.n, self.d)));
        }
        if self.h == 0 || self.d % self.h != 0 {
            return Err(Error::Config(format!("h = {} must divide d = {}", self.h, self.d)));
        }
        if self.units.is_empty() {
            return Err(Error::Config("at least one search unit is required".into()));
        }
        let mut u = self.units.clone();
        u.sort_by_key(|x| *x as u8);
        u.dedup();
        if u.len() != self.units.len() {
            return Err(Error::Config("search units listed twice".into()));
        }
        Ok(())
    }

    pub fn needs_clusters(&self) -> bool {
        self.units.contains(&SearchUnit::Gasu)
    }

    /// Applies an ablation variant name. Unit subsets are joined with `+`
    /// (`tasu+lasu`); other names: `full`, `no-tape`, `no-mhft`, `ft`,
    /// `mhsa`, `no-bsrm`, `no-miam`.
    pub fn with_variant(&self, name: &str) -> Result<Self> {
        let mut c = self.clone();
        match name {
            "full" => {}
            "no-tape" => c.tape = false,
            "no-mhft" => c.mixer = MixerKind::None,
            "ft" => c.mixer = MixerKind::Ft,
            "mhsa" => c.mixer = MixerKind::Mhsa,
            "no-bsrm" => {
                c.tape = false;
                c.mixer = MixerKind::None;
            }
            "no-miam" => c.miam = false,
            units => {
                let parsed = units.split('+').map(str::parse).collect::<Result<Vec<SearchUnit>>>().map_err(|_| {
                    Error::Config(format!("unknown variant {name:?}"))
                })?;
                c.units = parsed;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Retrieved positions for one unit, padded at the front to exactly `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitPlan {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub offsets: Vec<usize>,
}

/// Everything the differentiable pass needs that retrieval decided.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub units: Vec<UnitPlan>,
}

#[derive(Debug, Clone)]
pub struct Mirrn {
    pub cfg: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub items: EmbeddingTable,
    pub users: Option<EmbeddingTable>,
    pub tape: Option<TapeTable>,
    /// One per unit, or a single shared entry.
    pub mixers: Vec<Mixer>,
    pub attention: Option<TargetAttention>,
    pub head: PredictionHead,
    pub hash: HashMatrix,
    pub gru: Option<Gru>,
    pub clusters: Option<ClusterModel>,
}

impl Mirrn {
    /// Registers all parameters in `store`. `warm_items` replaces the initial
    /// item table when given.
    pub fn new<R: Rng + ?Sized>(
        cfg: ModelConfig,
        retrieval: RetrievalConfig,
        store: &mut ParamStore,
        clusters: Option<ClusterModel>,
        warm_items: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        retrieval.validate()?;
        if cfg.needs_clusters() {
            match &clusters {
                None => return Err(Error::Config("the global search unit needs a cluster model".into())),
                Some(c) if c.assignment.len() < cfg.vocab + 1 => {
                    return Err(Error::Config(format!(
                        "cluster model covers {} items, vocabulary needs {}",
                        c.assignment.len(),
                        cfg.vocab + 1
                    )))
                }
                _ => {}
            }
        }
        let d = cfg.d;
        let items = EmbeddingTable::new(store, "items", cfg.vocab + 1, d, true, rng);
        if let Some(w) = warm_items {
            if w.shape() != [cfg.vocab + 1, d] {
                return Err(Error::Config(format!("warm-start table {:?} vs [{}, {d}]", w.shape(), cfg.vocab + 1)));
            }
            let t = store.get_mut(items.id);
            *t = w.clone();
            t.row_slice_mut(PAD_ID).iter_mut().for_each(|v| *v = 0.0);
        }
        let users = cfg.user_embedding.then(|| EmbeddingTable::new(store, "users", cfg.users.max(1), d, false, rng));
        let tape = cfg.tape.then(|| TapeTable::new(store, "tpe", cfg.l_max, d, rng));
        let opts = MixerOptions { layer_norm: cfg.layer_norm, norm_site: cfg.norm_site, ..MixerOptions::default() };
        let n_mixers = if cfg.shared_mixer { 1 } else { cfg.units.len() };
        let mut mixers = Vec::with_capacity(n_mixers);
        for i in 0..n_mixers {
            let prefix = if cfg.shared_mixer { "mixer".to_string() } else { format!("mixer.{}", cfg.units[i].name()) };
            mixers.push(Mixer::build(cfg.mixer, store, &prefix, retrieval.k, d, cfg.n, opts, rng)?);
        }
        let attention = if cfg.miam { Some(TargetAttention::new(store, "attn", d, cfg.h, rng)?) } else { None };
        let head = PredictionHead::new(store, "mlp", 3 * d, rng);
        let hash = HashMatrix::new(d, retrieval.m, retrieval.seed);
        let gru = retrieval.use_gru.then(|| Gru::new(d, d, rng));
        Ok(Self { cfg, retrieval, items, users, tape, mixers, attention, head, hash, gru, clusters })
    }

    pub fn signatures(&self, store: &ParamStore) -> Result<ItemSignatureTable> {
        ItemSignatureTable::compute(&self.hash, self.items.weights(store))
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        self.items.check_id(s.target)?;
        if s.target == PAD_ID {
            return Err(Error::Input("target item id 0 is reserved for padding".into()));
        }
        if let Some(&bad) = s.seq.iter().find(|&&i| i == PAD_ID || i > self.cfg.vocab) {
            return Err(Error::Input(format!("behavior id {bad} out of range 1..={}", self.cfg.vocab)));
        }
        if let Some(u) = &self.users {
            u.check_id(s.user)?;
        }
        Ok(())
    }

    /// Non-differentiable retrieval against the current parameters.
    pub fn plan(&self, store: &ParamStore, sigs: &ItemSignatureTable, s: &Sample) -> Result<Plan> {
        self.check_sample(s)?;
        let table = self.items.weights(store);
        let d = self.cfg.d;
        let ids = BehaviorSequence::new(s.seq.clone()).padded_ids(self.cfg.l_max);
        let store_sig = SignatureStore::from_ids(sigs, &ids)?;
        let e_t = Tensor::row(table.row_slice(s.target));
        let centroid = match &self.clusters {
            Some(c) if self.cfg.needs_clusters() => {
                let center = c.centers[c.center_of(s.target)?];
                Tensor::row(table.row_slice(center))
            }
            _ => Tensor::zeros(&[1, d]),
        };
        let q = build_queries_from_table(table, &ids, &e_t, &centroid, self.retrieval.j, self.gru.as_ref())?;
        let k = self.retrieval.k;
        let mut units = Vec::with_capacity(self.cfg.units.len());
        for unit in &self.cfg.units {
            let query = match unit {
                SearchUnit::Tasu => &q.target,
                SearchUnit::Lasu => &q.local,
                SearchUnit::Gasu => &q.global,
            };
            let sub = search(&store_sig, &self.hash, query, k)?;
            let pad = k - sub.len();
            let offs = tape_indices(&sub.indices, self.cfg.l_max)?;
            let mut plan = UnitPlan { ids: vec![PAD_ID; pad], mask: vec![false; pad], offsets: vec![0; pad] };
            plan.ids.extend(sub.ids(&ids));
            plan.mask.extend(std::iter::repeat_n(true, sub.len()));
            plan.offsets.extend(offs);
            units.push(plan);
        }
        Ok(Plan { units })
    }

    fn mixer_for(&self, unit_idx: usize) -> &Mixer {
        if self.cfg.shared_mixer {
            &self.mixers[0]
        } else {
            &self.mixers[unit_idx]
        }
    }

    /// Click probabilities (`B x 1`) for `samples` with precomputed plans.
    pub fn forward(&self, g: &mut Graph, samples: &[&Sample], plans: &[Plan]) -> Result<Var> {
        if samples.len() != plans.len() || samples.is_empty() {
            return Err(Error::Contract(format!("{} samples vs {} plans", samples.len(), plans.len())));
        }
        let d = self.cfg.d;
        let mut rows = Vec::with_capacity(samples.len());
        for (s, plan) in samples.iter().zip(plans) {
            let e_t = self.items.lookup(g, &[s.target])?;
            let mut interests = Vec::with_capacity(plan.units.len());
            for (u, up) in plan.units.iter().enumerate() {
                let sub = self.items.lookup(g, &up.ids)?;
                interests.push(refine(g, sub, &up.mask, &up.offsets, self.tape.as_ref(), self.mixer_for(u))?);
            }
            let em = g.concat_rows(&interests)?;
            let e_u = match &self.attention {
                Some(a) => a.forward(g, e_t, em)?,
                None => g.mean_rows(em)?,
            };
            let other = match &self.users {
                Some(u) => u.lookup(g, &[s.user])?,
                None => g.constant(Tensor::zeros(&[1, d])),
            };
            rows.push(g.concat_cols(&[e_t, e_u, other])?);
        }
        let x = g.concat_rows(&rows)?;
        self.head.forward(g, x)
    }

    /// Plans and scores `samples` without recording gradients for later use.
    pub fn predict(&self, store: &ParamStore, sigs: &ItemSignatureTable, samples: &[&Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let plans = chunk.iter().map(|s| self.plan(store, sigs, s)).collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new(store);
            let p = self.forward(&mut g, chunk, &plans)?;
            out.extend_from_slice(g.value(p).data());
        }
        Ok(out)
    }
}

/// Single target-aware search followed by target attention over the
/// retrieved behaviors and the same prediction head: the SIM-style baseline
/// used for the inference-overhead comparison. Retrieves `3K` behaviors so
/// both models see the same number.
#[derive(Debug, Clone)]
pub struct SimBaseline {
    pub cfg: ModelConfig,
    pub k: usize,
    pub items: EmbeddingTable,
    pub users: Option<EmbeddingTable>,
    pub attention: TargetAttention,
    pub head: PredictionHead,
    pub hash: HashMatrix,
}

impl SimBaseline {
    pub fn new<R: Rng + ?Sized>(
        cfg: ModelConfig,
        retrieval: &RetrievalConfig,
        store: &mut ParamStore,
        warm_items: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        retrieval.validate()?;
        let d = cfg.d;
        let items = EmbeddingTable::new(store, "items", cfg.vocab + 1, d, true, rng);
        if let Some(w) = warm_items {
            if w.shape() != [cfg.vocab + 1, d] {
                return Err(Error::Config(format!("warm-start table {:?} vs [{}, {d}]", w.shape(), cfg.vocab + 1)));
            }
            *store.get_mut(items.id) = w.clone();
        }
        let users = cfg.user_embedding.then(|| EmbeddingTable::new(store, "users", cfg.users.max(1), d, false, rng));
        let attention = TargetAttention::new(store, "attn", d, cfg.h, rng)?;
        let head = PredictionHead::new(store, "mlp", 3 * d, rng);
        let hash = HashMatrix::new(d, retrieval.m, retrieval.seed);
        Ok(Self { k: 3 * retrieval.k, cfg, items, users, attention, head, hash })
    }

    pub fn signatures(&self, store: &ParamStore) -> Result<ItemSignatureTable> {
        ItemSignatureTable::compute(&self.hash, self.items.weights(store))
    }

    /// Retrieved item ids, chronological.
    pub fn plan(&self, store: &ParamStore, sigs: &ItemSignatureTable, s: &Sample) -> Result<Vec<usize>> {
        self.items.check_id(s.target)?;
        let ids = BehaviorSequence::new(s.seq.clone()).padded_ids(self.cfg.l_max);
        let store_sig = SignatureStore::from_ids(sigs, &ids)?;
        let e_t = Tensor::row(self.items.weights(store).row_slice(s.target));
        let sub = search(&store_sig, &self.hash, &e_t, self.k)?;
        Ok(sub.ids(&ids))
    }

    pub fn forward(&self, g: &mut Graph, samples: &[&Sample], plans: &[Vec<usize>]) -> Result<Var> {
        if samples.len() != plans.len() || samples.is_empty() {
            return Err(Error::Contract(format!("{} samples vs {} plans", samples.len(), plans.len())));
        }
        let mut rows = Vec::with_capacity(samples.len());
        for (s, ids) in samples.iter().zip(plans) {
            let e_t = self.items.lookup(g, &[s.target])?;
            let e_u = if ids.is_empty() {
                g.constant(Tensor::zeros(&[1, self.cfg.d]))
            } else {
                let em = self.items.lookup(g, ids)?;
                self.attention.forward(g, e_t, em)?
            };
            let other = match &self.users {
                Some(u) => u.lookup(g, &[s.user])?,
                None => g.constant(Tensor::zeros(&[1, self.cfg.d])),
            };
            rows.push(g.concat_cols(&[e_t, e_u, other])?);
        }
        let x = g.concat_rows(&rows)?;
        self.head.forward(g, x)
    }

    pub fn predict(&self, store: &ParamStore, sigs: &ItemSignatureTable, samples: &[&Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let plans = chunk.iter().map(|s| self.plan(store, sigs, s)).collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new(store);
            let p = self.forward(&mut g, chunk, &plans)?;
            out.extend_from_slice(g.value(p).data());
        }
        Ok(out)
    }
}
