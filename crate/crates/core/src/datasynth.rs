//! Synthetic behavior logs with planted target, local and global interests.
//!
//! Items `1..=vocab` are split into topics round-robin. Each user has a few
//! topics with Dirichlet weights; some of them are *faded* (seen only in the
//! older part of the history). Histories are runs of same-topic sessions and
//! end with a window of `local_window` items from one recent topic `r`.
//! Candidate targets get a latent score
//!
//! `z = w_a * theta[topic] * [topic active] + w_b * [topic == partner(r)] + w_c * [repeat]`
//!
//! and each user contributes one clicked and one non-clicked candidate,
//! drawn by rejection from `sigmoid(sharpness * (z - bias))`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab: usize,
    pub topics: usize,
    pub users: usize,
    /// Maximum history length.
    #[serde(rename = "L")]
    pub l: usize,
    /// Shortest history as a fraction of `L`.
    pub min_len_frac: f64,
    /// Topics per user.
    pub user_topics: usize,
    /// Probability that each user topic is faded.
    pub fade_prob: f64,
    /// Fraction of the history (from the start) where faded topics may occur.
    pub fade_horizon: f64,
    pub dirichlet_alpha: f64,
    pub mean_session: f64,
    pub local_window: usize,
    /// Weight of target-topic affinity with the active global mixture.
    pub target_affinity: f64,
    /// Weight of the recent-topic partner match.
    pub local_weight: f64,
    /// Weight of exact-item repetition.
    pub repeat_weight: f64,
    pub bias: f64,
    pub sharpness: f64,
    /// Labels become a threshold on the latent score instead of a draw.
    pub deterministic: bool,
    /// Probability a label is replaced by a fair coin.
    pub noise_rate: f64,
    /// Negatives per positive.
    pub neg_ratio: usize,
    /// Candidate proposal weights: user topic, partner of recent topic,
    /// repeated history item, uniform topic.
    pub proposal: [f64; 4],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab: 5000,
            topics: 12,
            users: 20_000,
            l: 300,
            min_len_frac: 0.5,
            user_topics: 4,
            fade_prob: 0.4,
            fade_horizon: 0.6,
            dirichlet_alpha: 1.0,
            mean_session: 5.0,
            local_window: 10,
            target_affinity: 8.0,
            local_weight: 3.0,
            repeat_weight: 1.5,
            bias: 2.0,
            sharpness: 2.0,
            deterministic: false,
            noise_rate: 0.05,
            neg_ratio: 1,
            proposal: [0.45, 0.25, 0.1, 0.2],
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.topics == 0 || self.vocab < self.topics {
            return bad("need 1 <= topics <= vocab");
        }
        if self.l == 0 || self.users == 0 || self.neg_ratio == 0 {
            return bad("L, users and neg_ratio must be positive");
        }
        if self.user_topics == 0 || self.user_topics > self.topics {
            return bad("user_topics must be in 1..=topics");
        }
        for (name, p) in [
            ("fade_prob", self.fade_prob),
            ("fade_horizon", self.fade_horizon),
            ("noise_rate", self.noise_rate),
            ("min_len_frac", self.min_len_frac),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.proposal.iter().any(|&w| !(w >= 0.0)) || self.proposal.iter().sum::<f64>() <= 0.0 {
            return bad("proposal weights must be non-negative and not all zero");
        }
        if self.local_window >= self.l {
            return bad("local_window must be shorter than L");
        }
        if !(self.dirichlet_alpha > 0.0) || !(self.mean_session >= 1.0) {
            return bad("dirichlet_alpha must be positive and mean_session >= 1");
        }
        Ok(())
    }

    pub fn topic_of(&self, item: usize) -> usize {
        (item - 1) % self.topics
    }

    /// Items of `topic`.
    pub fn topic_items(&self, topic: usize) -> impl Iterator<Item = usize> + '_ {
        (topic + 1..=self.vocab).step_by(self.topics)
    }

    /// Fixed topic pairing used by the local-interest rule: a seeded
    /// permutation without fixed points (identity when there is one topic).
    pub fn partner_map(&self) -> Vec<usize> {
        let t = self.topics;
        if t == 1 {
            return vec![0];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        loop {
            let mut p: Vec<usize> = (0..t).collect();
            p.shuffle(&mut rng);
            if p.iter().enumerate().all(|(i, &v)| i != v) {
                return p;
            }
        }
    }

    pub fn positive_rate(&self) -> f64 {
        1.0 / (1.0 + self.neg_ratio as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub user: usize,
    pub seq: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<u64>,
    pub target: usize,
    pub label: u8,
}

/// Generator-side view of a sample, kept out of the dataset file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub score: f64,
    pub recent_topic: usize,
    pub active: bool,
    pub repeat: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub samples: Vec<Sample>,
    pub latent: Vec<Latent>,
    /// Users for which rejection sampling could not produce both labels.
    pub skipped_users: usize,
}

struct UserState {
    topics: Vec<usize>,
    theta: Vec<f64>,
    active: Vec<bool>,
    recent: usize,
    seq: Vec<usize>,
}

const MAX_TRIES: usize = 400;

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut v: Vec<f64> = (0..k).map(|_| g.sample(rng).max(1e-12)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn pick_item(cfg: &SynthConfig, topic: usize, rng: &mut ChaCha8Rng) -> usize {
    let n = (cfg.vocab - topic - 1) / cfg.topics + 1;
    topic + 1 + cfg.topics * rng.random_range(0..n)
}

fn user_state(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> UserState {
    let mut all: Vec<usize> = (0..cfg.topics).collect();
    all.shuffle(rng);
    let topics: Vec<usize> = all[..cfg.user_topics].to_vec();
    let theta = dirichlet(rng, cfg.user_topics, cfg.dirichlet_alpha);
    let mut active: Vec<bool> = (0..cfg.user_topics).map(|_| !rng.random_bool(cfg.fade_prob)).collect();
    if !active.iter().any(|&a| a) {
        active[0] = true;
    }
    let recent = rng.random_range(0..cfg.topics);

    let min_len = ((cfg.l as f64 * cfg.min_len_frac).ceil() as usize).clamp(cfg.local_window + 1, cfg.l);
    let len = rng.random_range(min_len..=cfg.l);
    let body = len - cfg.local_window;
    let horizon = (body as f64 * cfg.fade_horizon) as usize;
    let mut seq = Vec::with_capacity(len);
    let stop = 1.0 / cfg.mean_session;
    while seq.len() < body {
        let allow: Vec<f64> = (0..cfg.user_topics)
            .map(|i| if active[i] || seq.len() < horizon { theta[i] } else { 0.0 })
            .collect();
        let total: f64 = allow.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < allow.len() && u >= allow[k] {
            u -= allow[k];
            k += 1;
        }
        let topic = topics[k];
        loop {
            seq.push(pick_item(cfg, topic, rng));
            if seq.len() >= body || rng.random_bool(stop) {
                break;
            }
        }
    }
    for _ in 0..cfg.local_window {
        seq.push(pick_item(cfg, recent, rng));
    }
    UserState { topics, theta, active, recent, seq }
}

fn latent_score(cfg: &SynthConfig, st: &UserState, partner: &[usize], target: usize) -> Latent {
    let topic = cfg.topic_of(target);
    let slot = st.topics.iter().position(|&t| t == topic);
    let active = slot.is_some_and(|i| st.active[i]);
    let affinity = slot.map_or(0.0, |i| if st.active[i] { st.theta[i] } else { 0.0 });
    let local = topic == partner[st.recent];
    let repeat = st.seq.contains(&target);
    let score = cfg.target_affinity * affinity
        + if local { cfg.local_weight } else { 0.0 }
        + if repeat { cfg.repeat_weight } else { 0.0 };
    Latent { score, recent_topic: st.recent, active, repeat }
}

fn propose(cfg: &SynthConfig, st: &UserState, partner: &[usize], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = cfg.proposal.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut kind = 0;
    while kind < 3 && u >= cfg.proposal[kind] {
        u -= cfg.proposal[kind];
        kind += 1;
    }
    match kind {
        0 => pick_item(cfg, *st.topics.choose(rng).expect("non-empty"), rng),
        1 => pick_item(cfg, partner[st.recent], rng),
        2 => *st.seq.choose(rng).expect("non-empty"),
        _ => pick_item(cfg, rng.random_range(0..cfg.topics), rng),
    }
}

fn click(cfg: &SynthConfig, z: f64, rng: &mut ChaCha8Rng) -> bool {
    if cfg.deterministic {
        z > cfg.bias
    } else {
        rng.random_bool(sigmoid(cfg.sharpness * (z - cfg.bias)))
    }
}

/// Generates the dataset, ordered by click time.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let partner = cfg.partner_map();
    let mut rows: Vec<(f64, Sample, Latent)> = Vec::with_capacity(cfg.users * (1 + cfg.neg_ratio));
    let mut skipped = 0;
    for user in 0..cfg.users {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(user as u64 + 1);
        let st = user_state(cfg, &mut rng);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for _ in 0..MAX_TRIES {
            if pos.len() >= 1 && neg.len() >= cfg.neg_ratio {
                break;
            }
            let target = propose(cfg, &st, &partner, &mut rng);
            let lat = latent_score(cfg, &st, &partner, target);
            let bucket = if click(cfg, lat.score, &mut rng) { &mut pos } else { &mut neg };
            bucket.push((target, lat));
        }
        if pos.is_empty() || neg.len() < cfg.neg_ratio {
            skipped += 1;
            continue;
        }
        let chosen = pos.into_iter().take(1).map(|p| (p, 1u8)).chain(neg.into_iter().take(cfg.neg_ratio).map(|n| (n, 0u8)));
        for ((target, lat), label) in chosen.collect::<Vec<_>>() {
            let label = if rng.random_bool(cfg.noise_rate) { rng.random_bool(0.5) as u8 } else { label };
            let t: f64 = rng.random();
            rows.push((t, Sample { user, seq: st.seq.clone(), ts: None, target, label }, lat));
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.user.cmp(&b.1.user)));
    let mut samples = Vec::with_capacity(rows.len());
    let mut latent = Vec::with_capacity(rows.len());
    for (i, (_, mut s, l)) in rows.into_iter().enumerate() {
        s.ts = Some(i as u64);
        samples.push(s);
        latent.push(l);
    }
    Ok(SynthOutput { samples, latent, skipped_users: skipped })
}

/// Train / validation / test ranges by timeline position (80/10/10).
pub fn split(n: usize) -> [std::ops::Range<usize>; 3] {
    let a = n * 8 / 10;
    let b = n * 9 / 10;
    [0..a, a..b, b..n]
}

pub fn write_dataset_to<W: Write>(samples: &[Sample], w: &mut W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *w, s).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset_to(samples, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_dataset_from<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if s.label > 1 {
            return Err(Error::Parse { line: i + 1, msg: format!("label must be 0 or 1, got {}", s.label) });
        }
        out.push(s);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|_| Error::MissingArtifact { what: "dataset", path: path.to_path_buf() })?;
    read_dataset_from(BufReader::new(f))
}

/// 1 when the target's topic is the partner of the topic of the last
/// `window` behaviors (majority vote).
pub fn local_overlap_feature(cfg: &SynthConfig, partner: &[usize], s: &Sample, window: usize) -> f64 {
    let tail = &s.seq[s.seq.len().saturating_sub(window)..];
    let mut counts = vec![0usize; cfg.topics];
    for &i in tail {
        counts[cfg.topic_of(i)] += 1;
    }
    let recent = (0..cfg.topics).max_by_key(|&t| (counts[t], std::cmp::Reverse(t))).unwrap_or(0);
    f64::from(u8::from(cfg.topic_of(s.target) == partner[recent]))
}
