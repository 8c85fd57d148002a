//! Skip-gram with negative sampling over behavior logs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub window: usize,
    pub negatives: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Cap on the number of sequences used (0 = all).
    pub max_sequences: usize,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self { window: 2, negatives: 5, lr: 0.025, epochs: 1, max_sequences: 0, seed: 13 }
    }
}

/// Input vectors of a skip-gram model trained on `sequences`. Returns a
/// `rows x dim` table; row 0 (padding) stays zero.
pub fn pretrain_skipgram(sequences: &[Vec<usize>], rows: usize, dim: usize, cfg: &SkipGramConfig) -> Result<Tensor> {
    if rows < 2 || dim == 0 {
        return Err(Error::Config("skip-gram needs at least one item and dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seqs = if cfg.max_sequences > 0 { &sequences[..sequences.len().min(cfg.max_sequences)] } else { sequences };
    let mut counts = vec![0.0f64; rows];
    for s in seqs {
        for &id in s {
            if id >= rows {
                return Err(Error::Input(format!("item id {id} out of range for {rows} rows")));
            }
            counts[id] += 1.0;
        }
    }
    counts[0] = 0.0;
    let weights: Vec<f64> = counts.iter().enumerate().map(|(i, &c)| if i == 0 { 0.0 } else { (c + 1.0).powf(0.75) }).collect();
    let noise = WeightedAliasIndex::new(weights).map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

    let bound = 0.5 / dim as f64;
    let mut win = Tensor::uniform(&[rows, dim], bound, &mut rng);
    win.row_slice_mut(0).iter_mut().for_each(|v| *v = 0.0);
    let mut wout = vec![0.0; rows * dim];
    let w = win.data_mut();

    let total: usize = seqs.iter().map(Vec::len).sum::<usize>() * cfg.epochs.max(1);
    let mut seen = 0usize;
    let mut grad = vec![0.0; dim];
    for _ in 0..cfg.epochs.max(1) {
        for s in seqs {
            for (pos, &center) in s.iter().enumerate() {
                seen += 1;
                if center == 0 {
                    continue;
                }
                let lr = cfg.lr * (1.0 - seen as f64 / (total as f64 + 1.0)).max(1e-4);
                let lo = pos.saturating_sub(cfg.window);
                let hi = (pos + cfg.window + 1).min(s.len());
                for ctx_pos in lo..hi {
                    let ctx = s[ctx_pos];
                    if ctx_pos == pos || ctx == 0 {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let vin = center * dim..(center + 1) * dim;
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 { (ctx, 1.0) } else { (noise.sample(&mut rng), 0.0) };
                        if k > 0 && target == ctx {
                            continue;
                        }
                        let vout = target * dim..(target + 1) * dim;
                        let score: f64 = w[vin.clone()].iter().zip(&wout[vout.clone()]).map(|(a, b)| a * b).sum();
                        let g = lr * (label - sigmoid(score));
                        for ((gr, o), i) in grad.iter_mut().zip(&mut wout[vout]).zip(&w[vin.clone()]) {
                            *gr += g * *o;
                            *o += g * i;
                        }
                    }
                    for (v, gr) in w[vin].iter_mut().zip(&grad) {
                        *v += gr;
                    }
                }
            }
        }
    }
    Ok(win)
}
