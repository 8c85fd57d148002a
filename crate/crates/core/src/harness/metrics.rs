//! AUC, the label-permutation null, and the line-delimited metrics log.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Probability that a random positive outranks a random negative, ties
/// counted one half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullAuc {
    pub mean: f64,
    pub std: f64,
    pub shuffles: usize,
}

/// AUC of `scores` against shuffled copies of `labels`.
pub fn permutation_null(scores: &[f64], labels: &[u8], shuffles: usize, seed: u64) -> Result<NullAuc> {
    if shuffles < 2 {
        return Err(Error::Metric("the permutation null needs at least 2 shuffles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = labels.to_vec();
    let mut vals = Vec::with_capacity(shuffles);
    for _ in 0..shuffles {
        perm.shuffle(&mut rng);
        vals.push(auc(scores, &perm)?);
    }
    let mean = vals.iter().sum::<f64>() / shuffles as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (shuffles - 1) as f64;
    Ok(NullAuc { mean, std: var.sqrt(), shuffles })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

pub fn write_metrics_to<W: Write>(records: &[MetricRecord], w: &mut W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_metrics(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_to(records, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = std::fs::File::open(path)
        .map_err(|_| Error::MissingArtifact { what: "metrics log", path: path.to_path_buf() })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}
