//! Simplified density-peak clustering over item embeddings.
//!
//! Densities use the global form `rho_i = exp(-(1/s^2) sum_j |e_i - e_j|^2)`,
//! evaluated in the log domain through
//! `sum_j |e_i - e_j|^2 = M |e_i - mu|^2 + sum_j |e_j - mu|^2`.

mod pretrain;

use std::io::{Read, Write};
use std::path::Path;

pub use pretrain::{pretrain_skipgram, SkipGramConfig};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{sq_dist, Tensor};

const MAGIC: &[u8; 8] = b"MRRNDPC\0";
const VERSION: u32 = 1;
const MEDIAN_SAMPLE: usize = 2000;

/// `log rho_i` for every row of `items`.
pub fn log_density(items: &Tensor, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("bandwidth must be positive, got {sigma}")));
    }
    let m = items.rows();
    if m == 0 {
        return Err(dim_err!("density of an empty point set"));
    }
    let mu = items.mean_rows()?;
    let dev: Vec<f64> = (0..m).map(|i| sq_dist(items.row_slice(i), mu.data())).collect();
    let spread: f64 = dev.iter().sum();
    let inv = 1.0 / (sigma * sigma);
    Ok(dev.iter().map(|&v| -inv * (m as f64 * v + spread).max(0.0)).collect())
}

/// `rho_i`. Underflows to zero for spread-out data; ranking code uses
/// [`log_density`].
pub fn density(items: &Tensor, sigma: f64) -> Result<Vec<f64>> {
    Ok(log_density(items, sigma)?.into_iter().map(f64::exp).collect())
}

/// `delta_i = min_{j: rho_j > rho_i} |e_i - e_j|`, or the largest distance
/// from `e_i` when no point is strictly denser. `rho` may be given in any
/// monotone transform (e.g. log).
pub fn separation(items: &Tensor, rho: &[f64]) -> Result<Vec<f64>> {
    let m = items.rows();
    if rho.len() != m {
        return Err(dim_err!("{} densities for {} points", rho.len(), m));
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let ei = items.row_slice(i);
        let mut nearest = f64::INFINITY;
        let mut farthest = 0.0f64;
        for j in 0..m {
            let dist = sq_dist(ei, items.row_slice(j));
            farthest = farthest.max(dist);
            if rho[j] > rho[i] && dist < nearest {
                nearest = dist;
            }
        }
        out.push(if nearest.is_finite() { nearest.sqrt() } else { farthest.sqrt() });
    }
    Ok(out)
}

/// Median pairwise Euclidean distance over (at most) the first 2000 rows.
pub fn median_pairwise_distance(items: &Tensor) -> f64 {
    let n = items.rows().min(MEDIAN_SAMPLE);
    let step = (items.rows() / n.max(1)).max(1);
    let rows: Vec<usize> = (0..n).map(|i| i * step).collect();
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            dists.push(sq_dist(items.row_slice(i), items.row_slice(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Default bandwidth: `sqrt(M)` times the median pairwise distance. The
/// density exponent sums `M` squared distances, so this keeps it `O(1)`
/// in the number of points.
pub fn default_bandwidth(items: &Tensor) -> f64 {
    (items.rows().max(1) as f64).sqrt() * median_pairwise_distance(items)
}

/// Index of the row of `centroids` nearest to `e`; ties go to the lower index.
pub fn nearest_center(centroids: &Tensor, e: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for c in 0..centroids.rows() {
        let dist = sq_dist(centroids.row_slice(c), e);
        if dist < best.0 {
            best = (dist, c);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Item ids of the centers, in selection order.
    pub centers: Vec<usize>,
    /// `C x d` centroid rows.
    pub centroids: Tensor,
    /// Center index for every item id.
    pub assignment: Vec<u32>,
    pub sigma: f64,
}

impl ClusterModel {
    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Precomputed center index of a known item.
    pub fn center_of(&self, id: usize) -> Result<usize> {
        self.assignment
            .get(id)
            .map(|&c| c as usize)
            .ok_or_else(|| Error::Input(format!("item {id} has no cluster assignment")))
    }

    /// Centroid of a known item: a table lookup.
    pub fn assign_id(&self, id: usize) -> Result<&[f64]> {
        Ok(self.centroids.row_slice(self.center_of(id)?))
    }

    /// Centroid nearest to an arbitrary vector.
    pub fn assign(&self, e: &[f64]) -> &[f64] {
        self.centroids.row_slice(nearest_center(&self.centroids, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.num_centers() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&self.sigma.to_le_bytes())?;
        w.write_all(&(self.assignment.len() as u64).to_le_bytes())?;
        for &c in &self.centers {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        for v in self.centroids.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for a in &self.assignment {
            w.write_all(&a.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a cluster model file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported cluster model version {version}")));
        }
        let c = read_u64(r)? as usize;
        let d = read_u64(r)? as usize;
        let sigma = f64::from_le_bytes(read_arr(r)?);
        let m = read_u64(r)? as usize;
        if c == 0 || c > m.max(1) || d > 1 << 20 {
            return Err(Error::Format(format!("implausible header: C={c} d={d} items={m}")));
        }
        let centers = (0..c).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let data = (0..c * d).map(|_| Ok(f64::from_le_bytes(read_arr(r)?))).collect::<Result<Vec<_>>>()?;
        let assignment = (0..m).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        if assignment.iter().any(|&a| a as usize >= c) {
            return Err(Error::Format("assignment refers to a missing center".into()));
        }
        Ok(Self { centers, centroids: Tensor::new(vec![c, d], data)?, assignment, sigma })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|_| Error::MissingArtifact { what: "cluster model", path: path.to_path_buf() })?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}

fn read_arr<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated cluster model".into()))?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_arr(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_arr(r)?))
}

/// Fits on every row of `items`; item id == row index.
pub fn fit(items: &Tensor, c: usize, sigma: f64) -> Result<ClusterModel> {
    let rows: Vec<usize> = (0..items.rows()).collect();
    fit_rows(items, &rows, c, sigma)
}

/// Fits on the rows listed in `ids` only (e.g. skipping the padding row).
/// Rows outside `ids` are assigned to their nearest center.
pub fn fit_rows(items: &Tensor, ids: &[usize], c: usize, sigma: f64) -> Result<ClusterModel> {
    let m = ids.len();
    if c == 0 || c > m {
        return Err(Error::Config(format!("need 1 <= C <= {m}, got C = {c}")));
    }
    let pts = items.select_rows(ids)?;
    let logr = log_density(&pts, sigma)?;
    let delta = separation(&pts, &logr)?;
    let score: Vec<f64> = logr.iter().zip(&delta).map(|(r, d)| r + d.ln()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let chosen: Vec<usize> = order[..c].to_vec();
    let centers: Vec<usize> = chosen.iter().map(|&i| ids[i]).collect();
    let centroids = items.select_rows(&centers)?;
    let mut assignment: Vec<u32> =
        (0..items.rows()).map(|r| nearest_center(&centroids, items.row_slice(r)) as u32).collect();
    for (k, &id) in centers.iter().enumerate() {
        assignment[id] = k as u32;
    }
    Ok(ClusterModel { centers, centroids, assignment, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loop_log_density(items: &Tensor, sigma: f64) -> Vec<f64> {
        (0..items.rows())
            .map(|i| {
                let mut s = 0.0;
                for j in 0..items.rows() {
                    for (a, b) in items.row_slice(i).iter().zip(items.row_slice(j)) {
                        s += (a - b) * (a - b);
                    }
                }
                -s / (sigma * sigma)
            })
            .collect()
    }

    fn loop_separation(items: &Tensor, rho: &[f64]) -> Vec<f64> {
        let dist = |i: usize, j: usize| {
            items.row_slice(i).iter().zip(items.row_slice(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        (0..items.rows())
            .map(|i| {
                let denser: Vec<f64> =
                    (0..items.rows()).filter(|&j| rho[j] > rho[i]).map(|j| dist(i, j)).collect();
                if denser.is_empty() {
                    (0..items.rows()).map(|j| dist(i, j)).fold(0.0, f64::max)
                } else {
                    denser.into_iter().fold(f64::INFINITY, f64::min)
                }
            })
            .collect()
    }

    #[test]
    fn single_point_and_duplicates() {
        assert_eq!(density(&Tensor::row(&[3.0, 4.0]), 1.0).unwrap(), vec![1.0]);
        let two = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(density(&two, 1.0).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(density(&two, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn density_and_separation_match_double_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let items = Tensor::randn(&[10, 3], &mut rng).scale(0.3);
        let got = density(&items, 1.0).unwrap();
        let want: Vec<f64> = loop_log_density(&items, 1.0).into_iter().map(f64::exp).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let lg = log_density(&items, 1.0).unwrap();
        for (a, b) in lg.iter().zip(loop_log_density(&items, 1.0)) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
        let sep = separation(&items, &got).unwrap();
        for (a, b) in sep.iter().zip(loop_separation(&items, &want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn densest_point_gets_max_distance() {
        let items = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let rho = density(&items, 1.0).unwrap();
        let top = (0..3).max_by(|&a, &b| rho[a].total_cmp(&rho[b])).unwrap();
        let sep = separation(&items, &rho).unwrap();
        let far = (0..3).map(|j| (items.get(top, 0) - items.get(j, 0)).abs()).fold(0.0, f64::max);
        assert_eq!(sep[top], far);
    }

    #[test]
    fn two_point_case() {
        let items = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let sep = separation(&items, &[2.0, 1.0]).unwrap();
        assert_eq!(sep, vec![5.0, 5.0]);
    }

    #[test]
    fn every_item_its_own_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items = Tensor::randn(&[7, 2], &mut rng);
        let m = fit(&items, 7, 1.0).unwrap();
        let mut c = m.centers.clone();
        c.sort_unstable();
        assert_eq!(c, (0..7).collect::<Vec<_>>());
        for id in 0..7 {
            assert_eq!(m.centers[m.center_of(id).unwrap()], id);
        }
        assert!(matches!(fit(&items, 8, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn two_pairs_on_a_line() {
        let items = Tensor::from_rows(&[vec![0.0], vec![0.1], vec![5.0], vec![5.1]]).unwrap();
        let m = fit(&items, 2, 1.0).unwrap();
        let a = &m.assignment;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        let mut c = m.centers.clone();
        c.sort_unstable();
        assert!(c[0] < 2 && c[1] >= 2);
    }

    #[test]
    fn assignments_are_nearest_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items = Tensor::randn(&[60, 4], &mut rng);
        let m = fit(&items, 5, median_pairwise_distance(&items)).unwrap();
        for id in 0..60 {
            let e = items.row_slice(id);
            let mut best = (f64::INFINITY, 0);
            for k in 0..5 {
                let d: f64 = m.centroids.row_slice(k).iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            assert_eq!(m.center_of(id).unwrap(), best.1);
            assert_eq!(m.assign(e), m.assign_id(id).unwrap());
        }
        let mut c = m.centers.clone();
        c.dedup();
        assert_eq!(c.len(), 5);
    }

    #[test]
    fn vector_equal_to_centroid_maps_to_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let items = Tensor::randn(&[20, 3], &mut rng);
        let m = fit(&items, 4, 1.0).unwrap();
        for k in 0..4 {
            assert_eq!(m.assign(m.centroids.row_slice(k)), m.centroids.row_slice(k));
        }
    }

    #[test]
    fn fit_rows_skips_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let items = Tensor::randn(&[12, 3], &mut rng);
        let ids: Vec<usize> = (1..12).collect();
        let m = fit_rows(&items, &ids, 3, 1.0).unwrap();
        assert!(!m.centers.contains(&0));
        assert_eq!(m.assignment.len(), 12);
    }

    #[test]
    fn planted_blobs_recovered() {
        use rand_distr::{Distribution, Normal};
        let centers = [[0.0, 0.0], [4.0, 0.0], [2.0, 4.0]];
        let noise = Normal::new(0.0, 0.2).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (b, c) in centers.iter().enumerate() {
                for _ in 0..30 {
                    rows.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                    labels.push(b);
                }
            }
            let items = Tensor::from_rows(&rows).unwrap();
            let m = fit(&items, 3, default_bandwidth(&items)).unwrap();
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let best = perms
                .iter()
                .map(|p| (0..90).filter(|&i| p[m.assignment[i] as usize] == labels[i]).count())
                .max()
                .unwrap();
            assert!(best >= 86, "seed {seed}: {best}/90");
        }
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let items = Tensor::randn(&[30, 5], &mut rng);
        let m = fit(&items, 4, 0.7).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(ClusterModel::read_from(&mut buf.as_slice()).unwrap(), m);
        buf[0] = b'X';
        assert!(matches!(ClusterModel::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
        let short = &buf[..20];
        assert!(ClusterModel::read_from(&mut &short[..]).is_err());
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in 0u64..500, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items = Tensor::randn(&[25, 3], &mut rng);
            let a = fit(&items, 3, 1.3).unwrap();
            let b = fit(&items.scale(c), 3, 1.3 * c).unwrap();
            prop_assert_eq!(a.centers, b.centers);
            prop_assert_eq!(a.assignment, b.assignment);
        }

        #[test]
        fn deterministic(seed in 0u64..500) {
            let items = Tensor::randn(&[20, 2], &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(fit(&items, 4, 1.0).unwrap(), fit(&items, 4, 1.0).unwrap());
        }
    }
}
