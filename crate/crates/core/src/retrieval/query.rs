//! Query builders for the three search units.

use rand::Rng;

use crate::clustering::nearest_center;
use crate::error::{dim_err, Result};
use crate::tensor::{sigmoid, Tensor};

/// Target-aware query: the target embedding itself.
pub fn build_query_tasu(target: &Tensor) -> Tensor {
    target.clone()
}

/// Local-aware query from the last `J` valid behaviors `recent` (`J x d`).
/// With a GRU: `Avg(H_r) + Avg(S_r)`; without: `Avg(S_r)`. No recent
/// behaviors gives the zero query.
pub fn build_query_lasu(recent: &Tensor, gru: Option<&Gru>) -> Result<Tensor> {
    let d = recent.cols();
    if recent.rows() == 0 {
        return Ok(Tensor::zeros(&[1, d]));
    }
    let avg = recent.mean_rows()?;
    match gru {
        None => Ok(avg),
        Some(g) => g.forward(recent)?.mean_rows()?.add(&avg),
    }
}

/// Global-aware query: nearest centroid of `target` plus the mean of the
/// valid rows of `s`.
pub fn build_query_gasu(target: &Tensor, s: &Tensor, valid: &[bool], centroids: &Tensor) -> Result<Tensor> {
    let c = nearest_center(centroids, target.data());
    let centroid = Tensor::row(centroids.row_slice(c));
    Ok(centroid.add(&masked_mean(s, valid)?)?)
}

/// Global-aware query from an already resolved centroid vector.
pub fn build_query_gasu_with(centroid: &Tensor, s: &Tensor, valid: &[bool]) -> Result<Tensor> {
    Ok(centroid.clone().reshape(&[1, s.cols()])?.add(&masked_mean(s, valid)?)?)
}

/// Mean of the rows flagged valid; zeros when none are.
pub fn masked_mean(s: &Tensor, valid: &[bool]) -> Result<Tensor> {
    if valid.len() != s.rows() {
        return Err(dim_err!("{} flags for {} rows", valid.len(), s.rows()));
    }
    let d = s.cols();
    let mut out = vec![0.0; d];
    let mut n = 0usize;
    for (i, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for (o, v) in out.iter_mut().zip(s.row_slice(i)) {
            *o += v;
        }
        n += 1;
    }
    if n > 0 {
        out.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(Tensor::row(&out))
}

/// The last `j` valid rows of `s`, in order.
pub fn recent_rows(s: &Tensor, valid: &[bool], j: usize) -> Result<Tensor> {
    let mut idx: Vec<usize> = (0..s.rows()).rev().filter(|&i| valid[i]).take(j).collect();
    idx.reverse();
    s.select_rows(&idx)
}

/// Gated recurrent unit with zero initial state.
///
/// Gates (row-vector convention, `x` is `1 x d_in`):
/// `z = sig(x Wz + h Uz + bz)`, `r = sig(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + (r * h) Un + bn)`, `h' = (1 - z) * h + z * n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    /// `[Wz | Wr | Wn]`, `d_in x 3h`.
    pub w: Tensor,
    /// `[Uz | Ur | Un]`, `h x 3h`.
    pub u: Tensor,
    /// `[bz | br | bn]`, length `3h`.
    pub b: Tensor,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w: Tensor::uniform(&[d_in, 3 * hidden], bound, rng),
            u: Tensor::uniform(&[hidden, 3 * hidden], bound, rng),
            b: Tensor::uniform(&[1, 3 * hidden], bound, rng),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d_in, 3 * hidden]),
            u: Tensor::zeros(&[hidden, 3 * hidden]),
            b: Tensor::zeros(&[1, 3 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.rows()
    }

    /// Hidden state after every step, `J x h`.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let h = self.hidden();
        if xs.cols() != self.w.rows() {
            return Err(dim_err!("gru input dim {} vs {}", xs.cols(), self.w.rows()));
        }
        let xw = xs.matmul(&self.w)?.add_row(&self.b)?;
        let mut state = vec![0.0; h];
        let mut out = Vec::with_capacity(xs.rows() * h);
        for t in 0..xs.rows() {
            let gx = xw.row_slice(t);
            let mut hu = vec![0.0; 3 * h];
            for (k, &sv) in state.iter().enumerate() {
                for (o, u) in hu.iter_mut().zip(self.u.row_slice(k)) {
                    *o += sv * u;
                }
            }
            let z: Vec<f64> = (0..h).map(|i| sigmoid(gx[i] + hu[i])).collect();
            let r: Vec<f64> = (0..h).map(|i| sigmoid(gx[h + i] + hu[h + i])).collect();
            let rh: Vec<f64> = (0..h).map(|i| r[i] * state[i]).collect();
            let mut cand = gx[2 * h..].to_vec();
            for (k, &v) in rh.iter().enumerate() {
                let urow = &self.u.row_slice(k)[2 * h..];
                for (c, u) in cand.iter_mut().zip(urow) {
                    *c += v * u;
                }
            }
            for i in 0..h {
                let n = cand[i].tanh();
                state[i] = (1.0 - z[i]) * state[i] + z[i] * n;
            }
            out.extend_from_slice(&state);
        }
        Tensor::new(vec![xs.rows(), h], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Step-by-step recurrence written with separate gate matrices.
    fn gru_oracle(g: &Gru, xs: &Tensor) -> Vec<Vec<f64>> {
        let h = g.hidden();
        let col = |m: &Tensor, gate: usize, i: usize, j: usize| m.get(i, gate * h + j);
        let mut state = vec![0.0; h];
        let mut all = Vec::new();
        for t in 0..xs.rows() {
            let x = xs.row_slice(t);
            let pre = |gate: usize, hv: &[f64]| -> Vec<f64> {
                (0..h)
                    .map(|j| {
                        let mut s = g.b.data()[gate * h + j];
                        for (i, xv) in x.iter().enumerate() {
                            s += xv * col(&g.w, gate, i, j);
                        }
                        for (i, hvv) in hv.iter().enumerate() {
                            s += hvv * col(&g.u, gate, i, j);
                        }
                        s
                    })
                    .collect()
            };
            let z: Vec<f64> = pre(0, &state).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            let r: Vec<f64> = pre(1, &state).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            let rh: Vec<f64> = r.iter().zip(&state).map(|(a, b)| a * b).collect();
            let n: Vec<f64> = pre(2, &rh).into_iter().map(f64::tanh).collect();
            state = (0..h).map(|j| (1.0 - z[j]) * state[j] + z[j] * n[j]).collect();
            all.push(state.clone());
        }
        all
    }

    #[test]
    fn tasu_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let e = Tensor::randn(&[1, 5], &mut rng);
            assert_eq!(build_query_tasu(&e), e);
        }
    }

    #[test]
    fn lasu_plain_average() {
        let s = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(build_query_lasu(&s, None).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(build_query_lasu(&Tensor::zeros(&[0, 2]), None).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn lasu_zero_gru_adds_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::randn(&[6, 4], &mut rng);
        let g = Gru::zeros(4, 4);
        let hs = g.forward(&s).unwrap();
        assert!(hs.data().iter().all(|&v| v == 0.0));
        let q = build_query_lasu(&s, Some(&g)).unwrap();
        assert!(q.max_abs_diff(&s.mean_rows().unwrap()) < 1e-15);
    }

    #[test]
    fn gru_matches_recurrence_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Gru::new(5, 5, &mut rng);
        let xs = Tensor::randn(&[7, 5], &mut rng);
        let got = g.forward(&xs).unwrap();
        for (t, want) in gru_oracle(&g, &xs).iter().enumerate() {
            for (a, b) in got.row_slice(t).iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let q = build_query_lasu(&xs, Some(&g)).unwrap();
        let want = got.mean_rows().unwrap().add(&xs.mean_rows().unwrap()).unwrap();
        assert!(q.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gasu_single_centroid_empty_sequence() {
        let c = Tensor::row(&[0.5, -1.0]);
        let s = Tensor::zeros(&[3, 2]);
        let q = build_query_gasu(&Tensor::row(&[9.0, 9.0]), &s, &[false; 3], &c).unwrap();
        assert_eq!(q.data(), &[0.5, -1.0]);
    }

    #[test]
    fn gasu_tie_goes_to_lower_centroid() {
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let s = Tensor::zeros(&[1, 2]);
        let q = build_query_gasu(&Tensor::row(&[0.0, 3.0]), &s, &[false], &c).unwrap();
        assert_eq!(q.data(), &[1.0, 0.0]);
    }

    #[test]
    fn gasu_matches_scan_plus_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Tensor::randn(&[6, 3], &mut rng);
        let s = Tensor::randn(&[10, 3], &mut rng);
        let valid: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
        let e = Tensor::randn(&[1, 3], &mut rng);
        let mut best = (f64::INFINITY, 0);
        for r in 0..6 {
            let dist: f64 = c.row_slice(r).iter().zip(e.data()).map(|(a, b)| (a - b).powi(2)).sum();
            if dist < best.0 {
                best = (dist, r);
            }
        }
        let rows: Vec<usize> = (0..10).filter(|i| valid[*i]).collect();
        let mean = s.select_rows(&rows).unwrap().mean_rows().unwrap();
        let want = Tensor::row(c.row_slice(best.1)).add(&mean).unwrap();
        let got = build_query_gasu(&e, &s, &valid, &c).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn recent_rows_skip_padding() {
        let s = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let r = recent_rows(&s, &[false, true, true, true], 2).unwrap();
        assert_eq!(r.data(), &[2.0, 3.0]);
        let r = recent_rows(&s, &[false, false, false, true], 5).unwrap();
        assert_eq!(r.data(), &[3.0]);
    }
}
