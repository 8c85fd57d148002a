//! Complex FFT of arbitrary length: iterative radix-2 for powers of two,
//! Bluestein's chirp-z reduction otherwise.
//!
//! Convention: the forward transform is the unnormalized DFT
//! `X_k = sum_j x_j exp(-2 pi i jk / K)` and the inverse divides by `K`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use super::Tensor;
use crate::error::{dim_err, Result};

/// Paired real/imaginary parts of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(dim_err!("re {:?} vs im {:?}", re.shape(), im.shape()));
        }
        Ok(Self { re, im })
    }

    pub fn from_real(re: Tensor) -> Self {
        let im = Tensor::zeros(re.shape());
        Self { re, im }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// `[re | im]` side by side along the column axis.
    pub fn to_packed(&self) -> Tensor {
        Tensor::concat_cols(&[&self.re, &self.im]).expect("shapes agree by construction")
    }

    pub fn from_packed(z: &Tensor) -> Result<Self> {
        let c2 = z.cols();
        if c2 % 2 != 0 {
            return Err(dim_err!("packed complex tensor needs an even column count, got {c2}"));
        }
        let c = c2 / 2;
        Ok(Self { re: z.slice_cols(0, c)?, im: z.slice_cols(c, c)? })
    }
}

struct Radix2 {
    n: usize,
    rev: Vec<usize>,
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Self { n, rev, twiddles }
    }

    fn process(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }

    /// Unnormalized transform along the rows of a packed `n x 2c` buffer:
    /// every butterfly updates whole rows.
    fn process_rows(&self, data: &mut [f64], c: usize, inverse: bool) {
        let n = self.n;
        let w = 2 * c;
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                let (lo, hi) = data.split_at_mut(j * w);
                lo[i * w..(i + 1) * w].swap_with_slice(&mut hi[..w]);
            }
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for block in data.chunks_exact_mut(len * w) {
                let (lo, hi) = block.split_at_mut(half * w);
                let pairs = lo.chunks_exact_mut(w).zip(hi.chunks_exact_mut(w));
                for ((ra, rb), tw) in pairs.zip(self.twiddles.iter().step_by(stride)) {
                    let (wr, wi) = (tw.re, sign * tw.im);
                    let (ar, ai) = ra.split_at_mut(c);
                    let (br, bi) = rb.split_at_mut(c);
                    for (((xr, xi), yr), yi) in ar.iter_mut().zip(ai.iter_mut()).zip(br.iter_mut()).zip(bi.iter_mut()) {
                        let tr = *yr * wr - *yi * wi;
                        let ti = *yr * wi + *yi * wr;
                        *yr = *xr - tr;
                        *yi = *xi - ti;
                        *xr += tr;
                        *xi += ti;
                    }
                }
            }
            len <<= 1;
        }
    }
}

struct Bluestein {
    n: usize,
    inner: Radix2,
    chirp: Vec<Complex64>,
    filter: Vec<Complex64>,
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // exp(-i pi k^2 / n) with k^2 reduced mod 2n to keep the angle small
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = (k as u128 * k as u128) % (2 * n as u128);
                Complex64::from_polar(1.0, -PI * k2 as f64 / n as f64)
            })
            .collect();
        let mut filter = vec![Complex64::new(0.0, 0.0); m];
        filter[0] = chirp[0].conj();
        for k in 1..n {
            filter[k] = chirp[k].conj();
            filter[m - k] = chirp[k].conj();
        }
        inner.process(&mut filter, false);
        Self { n, inner, chirp, filter }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let m = self.inner.n;
        let mut work = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..self.n {
            work[k] = buf[k] * self.chirp[k];
        }
        self.inner.process(&mut work, false);
        for (w, f) in work.iter_mut().zip(&self.filter) {
            *w *= f;
        }
        self.inner.process(&mut work, true);
        let scale = 1.0 / m as f64;
        for k in 0..self.n {
            buf[k] = work[k] * scale * self.chirp[k];
        }
    }
}

enum Plan {
    Radix2(Radix2),
    Bluestein(Bluestein),
}

impl Plan {
    fn new(n: usize) -> Self {
        if n.is_power_of_two() {
            Plan::Radix2(Radix2::new(n))
        } else {
            Plan::Bluestein(Bluestein::new(n))
        }
    }

    /// Unnormalized transform in place; `inverse` flips the exponent sign.
    fn process(&self, buf: &mut [Complex64], inverse: bool) {
        match self {
            Plan::Radix2(p) => p.process(buf, inverse),
            Plan::Bluestein(p) => {
                if inverse {
                    buf.iter_mut().for_each(|v| *v = v.conj());
                    p.forward(buf);
                    buf.iter_mut().for_each(|v| *v = v.conj());
                } else {
                    p.forward(buf);
                }
            }
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan(n: usize) -> Rc<Plan> {
    PLANS.with(|p| p.borrow_mut().entry(n).or_insert_with(|| Rc::new(Plan::new(n))).clone())
}

/// Transforms a complex buffer in place. The inverse includes the `1/K` factor.
pub(crate) fn transform(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    plan(n).process(buf, inverse);
    if inverse {
        let s = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

/// Forward DFT of a real vector (any shape; flattened).
pub fn fft(x: &Tensor) -> ComplexTensor {
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut buf, false);
    split(x.shape(), &buf)
}

pub fn ifft(x: &ComplexTensor) -> ComplexTensor {
    let mut buf: Vec<Complex64> =
        x.re.data().iter().zip(x.im.data()).map(|(&r, &i)| Complex64::new(r, i)).collect();
    transform(&mut buf, true);
    split(x.shape(), &buf)
}

fn split(shape: &[usize], buf: &[Complex64]) -> ComplexTensor {
    let re = Tensor::new(shape.to_vec(), buf.iter().map(|c| c.re).collect()).expect("same length");
    let im = Tensor::new(shape.to_vec(), buf.iter().map(|c| c.im).collect()).expect("same length");
    ComplexTensor { re, im }
}

/// Transforms every column of a packed `[re | im]` matrix of shape `K x 2C`
/// along the row (sequence) axis.
pub(crate) fn transform_packed_axis0(z: &Tensor, inverse: bool) -> Tensor {
    let mut out = z.data().to_vec();
    transform_rows_in_place(&mut out, z.rows(), z.cols() / 2, inverse);
    Tensor::new(z.shape().to_vec(), out).expect("same shape")
}

/// In-place transform along the `k` rows of a packed `k x 2c` buffer; the
/// inverse includes the `1/k` factor.
fn transform_rows_in_place(out: &mut [f64], k: usize, c: usize, inverse: bool) {
    if k <= 1 {
        return;
    }
    match &*plan(k) {
        Plan::Radix2(p) => {
            p.process_rows(out, c, inverse);
            if inverse {
                let s = 1.0 / k as f64;
                out.iter_mut().for_each(|v| *v *= s);
            }
        }
        Plan::Bluestein(_) => {
            let mut buf = vec![Complex64::new(0.0, 0.0); k];
            for j in 0..c {
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(out[t * 2 * c + j], out[t * 2 * c + c + j]);
                }
                transform(&mut buf, inverse);
                for (t, b) in buf.iter().enumerate() {
                    out[t * 2 * c + j] = b.re;
                    out[t * 2 * c + c + j] = b.im;
                }
            }
        }
    }
}

/// Forward FFT along axis 0 of a real `K x d` matrix, returned packed
/// `K x 2d`. Two real columns share one complex transform.
pub(crate) fn rfft_packed_axis0(s: &Tensor) -> Tensor {
    let (k, d) = (s.rows(), s.cols());
    let c = d.div_ceil(2);
    let mut z = vec![0.0; k * 2 * c];
    for (row, zr) in s.data().chunks_exact(d).zip(z.chunks_exact_mut(2 * c)) {
        let (zre, zim) = zr.split_at_mut(c);
        for (pair, (a, b)) in row.chunks(2).zip(zre.iter_mut().zip(zim.iter_mut())) {
            *a = pair[0];
            *b = pair.get(1).copied().unwrap_or(0.0);
        }
    }
    transform_rows_in_place(&mut z, k, c, false);
    let mut out = vec![0.0; k * 2 * d];
    for (t, o) in out.chunks_exact_mut(2 * d).enumerate() {
        let u = (k - t) % k;
        let (zt, zu) = (&z[t * 2 * c..(t + 1) * 2 * c], &z[u * 2 * c..(u + 1) * 2 * c]);
        let (ore, oim) = o.split_at_mut(d);
        let (tre, tim) = zt.split_at(c);
        let (ure, uim) = zu.split_at(c);
        // Even column: (Z[t] + conj Z[-t]) / 2; odd column: (Z[t] - conj Z[-t]) / 2i.
        for (p, (re2, im2)) in ore.chunks_mut(2).zip(oim.chunks_mut(2)).enumerate() {
            let (ar, ai, br, bi) = (tre[p], tim[p], ure[p], uim[p]);
            re2[0] = 0.5 * (ar + br);
            im2[0] = 0.5 * (ai - bi);
            if re2.len() == 2 {
                re2[1] = 0.5 * (ai + bi);
                im2[1] = 0.5 * (br - ar);
            }
        }
    }
    Tensor::new(vec![k, 2 * d], out).expect("packed shape")
}

/// Real part of the inverse FFT along axis 0 of a packed `K x 2d` matrix,
/// returned as `K x d`. Each column is first made Hermitian so two of them
/// share one complex transform.
pub(crate) fn irfft_real_axis0(y: &Tensor) -> Tensor {
    let k = y.rows();
    let d = y.cols() / 2;
    let c = d.div_ceil(2);
    let yd = y.data();
    let mut z = vec![0.0; k * 2 * c];
    for (t, zr) in z.chunks_exact_mut(2 * c).enumerate() {
        let u = (k - t) % k;
        let (tre, tim) = yd[t * 2 * d..(t + 1) * 2 * d].split_at(d);
        let (ure, uim) = yd[u * 2 * d..(u + 1) * 2 * d].split_at(d);
        let (zre, zim) = zr.split_at_mut(c);
        for (p, (a, b)) in zre.iter_mut().zip(zim.iter_mut()).enumerate() {
            let j = 2 * p;
            *a = 0.5 * (tre[j] + ure[j]);
            *b = 0.5 * (tim[j] - uim[j]);
            if j + 1 < d {
                *a -= 0.5 * (tim[j + 1] - uim[j + 1]);
                *b += 0.5 * (tre[j + 1] + ure[j + 1]);
            }
        }
    }
    transform_rows_in_place(&mut z, k, c, true);
    let mut out = vec![0.0; k * d];
    for (zr, o) in z.chunks_exact(2 * c).zip(out.chunks_exact_mut(d)) {
        let (zre, zim) = zr.split_at(c);
        for (p, pair) in o.chunks_mut(2).enumerate() {
            pair[0] = zre[p];
            if pair.len() == 2 {
                pair[1] = zim[p];
            }
        }
    }
    Tensor::new(vec![k, d], out).expect("real shape")
}

/// FFT of each column of a `K x C` complex matrix along the sequence axis.
pub fn fft_axis0(x: &ComplexTensor) -> ComplexTensor {
    ComplexTensor::from_packed(&transform_packed_axis0(&x.to_packed(), false)).expect("even width")
}

pub fn ifft_axis0(x: &ComplexTensor) -> ComplexTensor {
    ComplexTensor::from_packed(&transform_packed_axis0(&x.to_packed(), true)).expect("even width")
}

/// Direct `O(K^2)` DFT along axis 0. Slow reference used by the mixers'
/// convolution checks and the demo.
pub fn dft_axis0(x: &ComplexTensor, inverse: bool) -> ComplexTensor {
    let k = x.re.rows();
    let c = x.re.cols();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut re = Tensor::zeros(&[k, c]);
    let mut im = Tensor::zeros(&[k, c]);
    for f in 0..k {
        for t in 0..k {
            let ang = sign * 2.0 * PI * ((f * t) % k) as f64 / k as f64;
            let (s, co) = ang.sin_cos();
            for j in 0..c {
                let (a, b) = (x.re.get(t, j), x.im.get(t, j));
                re.data_mut()[f * c + j] += a * co - b * s;
                im.data_mut()[f * c + j] += a * s + b * co;
            }
        }
    }
    if inverse {
        re = re.scale(1.0 / k as f64);
        im = im.scale(1.0 / k as f64);
    }
    ComplexTensor { re, im }
}
