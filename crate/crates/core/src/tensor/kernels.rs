//! Raw slice kernels shared by the forward and backward passes.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: the slices cover the row-major extents asserted above.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), k_, 1, b.as_ptr(), n_, 1, 1.0, c.as_mut_ptr(), n_, 1);
    }
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(g.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(m, n, k, 1.0, g.as_ptr(), n_, 1, b.as_ptr(), 1, n_, 1.0, c.as_mut_ptr(), k_, 1);
    }
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && g.len() >= m * n && c.len() >= k * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(k, m, n, 1.0, a.as_ptr(), 1, k_, g.as_ptr(), n_, 1, 1.0, c.as_mut_ptr(), n_, 1);
    }
}

/// Strides of `shape` viewed inside `out`, with zero stride on broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = super::strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(st)
        .map(|((&s, &o), st)| if s == o { st } else { 0 })
        .collect()
}

/// Visits every output position with the matching offsets into two
/// broadcast operands.
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the odometer over the leading axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            oa -= sa[axis] * out[axis];
            ob -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

/// Permutes axes: `out` axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = super::strides(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![0.0; data.len()];
    for_each_broadcast(&out_shape, &mapped, &zero, |o, i, _| out[o] = data[i]);
    (out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Softmax over rows of width `n`, restricted to entries with a nonzero mask.
/// Rows with no admissible entry produce zeros.
pub fn masked_softmax_rows(x: &[f64], mask: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ((xr, mr), yr) in x.chunks(n).zip(mask.chunks(n)).zip(out.chunks_mut(n)) {
        let max = xr
            .iter()
            .zip(mr)
            .filter(|(_, &m)| m != 0.0)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for ((y, &v), &m) in yr.iter_mut().zip(xr).zip(mr) {
            if m != 0.0 {
                *y = (v - max).exp();
                total += *y;
            }
        }
        for y in yr.iter_mut() {
            *y /= total;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (y, v) in yr.iter_mut().zip(xr) {
            *y = v - lse;
        }
    }
    out
}

/// Normalizes rows of width `n` to zero mean and unit variance; returns the
/// normalized values and each row's inverse standard deviation.
pub fn layer_norm_rows(x: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / n);
    for (xr, yr) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (y, v) in yr.iter_mut().zip(xr) {
            *y = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a same-padded 2-D convolution over `[batch, channels, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dDims {
    /// Calls `f(x_row, w_offset, out_row, len)` for every contiguous run of
    /// multiply-adds sharing one kernel tap.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let plane = self.h * self.w;
        for b in 0..self.batch {
            for o in 0..self.c_out {
                let out_base = (b * self.c_out + o) * plane;
                for c in 0..self.c_in {
                    let x_base = (b * self.c_in + c) * plane;
                    let w_base = (o * self.c_in + c) * self.kh * self.kw;
                    for di in 0..self.kh {
                        // output rows whose input row i + di - ph stays in range
                        let i_lo = ph.saturating_sub(di);
                        let i_hi = (self.h + ph).saturating_sub(di).min(self.h);
                        for dj in 0..self.kw {
                            let wo = w_base + di * self.kw + dj;
                            let j_lo = pw.saturating_sub(dj);
                            let j_hi = (self.w + pw).saturating_sub(dj).min(self.w);
                            if j_hi <= j_lo {
                                continue;
                            }
                            for i in i_lo..i_hi {
                                let xi = i + di - ph;
                                f(x_base + xi * self.w + j_lo + dj - pw, wo, out_base + i * self.w + j_lo, j_hi - j_lo);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.c_out * self.h * self.w];
        self.visit(|xo, wo, oo, len| {
            let kv = k[wo];
            for (o, &xv) in out[oo..oo + len].iter_mut().zip(&x[xo..xo + len]) {
                *o += kv * xv;
            }
        });
        out
    }

    pub fn backward(&self, x: &[f64], k: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; x.len()];
        let mut gk = vec![0.0; k.len()];
        self.visit(|xo, wo, oo, len| {
            let kv = k[wo];
            let gs = &g[oo..oo + len];
            for (d, &gv) in gx[xo..xo + len].iter_mut().zip(gs) {
                *d += gv * kv;
            }
            gk[wo] += gs.iter().zip(&x[xo..xo + len]).map(|(a, b)| a * b).sum::<f64>();
        });
        (gx, gk)
    }
}
