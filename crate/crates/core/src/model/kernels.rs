//! Dense row-major kernels used by the transformer.
//!
//! Every reduction has a fixed association order (eight interleaved partial
//! sums), so results do not depend on which instruction set executes them.
//! On x86-64 the hot kernels are recompiled with AVX2 enabled and selected
//! at runtime.

use crate::scalar::Scalar;

const LANES: usize = 8;

#[inline(always)]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let split = n - n % LANES;
    let mut acc = [T::zero(); LANES];
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in split..n {
        tail += a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// `y += alpha * x`
#[inline(always)]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

macro_rules! dispatch {
    ($(#[$m:meta])* pub fn $name:ident / $fast:ident / $generic:ident <$T:ident> ($($arg:ident : $ty:ty),* $(,)?)) => {
        $(#[$m])*
        #[allow(clippy::too_many_arguments)]
        pub fn $name<$T: Scalar>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected on this CPU.
                    unsafe { $fast::<$T>($($arg),*) };
                    return;
                }
            }
            $generic::<$T>($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        #[allow(clippy::too_many_arguments)]
        unsafe fn $fast<$T: Scalar>($($arg: $ty),*) {
            $generic::<$T>($($arg),*)
        }
    };
}

dispatch! {
    /// `y[r, :] = bias + x[r, :] @ w` for `w` of shape `(d_in, d_out)`.
    pub fn linear / linear_avx2 / linear_impl<T>(
        x: &[T], rows: usize, d_in: usize, w: &[T], bias: Option<&[T]>, d_out: usize, y: &mut [T],
    )
}

const ROW_BLOCK: usize = 3;
const COL_BLOCK: usize = 32;

#[inline(always)]
fn linear_impl<T: Scalar>(x: &[T], rows: usize, d_in: usize, w: &[T], bias: Option<&[T]>, d_out: usize, y: &mut [T]) {
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    debug_assert_eq!(y.len(), rows * d_out);
    // Register-blocked tiles of decreasing width. Every element is
    // `bias + x_0 w_0 + x_1 w_1 + ...` summed in ascending k whatever tile
    // computes it.
    let wide = d_out - d_out % COL_BLOCK;
    let narrow = d_out - d_out % LANES;
    let full_rows = rows - rows % ROW_BLOCK;
    for r0 in (0..full_rows).step_by(ROW_BLOCK) {
        for c0 in (0..wide).step_by(COL_BLOCK) {
            tile::<T, ROW_BLOCK, COL_BLOCK>(x, d_in, w, bias, d_out, y, r0, c0);
        }
        for c0 in (wide..narrow).step_by(LANES) {
            tile::<T, ROW_BLOCK, LANES>(x, d_in, w, bias, d_out, y, r0, c0);
        }
        for c0 in narrow..d_out {
            tile::<T, ROW_BLOCK, 1>(x, d_in, w, bias, d_out, y, r0, c0);
        }
    }
    for r0 in full_rows..rows {
        for c0 in (0..wide).step_by(COL_BLOCK) {
            tile::<T, 1, COL_BLOCK>(x, d_in, w, bias, d_out, y, r0, c0);
        }
        for c0 in (wide..narrow).step_by(LANES) {
            tile::<T, 1, LANES>(x, d_in, w, bias, d_out, y, r0, c0);
        }
        for c0 in narrow..d_out {
            tile::<T, 1, 1>(x, d_in, w, bias, d_out, y, r0, c0);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile<T: Scalar, const R: usize, const C: usize>(
    x: &[T],
    d_in: usize,
    w: &[T],
    bias: Option<&[T]>,
    d_out: usize,
    y: &mut [T],
    r0: usize,
    c0: usize,
) {
    let mut acc = [[T::zero(); C]; R];
    if let Some(b) = bias {
        for a in acc.iter_mut() {
            a.copy_from_slice(&b[c0..c0 + C]);
        }
    }
    for k in 0..d_in {
        let wk: &[T; C] = w[k * d_out + c0..k * d_out + c0 + C].try_into().expect("tile width");
        for (r, a) in acc.iter_mut().enumerate() {
            let xv = x[(r0 + r) * d_in + k];
            for j in 0..C {
                a[j] += xv * wk[j];
            }
        }
    }
    for (r, a) in acc.iter().enumerate() {
        y[(r0 + r) * d_out + c0..(r0 + r) * d_out + c0 + C].copy_from_slice(a);
    }
}

dispatch! {
    /// Backward of [`linear`]. Overwrites `dx` when given; accumulates into
    /// `dw` and `db`.
    pub fn linear_backward / linear_backward_avx2 / linear_backward_impl<T>(
        dy: &[T], x: &[T], w: &[T], rows: usize, d_in: usize, d_out: usize,
        dx: Option<&mut [T]>, dw: &mut [T], db: Option<&mut [T]>,
    )
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn linear_backward_impl<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        // dx = dy @ w^T through the blocked forward kernel.
        let mut wt = vec![T::zero(); d_in * d_out];
        for k in 0..d_in {
            for j in 0..d_out {
                wt[j * d_in + k] = w[k * d_out + j];
            }
        }
        linear(dy, rows, d_out, &wt, None, d_in, dx);
    }
    // dw[k, j] += sum over rows of x[r, k] * dy[r, j], rows in ascending order.
    let full_k = d_in - d_in % ROW_BLOCK;
    let full_cols = d_out - d_out % COL_BLOCK;
    for k0 in (0..full_k).step_by(ROW_BLOCK) {
        for c0 in (0..full_cols).step_by(COL_BLOCK) {
            let mut acc = [[T::zero(); COL_BLOCK]; ROW_BLOCK];
            for (kk, a) in acc.iter_mut().enumerate() {
                a.copy_from_slice(&dw[(k0 + kk) * d_out + c0..(k0 + kk) * d_out + c0 + COL_BLOCK]);
            }
            for r in 0..rows {
                let dyr = &dy[r * d_out + c0..r * d_out + c0 + COL_BLOCK];
                for (kk, a) in acc.iter_mut().enumerate() {
                    let xv = x[r * d_in + k0 + kk];
                    for j in 0..COL_BLOCK {
                        a[j] += xv * dyr[j];
                    }
                }
            }
            for (kk, a) in acc.iter().enumerate() {
                dw[(k0 + kk) * d_out + c0..(k0 + kk) * d_out + c0 + COL_BLOCK].copy_from_slice(a);
            }
        }
    }
    let tail = |k: usize, cols: std::ops::Range<usize>, dw: &mut [T]| {
        let dwk = &mut dw[k * d_out + cols.start..k * d_out + cols.end];
        for r in 0..rows {
            axpy(x[r * d_in + k], &dy[r * d_out + cols.start..r * d_out + cols.end], dwk);
        }
    };
    if full_cols < d_out {
        for k in 0..full_k {
            tail(k, full_cols..d_out, dw);
        }
    }
    for k in full_k..d_in {
        tail(k, 0..d_out, dw);
    }
    if let Some(db) = db {
        for r in 0..rows {
            axpy(T::one(), &dy[r * d_out..(r + 1) * d_out], db);
        }
    }
}

/// Causal multi-head attention for `rows` new positions starting at
/// `start`. `qkv` holds the new rows (`[q | k | v]`, width `3d`); `keys`
/// and `values` hold all `start + rows` positions (width `d`). Writes the
/// concatenated head outputs into `att`; fills `probs` (head-major,
/// `rows x rows`) when it is non-empty, which requires `start == 0`.
///
/// Every score and output element is reduced in ascending index order, so
/// a row's result does not depend on how many rows are processed together.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Scalar>(
    qkv: &[T],
    rows: usize,
    start: usize,
    keys: &[T],
    values: &[T],
    d: usize,
    n_heads: usize,
    att: &mut [T],
    probs: &mut [T],
) {
    let hd = d / n_heads;
    let n = start + rows;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut q = vec![T::zero(); rows * hd];
    let mut kt = vec![T::zero(); hd * n];
    let mut v = vec![T::zero(); n * hd];
    let mut p = vec![T::zero(); rows * n];
    let mut out = vec![T::zero(); rows * hd];
    for h in 0..n_heads {
        let c = h * hd;
        for i in 0..rows {
            q[i * hd..(i + 1) * hd].copy_from_slice(&qkv[i * 3 * d + c..i * 3 * d + c + hd]);
        }
        for s in 0..n {
            for k in 0..hd {
                kt[k * n + s] = keys[s * d + c + k];
            }
            v[s * hd..(s + 1) * hd].copy_from_slice(&values[s * d + c..s * d + c + hd]);
        }
        linear(&q, rows, hd, &kt, None, n, &mut p);
        for i in 0..rows {
            let valid = start + i + 1;
            let row = &mut p[i * n..(i + 1) * n];
            softmax_prefix(row, valid, scale);
            if !probs.is_empty() {
                probs[(h * rows + i) * rows..(h * rows + i + 1) * rows].copy_from_slice(row);
            }
        }
        linear(&p, rows, n, &v, None, hd, &mut out);
        for i in 0..rows {
            att[i * d + c..i * d + c + hd].copy_from_slice(&out[i * hd..(i + 1) * hd]);
        }
    }
}

/// Scaled softmax over `row[..valid]`; the remainder is set to zero.
fn softmax_prefix<T: Scalar>(row: &mut [T], valid: usize, scale: T) {
    let mut max = T::neg_infinity();
    for x in &mut row[..valid] {
        *x *= scale;
        max = max.max(*x);
    }
    let mut sum = T::zero();
    for x in &mut row[..valid] {
        *x = (*x - max).exp_act();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in &mut row[..valid] {
        *x *= inv;
    }
    row[valid..].fill(T::zero());
}

/// Backward of [`attend`] over a full sequence (`start == 0`): gradients
/// of the query, key and value rows (width `d` each, overwritten).
#[allow(clippy::too_many_arguments)]
pub fn attend_backward<T: Scalar>(
    datt: &[T],
    qkv: &[T],
    probs: &[T],
    rows: usize,
    d: usize,
    n_heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let hd = d / n_heads;
    let t = rows;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut dout = vec![T::zero(); t * hd];
    let mut q = vec![T::zero(); t * hd];
    let mut k = vec![T::zero(); t * hd];
    let mut vt = vec![T::zero(); hd * t];
    let mut dp = vec![T::zero(); t * t];
    let mut dst = vec![T::zero(); t * t];
    let mut pt = vec![T::zero(); t * t];
    let mut tmp = vec![T::zero(); t * hd];
    for h in 0..n_heads {
        let c = h * hd;
        for i in 0..t {
            dout[i * hd..(i + 1) * hd].copy_from_slice(&datt[i * d + c..i * d + c + hd]);
            q[i * hd..(i + 1) * hd].copy_from_slice(&qkv[i * 3 * d + c..i * 3 * d + c + hd]);
            k[i * hd..(i + 1) * hd].copy_from_slice(&qkv[i * 3 * d + d + c..i * 3 * d + d + c + hd]);
            for j in 0..hd {
                vt[j * t + i] = qkv[i * 3 * d + 2 * d + c + j];
            }
        }
        let p = &probs[h * t * t..(h + 1) * t * t];
        // dP = dO V^T
        linear(&dout, t, hd, &vt, None, t, &mut dp);
        // dS = P * (dP - <P, dP>_row) * scale, kept in place in `dp`.
        for i in 0..t {
            let pr = &p[i * t..i * t + i + 1];
            let dr = &mut dp[i * t..(i + 1) * t];
            let mut w = T::zero();
            for s in 0..=i {
                w += pr[s] * dr[s];
            }
            for s in 0..=i {
                dr[s] = pr[s] * (dr[s] - w) * scale;
            }
            dr[i + 1..].fill(T::zero());
        }
        for i in 0..t {
            for s in 0..t {
                dst[s * t + i] = dp[i * t + s];
                pt[s * t + i] = p[i * t + s];
            }
        }
        linear(&dp, t, t, &k, None, hd, &mut tmp);
        scatter(&tmp, t, hd, d, c, dq);
        linear(&dst, t, t, &q, None, hd, &mut tmp);
        scatter(&tmp, t, hd, d, c, dk);
        linear(&pt, t, t, &dout, None, hd, &mut tmp);
        scatter(&tmp, t, hd, d, c, dv);
    }
}

fn scatter<T: Scalar>(src: &[T], rows: usize, hd: usize, d: usize, c: usize, dst: &mut [T]) {
    for i in 0..rows {
        dst[i * d + c..i * d + c + hd].copy_from_slice(&src[i * hd..(i + 1) * hd]);
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; writes `(mean, rstd)` per row into `stats`.
pub fn layernorm<T: Scalar>(x: &[T], rows: usize, d: usize, g: &[T], b: &[T], y: &mut [T], stats: &mut [(T, T)]) {
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        let yr = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            yr[j] = (xr[j] - mean) * rstd * g[j] + b[j];
        }
        stats[r] = (mean, rstd);
    }
}

/// Backward of [`layernorm`]; accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    stats: &[(T, T)],
    rows: usize,
    d: usize,
    g: &[T],
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..rows {
        let (mean, rstd) = stats[r];
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = dyr[j] * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
        }
        let m1 = sum_dxhat * inv_d;
        let m2 = sum_dxhat_xhat * inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = dyr[j] * g[j];
            dxr[j] += rstd * (dxhat - m1 - xhat * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &[T], y: &mut [T]) {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    for (yi, &xi) in y.iter_mut().zip(x) {
        let u = c * (xi + a * xi * xi * xi);
        *yi = half * xi * (T::one() + u.tanh_act());
    }
}

/// `dx = dy * gelu'(x)` (overwrites `dx`).
pub fn gelu_backward<T: Scalar>(dy: &[T], x: &[T], dx: &mut [T]) {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    for ((dxi, &dyi), &xi) in dx.iter_mut().zip(dy).zip(x) {
        let u = c * (xi + a * xi * xi * xi);
        let th = u.tanh_act();
        let du = c * (T::one() + three * a * xi * xi);
        let grad = half * (T::one() + th) + half * xi * (T::one() - th * th) * du;
        *dxi = dyi * grad;
    }
}
