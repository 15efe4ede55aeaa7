//! Row-major dense kernels. Reductions use a fixed lane layout so results
//! are bit-reproducible run to run.

pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `c += a b` with `a` of shape `m x k`, `b` of shape `k x n`, all row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    assert!(a.len() >= m * k);
    matmul_strided(a, k, 1, b, m, k, n, c);
}

/// `c += a^T b` where `a` is stored row-major as `k x m`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    assert!(a.len() >= m * k);
    matmul_strided(a, 1, m, b, m, k, n, c);
}

/// Element `(i, p)` of the left operand is `a[i * rs + p * cs]`.
///
/// On x86-64 with AVX2 the same code is compiled with wider vectors. Rust
/// never contracts `a * b + c` into a fused multiply-add, so both paths
/// produce identical bits.
#[allow(clippy::too_many_arguments)]
fn matmul_strided(a: &[f64], rs: usize, cs: usize, b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    assert!(b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { matmul_avx2(a, rs, cs, b, m, k, n, c) };
            return;
        }
    }
    matmul_generic(a, rs, cs, b, m, k, n, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn matmul_avx2(a: &[f64], rs: usize, cs: usize, b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    matmul_generic(a, rs, cs, b, m, k, n, c);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn matmul_generic(a: &[f64], rs: usize, cs: usize, b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    let b = &b[..k * n];
    let c = &mut c[..m * n];
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for r0 in (0..m_main).step_by(MR) {
        for c0 in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (p, b_row) in b.chunks_exact(n).enumerate() {
                let bv: &[f64; NR] = b_row[c0..c0 + NR].try_into().unwrap();
                for (i, row) in acc.iter_mut().enumerate() {
                    let av = a[(r0 + i) * rs + p * cs];
                    for j in 0..NR {
                        row[j] += av * bv[j];
                    }
                }
            }
            for (i, row) in acc.iter().enumerate() {
                let cr: &mut [f64; NR] = (&mut c[(r0 + i) * n + c0..(r0 + i) * n + c0 + NR]).try_into().unwrap();
                for j in 0..NR {
                    cr[j] += row[j];
                }
            }
        }
        if n_main < n {
            for i in r0..r0 + MR {
                edge_row(a, rs, cs, b, i, n, n_main, c);
            }
        }
    }
    for i in m_main..m {
        edge_row(a, rs, cs, b, i, n, 0, c);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn edge_row(a: &[f64], rs: usize, cs: usize, b: &[f64], i: usize, n: usize, from: usize, c: &mut [f64]) {
    let cr = &mut c[i * n + from..(i + 1) * n];
    for (p, b_row) in b.chunks_exact(n).enumerate() {
        let av = a[i * rs + p * cs];
        for (y, &x) in cr.iter_mut().zip(&b_row[from..]) {
            *y += av * x;
        }
    }
}

/// Row-major transpose of an `rows x cols` matrix into `out`.
pub fn transpose_into(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for (r, xr) in x[..rows * cols].chunks_exact(cols).enumerate() {
        for (c, &v) in xr.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}

/// `y[r] = x[r] W + b` for `rows` rows; `w` is `n_in x n_out`.
pub fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64], n_in: usize, n_out: usize, y: &mut [f64]) {
    for r in 0..rows {
        y[r * n_out..(r + 1) * n_out].copy_from_slice(b);
    }
    matmul_acc(x, w, rows, n_in, n_out, y);
}

/// Accumulates `dw += x^T dy`, `db += sum(dy)` and, if given, `dx += dy W^T`.
/// Takes `W^T` (`n_out x n_in`) so that a batch transposes each matrix once.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    wt: &[f64],
    n_in: usize,
    n_out: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for r in 0..rows {
        axpy(1.0, &dy[r * n_out..(r + 1) * n_out], db);
    }
    matmul_tn_acc(x, dy, n_in, rows, n_out, dw);
    if let Some(dx) = dx {
        matmul_acc(dy, wt, rows, n_out, n_in, dx);
    }
}

/// Per-row layer norm. Returns normalized inputs and reciprocal std for the
/// backward pass.
pub fn layer_norm(x: &[f64], rows: usize, dim: usize, gain: &[f64], bias: &[f64], y: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (xr[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = gain[i] * h + bias[i];
        }
    }
    (xhat, rstd)
}

/// Accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    rows: usize,
    dim: usize,
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let o = r * dim;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..dim {
            let g = dy[o + i];
            dgain[i] += g * xhat[o + i];
            dbias[i] += g;
            dxhat[i] = g * gain[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[o + i];
        }
        m1 /= dim as f64;
        m2 /= dim as f64;
        for i in 0..dim {
            dx[o + i] += rstd[r] * (dxhat[i] - m1 - xhat[o + i] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

/// `tanh` through a single `exp`; absolute error stays at rounding level,
/// which is all GELU needs, at a fraction of libm's cost.
#[inline]
fn tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

/// GELU and its derivative from a single `tanh` evaluation.
#[inline]
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}
