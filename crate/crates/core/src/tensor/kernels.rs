// Slice-level kernels shared by the eager API and the tape.
//
// Every output row is produced with a fixed summation order, so row-parallel
// execution is bitwise identical to the serial path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const PAR_MIN_WORK: usize = 1 << 15;

/// Rows of the output handed to one dgemm call. Fixed so that serial and
/// parallel runs see identical blocking.
const GEMM_ROWS: usize = 64;

/// `out[m×n] = op(a) · op(b)` with explicit row/column strides for both inputs.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, out: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let block = |i: usize, chunk: &mut [f64]| {
        let rows = chunk.len() / n;
        // SAFETY: the chunk starts at row `i·GEMM_ROWS`; every index read through
        // `a` (rows < m, cols < k) and `b` (k × n) lies inside the slices, whose
        // lengths the callers check against the strides.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(i * GEMM_ROWS * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_WORK {
        out.par_chunks_mut(GEMM_ROWS * n)
            .enumerate()
            .for_each(|(i, c)| block(i, c));
        return;
    }
    out.chunks_mut(GEMM_ROWS * n).enumerate().for_each(|(i, c)| block(i, c));
}

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    gemm(m, k, n, a, k, 1, b, n, 1, out);
}

/// `out[m×n] = a[m×k] · bᵀ` where `b` is `[n×k]`.
pub fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    gemm(m, k, n, a, k, 1, b, 1, k, out);
}

/// `out[k×n] = aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`.
pub fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == m * n && out.len() == k * n);
    gemm(k, m, n, a, 1, k, b, n, 1, out);
}

/// Strided `c = alpha·op(a)·op(b) + beta·c` on one thread. Panics if any
/// addressed element falls outside its slice.
#[allow(clippy::too_many_arguments)]
fn dgemm_strided(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    beta: f64,
    (c, rsc, csc): (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k > 0 && last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: bounds of all three operands checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Multi-head scaled dot-product attention over `batch` sequences of `t`
/// tokens; rows of `q`, `k`, `v` are `[batch·t × d]`. Returns the output and
/// the attention probabilities `[batch × heads × t × t]`.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], batch: usize, heads: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let t = q.len() / d / batch;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * t * d];
    let mut probs = vec![0.0; batch * heads * t * t];
    let one = |b: usize, o: &mut [f64], p: &mut [f64]| {
        let rows = b * t * d..(b + 1) * t * d;
        let (qb, kb, vb) = (&q[rows.clone()], &k[rows.clone()], &v[rows]);
        for h in 0..heads {
            let ph = &mut p[h * t * t..(h + 1) * t * t];
            dgemm_strided((t, dh, t), scale, (&qb[h * dh..], d, 1), (&kb[h * dh..], 1, d), 0.0, (ph, t, 1));
            for row in ph.chunks_mut(t) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                row.iter_mut().for_each(|x| {
                    *x = (*x - max).exp();
                    sum += *x;
                });
                row.iter_mut().for_each(|x| *x /= sum);
            }
            dgemm_strided((t, t, dh), 1.0, (ph, t, 1), (&vb[h * dh..], d, 1), 0.0, (&mut o[h * dh..], d, 1));
        }
    };
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(t * d)
        .zip(probs.par_chunks_mut(heads * t * t))
        .enumerate()
        .for_each(|(b, (o, p))| one(b, o, p));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(t * d)
        .zip(probs.chunks_mut(heads * t * t))
        .enumerate()
        .for_each(|(b, (o, p))| one(b, o, p));
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v` given the
/// output gradient `g`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    batch: usize,
    heads: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t = q.len() / d / batch;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; q.len()];
    let mut gv = vec![0.0; q.len()];
    let one = |b: usize, (gqb, (gkb, gvb)): (&mut [f64], (&mut [f64], &mut [f64]))| {
        let rows = b * t * d..(b + 1) * t * d;
        let (qb, kb, vb, gb) = (&q[rows.clone()], &k[rows.clone()], &v[rows.clone()], &g[rows]);
        let mut ds = vec![0.0; t * t];
        for h in 0..heads {
            let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            dgemm_strided((t, t, dh), 1.0, (p, 1, t), (&gb[h * dh..], d, 1), 0.0, (&mut gvb[h * dh..], d, 1));
            dgemm_strided((t, dh, t), 1.0, (&gb[h * dh..], d, 1), (&vb[h * dh..], 1, d), 0.0, (&mut ds, t, 1));
            for (drow, prow) in ds.chunks_mut(t).zip(p.chunks(t)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                drow.iter_mut().zip(prow).for_each(|(x, &pv)| *x = pv * (*x - dot) * scale);
            }
            dgemm_strided((t, t, dh), 1.0, (&ds, t, 1), (&kb[h * dh..], d, 1), 0.0, (&mut gqb[h * dh..], d, 1));
            dgemm_strided((t, t, dh), 1.0, (&ds, 1, t), (&qb[h * dh..], d, 1), 0.0, (&mut gkb[h * dh..], d, 1));
        }
    };
    #[cfg(feature = "parallel")]
    gq.par_chunks_mut(t * d)
        .zip(gk.par_chunks_mut(t * d).zip(gv.par_chunks_mut(t * d)))
        .enumerate()
        .for_each(|(b, c)| one(b, c));
    #[cfg(not(feature = "parallel"))]
    gq.chunks_mut(t * d)
        .zip(gk.chunks_mut(t * d).zip(gv.chunks_mut(t * d)))
        .enumerate()
        .for_each(|(b, c)| one(b, c));
    (gq, gk, gv)
}

pub fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Split a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// In-place max-stabilised softmax along `axis`.
pub(crate) fn softmax_axis(data: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| data[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                data[idx(j)] /= sum;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

#[inline]
pub(crate) fn quick_gelu_grad(x: f64) -> f64 {
    let s = sigmoid(1.702 * x);
    s + 1.702 * x * s * (1.0 - s)
}

/// Row-wise layer norm. Returns (output, normalised input, reciprocal std per row).
pub(crate) fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        matmul_into(&a, &b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = transpose2(&b, k, n);
        matmul_nt_into(&a, &bt, &mut out, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = transpose2(&a, m, k);
        matmul_tn_into(&at, &b, &mut out, k, m, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (quick_gelu(x + h) - quick_gelu(x - h)) / (2.0 * h);
            assert!((fd - quick_gelu_grad(x)).abs() < 1e-8);
        }
    }
}
