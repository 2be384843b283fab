//! Dense matrix kernels.
//!
//! Every output element accumulates its inner-dimension terms strictly in
//! increasing index order, independent of the outer dimensions. Appending
//! zero-weighted terms (padding, masked attention) therefore never changes a
//! result, which the padding-inertness and decode-consistency properties
//! rely on.

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 8;

/// `out[m,n] += a[m,k] · b[k,n]`.
///
/// Works on `4×8` output tiles held in registers across the whole inner loop.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let full_cols = n - n % TILE_COLS;
    let mut i = 0;
    while i + TILE_ROWS <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[0.0; TILE_COLS]; TILE_ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + TILE_COLS]);
            }
            for (p, brow) in b.chunks_exact(n).enumerate() {
                let bv: &[f64; TILE_COLS] = brow[j..j + TILE_COLS].try_into().unwrap();
                let av = [a0[p], a1[p], a2[p], a3[p]];
                for r in 0..TILE_ROWS {
                    for c in 0..TILE_COLS {
                        acc[r][c] += av[r] * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + TILE_COLS].copy_from_slice(row);
            }
            j += TILE_COLS;
        }
        for r in i..i + TILE_ROWS {
            row_tail(
                &a[r * k..(r + 1) * k],
                b,
                &mut out[r * n..(r + 1) * n],
                full_cols,
                n,
            );
        }
        i += TILE_ROWS;
    }
    for r in i..m {
        row_tail(
            &a[r * k..(r + 1) * k],
            b,
            &mut out[r * n..(r + 1) * n],
            0,
            n,
        );
    }
}

/// Columns `from..n` of one output row, each summed over `p` in order.
fn row_tail(arow: &[f64], b: &[f64], orow: &mut [f64], from: usize, n: usize) {
    if from == n {
        return;
    }
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n + from..(p + 1) * n];
        for (o, &bv) in orow[from..].iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

/// `out[k,n] += aᵀ · g` for `a[m,k]`, `g[m,n]`.
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let at = transpose(a, m, k);
    matmul_acc(&at, g, out, k, m, n);
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `out[m,k] += g[m,n] · bᵀ` for `b[k,n]`.
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, out, m, n, k);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn unrolled_kernel_matches_sequential_sum_bitwise() {
        for (m, k, n) in [(3, 7, 5), (9, 5, 19), (4, 3, 8), (13, 11, 24)] {
            let a: Vec<f64> = (0..m * k)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
                .collect();
            let b: Vec<f64> = (0..k * n)
                .map(|i| ((i * 13 % 7) as f64 - 3.0) / 7.0)
                .collect();
            let mut out = vec![0.0; m * n];
            matmul_acc(&a, &b, &mut out, m, k, n);
            assert_eq!(out, naive(&a, &b, m, k, n), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn small_kernel_case() {
        let (m, k, n) = (3, 7, 5);
        let a: Vec<f64> = (0..m * k)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
            .collect();
        let b: Vec<f64> = (0..k * n)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) / 7.0)
            .collect();
        let mut out = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut out, m, k, n);
        assert_eq!(out, naive(&a, &b, m, k, n));
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let (m, k, n) = (4, 3, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let g: Vec<f64> = (0..m * n).map(|i| 1.0 - i as f64 * 0.25).collect();
        let mut atg = vec![0.0; k * n];
        matmul_at_b_acc(&a, &g, &mut atg, m, k, n);
        assert_eq!(atg, naive(&transpose(&a, m, k), &g, k, m, n));

        let b: Vec<f64> = (0..k * n).map(|i| i as f64 - 1.5).collect();
        let mut gbt = vec![0.0; m * k];
        matmul_a_bt_acc(&g, &b, &mut gbt, m, n, k);
        assert_eq!(gbt, naive(&g, &transpose(&b, k, n), m, n, k));
    }
}
