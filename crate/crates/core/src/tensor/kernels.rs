// Row-major GEMM kernels. All of them accumulate into `out`.

const MR: usize = 4;
const NR: usize = 8;

/// out[m,n] += a[m,k] · b[k,n]
///
/// 4×8 register tiles; edges fall back to a plain row loop.
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    let mut pack = vec![[0.0f32; MR]; k];
    for i in (0..m_full).step_by(MR) {
        for (p, slot) in pack.iter_mut().enumerate() {
            for (r, v) in slot.iter_mut().enumerate() {
                *v = a[(i + r) * k + p];
            }
        }
        for j in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f32; NR]; MR];
            for (ap, b_row) in pack.iter().zip(b.chunks_exact(n)) {
                let bv: &[f32; NR] = b_row[j..j + NR].try_into().unwrap();
                for r in 0..MR {
                    for t in 0..NR {
                        acc[r][t] += ap[r] * bv[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                o.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
    }
    let edge = |i: usize, j0: usize, out: &mut [f32]| {
        let row = &mut out[i * n + j0..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n + j0..(p + 1) * n];
            row.iter_mut().zip(b_row).for_each(|(o, &v)| *o += av * v);
        }
    };
    if n_full < n {
        for i in 0..m_full {
            edge(i, n_full, out);
        }
    }
    for i in m_full..m {
        edge(i, 0, out);
    }
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    gemm_nn(a, &transpose(b, n, k), out, m, k, n);
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    gemm_nn(&transpose(a, m, k), b, out, k, m, n);
}
