//! Small dense matrix kernels behind the convolution and linear ops.
//!
//! Two shapes are enough for everything in this crate:
//!
//! * `gemm_nn`: `C += A * B`, both row-major. The accumulation over the inner
//!   index is a single ascending chain per output element, so results match
//!   the textbook triple loop exactly (the `f64` path relies on this for
//!   oracle comparisons).
//! * `gemm_nt`: `C += A * B^T` with `B` stored row-major; used by backward
//!   passes where a relaxed summation order is fine.
//!
//! The `f32` entry points dispatch once to an AVX2+FMA microkernel when the
//! host supports it and otherwise fall back to the portable loops.

/// Portable `C[m][n] += sum_k A[m][k] * B[k][n]`.
pub fn gemm_nn_generic<E: super::super::tensor::Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    c: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    const NT: usize = 256;
    for row in 0..m {
        let a_row = &a[row * k..(row + 1) * k];
        let c_row = &mut c[row * n..(row + 1) * n];
        let mut n0 = 0;
        while n0 < n {
            let nt = NT.min(n - n0);
            for (kk, &av) in a_row.iter().enumerate() {
                let b_row = &b[kk * n + n0..kk * n + n0 + nt];
                let c_tile = &mut c_row[n0..n0 + nt];
                for (cv, &bv) in c_tile.iter_mut().zip(b_row) {
                    *cv = *cv + av * bv;
                }
            }
            n0 += nt;
        }
    }
}

/// Portable `C[m][n] += sum_k A[m][k] * B[n][k]`.
pub fn gemm_nt_generic<E: super::super::tensor::Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    c: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for row in 0..m {
        let a_row = &a[row * k..(row + 1) * k];
        for col in 0..n {
            let b_row = &b[col * k..(col + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            c[row * n + col] = c[row * n + col] + acc;
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn fma_available() -> bool {
    use std::sync::OnceLock;
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

pub fn gemm_nn_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if fma_available() {
        // Safety: feature presence checked above.
        unsafe { x86::gemm_nn_avx2(m, k, n, a, b, c) };
        return;
    }
    gemm_nn_generic(m, k, n, a, b, c);
}

pub fn gemm_nt_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if fma_available() {
        unsafe { x86::gemm_nt_avx2(m, k, n, a, b, c) };
        return;
    }
    gemm_nt_generic(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    /// Rx16 FMA microkernels over full k (R = 6 main, 1..5 for the row
    /// remainder); the column remainder takes scalar loops.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_nn_avx2(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();

        const NR: usize = 16;
        let n_main = n - n % NR;

        let mut row = 0;
        while row < m {
            let rows_left = m - row;
            let mut col = 0;
            while col < n_main {
                let (ab, bb, cb) = (ap.add(row * k), bp.add(col), cp.add(row * n + col));
                match rows_left {
                    1 => kernel_rx16::<1>(k, n, ab, bb, cb),
                    2 => kernel_rx16::<2>(k, n, ab, bb, cb),
                    3 => kernel_rx16::<3>(k, n, ab, bb, cb),
                    4 => kernel_rx16::<4>(k, n, ab, bb, cb),
                    5 => kernel_rx16::<5>(k, n, ab, bb, cb),
                    _ => kernel_rx16::<6>(k, n, ab, bb, cb),
                }
                col += NR;
            }
            let taken = rows_left.min(6);
            for r in row..row + taken {
                for cc in n_main..n {
                    let mut acc = *cp.add(r * n + cc);
                    for kk in 0..k {
                        acc += *ap.add(r * k + kk) * *bp.add(kk * n + cc);
                    }
                    *cp.add(r * n + cc) = acc;
                }
            }
            row += taken;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn kernel_rx16<const R: usize>(k: usize, n: usize, a: *const f32, b: *const f32, c: *mut f32) {
        let mut acc: [[__m256; 2]; R] = [[_mm256_setzero_ps(); 2]; R];
        for r in 0..R {
            acc[r][0] = _mm256_loadu_ps(c.add(r * n));
            acc[r][1] = _mm256_loadu_ps(c.add(r * n + 8));
        }
        for kk in 0..k {
            let b0 = _mm256_loadu_ps(b.add(kk * n));
            let b1 = _mm256_loadu_ps(b.add(kk * n + 8));
            for r in 0..R {
                let av = _mm256_broadcast_ss(&*a.add(r * k + kk));
                acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
                acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
            }
        }
        for r in 0..R {
            _mm256_storeu_ps(c.add(r * n), acc[r][0]);
            _mm256_storeu_ps(c.add(r * n + 8), acc[r][1]);
        }
    }

    /// Row-by-row dot products with four-column blocking.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_nt_avx2(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(c.len(), m * n);
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        let k_main = k - k % 8;
        let n_main = n - n % 4;

        for row in 0..m {
            let ar = ap.add(row * k);
            let mut col = 0;
            while col < n_main {
                let mut acc0 = _mm256_setzero_ps();
                let mut acc1 = _mm256_setzero_ps();
                let mut acc2 = _mm256_setzero_ps();
                let mut acc3 = _mm256_setzero_ps();
                let b0 = bp.add(col * k);
                let b1 = bp.add((col + 1) * k);
                let b2 = bp.add((col + 2) * k);
                let b3 = bp.add((col + 3) * k);
                let mut kk = 0;
                while kk < k_main {
                    let av = _mm256_loadu_ps(ar.add(kk));
                    acc0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0.add(kk)), acc0);
                    acc1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1.add(kk)), acc1);
                    acc2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2.add(kk)), acc2);
                    acc3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3.add(kk)), acc3);
                    kk += 8;
                }
                let mut sums = [hsum(acc0), hsum(acc1), hsum(acc2), hsum(acc3)];
                while kk < k {
                    let av = *ar.add(kk);
                    sums[0] += av * *b0.add(kk);
                    sums[1] += av * *b1.add(kk);
                    sums[2] += av * *b2.add(kk);
                    sums[3] += av * *b3.add(kk);
                    kk += 1;
                }
                for (j, s) in sums.iter().enumerate() {
                    let pc = cp.add(row * n + col + j);
                    *pc += s;
                }
                col += 4;
            }
            while col < n {
                let br = bp.add(col * k);
                let mut acc = _mm256_setzero_ps();
                let mut kk = 0;
                while kk < k_main {
                    acc = _mm256_fmadd_ps(_mm256_loadu_ps(ar.add(kk)), _mm256_loadu_ps(br.add(kk)), acc);
                    kk += 8;
                }
                let mut s = hsum(acc);
                while kk < k {
                    s += *ar.add(kk) * *br.add(kk);
                    kk += 1;
                }
                *cp.add(row * n + col) += s;
                col += 1;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(v: __m256) -> f32 {
        let hi = _mm256_extractf128_ps(v, 1);
        let lo = _mm256_castps256_ps128(v);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    fn naive_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = c[i * n + j];
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = acc;
            }
        }
    }

    #[test]
    fn nn_matches_naive_over_sizes() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (6, 16, 16), (13, 9, 33), (7, 64, 50)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.normal() as f32).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.normal() as f32).collect();
            let mut c1: Vec<f32> = (0..m * n).map(|_| rng.normal() as f32).collect();
            let mut c2 = c1.clone();
            gemm_nn_f32(m, k, n, &a, &b, &mut c1);
            naive_nn(m, k, n, &a, &b, &mut c2);
            for (x, y) in c1.iter().zip(&c2) {
                assert!((x - y).abs() < 1e-4, "{m}x{k}x{n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn nt_matches_transposed_nn() {
        let mut rng = Rng::new(12);
        for &(m, k, n) in &[(2, 3, 4), (6, 17, 9), (5, 40, 11)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.normal() as f32).collect();
            let bt: Vec<f32> = (0..n * k).map(|_| rng.normal() as f32).collect();
            // b[k][n] = bt[n][k]
            let mut b = vec![0.0f32; k * n];
            for kk in 0..k {
                for j in 0..n {
                    b[kk * n + j] = bt[j * k + kk];
                }
            }
            let mut c1 = vec![0.0f32; m * n];
            let mut c2 = vec![0.0f32; m * n];
            gemm_nt_f32(m, k, n, &a, &bt, &mut c1);
            naive_nn(m, k, n, &a, &b, &mut c2);
            for (x, y) in c1.iter().zip(&c2) {
                assert!((x - y).abs() < 1e-4, "{m}x{k}x{n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn f64_nn_is_exact_vs_naive() {
        let mut rng = Rng::new(13);
        let (m, k, n) = (5, 23, 17);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut c1 = vec![0.0f64; m * n];
        let mut c2 = vec![0.0f64; m * n];
        gemm_nn_generic(m, k, n, &a, &b, &mut c1);
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c2[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        assert_eq!(c1, c2, "f64 path must match the naive loop bit-for-bit");
    }
}
