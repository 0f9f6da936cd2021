//! Dense f64 matrix kernels used by the graph primitives.
//!
//! Row-major throughout. Each kernel has a portable body; on x86_64 the same
//! body is re-instantiated under `avx2,fma` so LLVM vectorizes it with FMA.
//! Loop order is fixed, so results are bit-identical between repeat runs of
//! the same build.

#[cfg(target_arch = "x86_64")]
use std::sync::OnceLock;

#[cfg(target_arch = "x86_64")]
fn wide() -> bool {
    static WIDE: OnceLock<bool> = OnceLock::new();
    *WIDE.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

#[inline(always)]
fn madd<const FMA: bool>(acc: f64, x: f64, y: f64) -> f64 {
    // mul_add only maps to an fma instruction when the target feature is on;
    // elsewhere it would become a slow libm call.
    if FMA {
        x.mul_add(y, acc)
    } else {
        acc + x * y
    }
}

// c[m x n] = a[m x k] . b[k x n]
//
// 4x8 register tiles on the bulk so the accumulators stay in vector
// registers across the k loop; remainders fall back to the axpy form.
#[inline(always)]
fn nn_body<const FMA: bool>(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= m {
        let mut j = 0;
        while j + 8 <= n {
            let mut acc = [[0.0f64; 8]; 4];
            for p in 0..k {
                let bl: [f64; 8] = b[p * n + j..p * n + j + 8].try_into().unwrap();
                let av = [
                    a[i * k + p],
                    a[(i + 1) * k + p],
                    a[(i + 2) * k + p],
                    a[(i + 3) * k + p],
                ];
                for r in 0..4 {
                    for l in 0..8 {
                        acc[r][l] = madd::<FMA>(acc[r][l], av[r], bl[l]);
                    }
                }
            }
            for r in 0..4 {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + 8];
                for (cv, &av) in crow.iter_mut().zip(&acc[r]) {
                    *cv += av;
                }
            }
            j += 8;
        }
        if j < n {
            for r in 0..4 {
                for p in 0..k {
                    let av = a[(i + r) * k + p];
                    let brow = &b[p * n + j..p * n + n];
                    let crow = &mut c[(i + r) * n + j..(i + r) * n + n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv = madd::<FMA>(*cv, av, bv);
                    }
                }
            }
        }
        i += 4;
    }
    for i in i..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = madd::<FMA>(*cv, av, bv);
            }
        }
    }
}

// c[k x n] = aT . g  with a[m x k], g[m x n]
//
// Blocks of four source rows share one pass over c, with the four g tiles
// held in registers across the p loop.
#[inline(always)]
fn tn_body<const FMA: bool>(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= m {
        let mut j = 0;
        while j + 8 <= n {
            let gt: [[f64; 8]; 4] = [
                g[i * n + j..i * n + j + 8].try_into().unwrap(),
                g[(i + 1) * n + j..(i + 1) * n + j + 8].try_into().unwrap(),
                g[(i + 2) * n + j..(i + 2) * n + j + 8].try_into().unwrap(),
                g[(i + 3) * n + j..(i + 3) * n + j + 8].try_into().unwrap(),
            ];
            for p in 0..k {
                let av = [
                    a[i * k + p],
                    a[(i + 1) * k + p],
                    a[(i + 2) * k + p],
                    a[(i + 3) * k + p],
                ];
                let crow = &mut c[p * n + j..p * n + j + 8];
                let mut acc: [f64; 8] = crow.as_ref().try_into().unwrap();
                for r in 0..4 {
                    for l in 0..8 {
                        acc[l] = madd::<FMA>(acc[l], av[r], gt[r][l]);
                    }
                }
                crow.copy_from_slice(&acc);
            }
            j += 8;
        }
        if j < n {
            for r in 0..4 {
                let arow = &a[(i + r) * k..(i + r + 1) * k];
                let grow = &g[(i + r) * n + j..(i + r) * n + n];
                for (p, &av) in arow.iter().enumerate() {
                    let crow = &mut c[p * n + j..p * n + n];
                    for (cv, &gv) in crow.iter_mut().zip(grow) {
                        *cv = madd::<FMA>(*cv, av, gv);
                    }
                }
            }
        }
        i += 4;
    }
    for i in i..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv = madd::<FMA>(*cv, av, gv);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn nn_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    nn_body::<true>(a, b, m, k, n, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tn_avx2(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    tn_body::<true>(a, g, m, k, n, c);
}

/// c += a[m x k] . b[k x n]; c must already hold m*n values.
pub(crate) fn gemm_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if wide() {
        unsafe { nn_avx2(a, b, m, k, n, c) };
        return;
    }
    nn_body::<false>(a, b, m, k, n, c);
}

/// a[m x k] . b[k x n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_nn_acc(a, b, m, k, n, &mut c);
    c
}

/// c += aT . g with a[m x k], g[m x n]; c must already hold k*n values.
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    if wide() {
        unsafe { tn_avx2(a, g, m, k, n, c) };
        return;
    }
    tn_body::<false>(a, g, m, k, n, c);
}

/// aT . g with a[m x k], g[m x n]; result [k x n]
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    gemm_tn_acc(a, g, m, k, n, &mut c);
    c
}

/// c += a[m x k] . bT with b[n x k]; scratch holds the transposed b.
pub(crate) fn gemm_nt_acc(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    scratch: &mut Vec<f64>,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    transpose_into(b, n, k, scratch);
    gemm_nn_acc(a, scratch, m, k, n, c);
}

/// a[m x k] . bT with b[n x k]; result [m x n]
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let mut scratch = Vec::new();
    gemm_nt_acc(a, b, m, k, n, &mut scratch, &mut c);
    c
}

/// Transpose a row-major [r x c] matrix into `out` (resized as needed).
pub(crate) fn transpose_into(a: &[f64], r: usize, c: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(r * c, 0.0);
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
}

/// Transpose a row-major [r x c] matrix into [c x r].
#[cfg(test)]
pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = Vec::new();
    transpose_into(a, r, c, &mut t);
    t
}

/// dst += src, elementwise.
pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference triple loop, deliberately independent of the kernel bodies.
    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive() {
        let mut state = 1234u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for &(m, k, n) in &[(1, 1, 1), (5, 4, 3), (7, 13, 2), (16, 8, 16)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            let want = naive_nn(&a, &b, m, k, n);
            let got = gemm_nn(&a, &b, m, k, n);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            // nt: a . bT where bT has shape [n x k] -> pass b transposed
            let bt = transpose(&b, k, n);
            let got_nt = gemm_nt(&a, &bt, m, k, n);
            for (x, y) in got_nt.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            // tn: aT . g where we pick g = a so shapes line up [k x k]
            let g: Vec<f64> = (0..m * n).map(|_| next()).collect();
            let want_tn = naive_nn(&transpose(&a, m, k), &g, k, m, n);
            let got_tn = gemm_tn(&a, &g, m, k, n);
            for (x, y) in got_tn.iter().zip(&want_tn) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
