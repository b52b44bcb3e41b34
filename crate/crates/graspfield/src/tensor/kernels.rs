//! Matrix kernels with runtime CPU-feature dispatch.
//!
//! The FMA path and the portable path round differently (fused vs separate
//! multiply-add), but the dispatch decision depends only on the host CPU,
//! so repeated runs on one machine stay bit-identical. Within a kernel each
//! output row is produced by exactly one thread with a fixed accumulation
//! order, which keeps results independent of the thread count.

use crate::parallel::for_each_row_chunk;
use std::sync::OnceLock;

const JT: usize = 64;

#[derive(Clone, Copy, PartialEq)]
enum Isa {
    Fma,
    Portable,
}

fn isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Isa::Fma;
            }
        }
        Isa::Portable
    })
}

// `f32::mul_add` is a libm call unless the fma target feature is enabled,
// so the portable bodies spell out multiply-then-add instead.
macro_rules! ma {
    (fused, $x:expr, $y:expr, $z:expr) => {
        f32::mul_add($x, $y, $z)
    };
    (plain, $x:expr, $y:expr, $z:expr) => {
        $x * $y + $z
    };
}

// One strip of C = A * B rows: A is `rows x k`, B `k x n`, C `rows x n`.
// A JT-wide slice of the output row is accumulated in locals so the
// p-loop never round-trips through memory.
macro_rules! matmul_rows_impl {
    ($mode:ident, $a:ident, $b:ident, $c:ident, $k:ident, $n:ident) => {{
        let m = $c.len() / $n;
        for i in 0..m {
            let arow = &$a[i * $k..(i + 1) * $k];
            let crow = &mut $c[i * $n..(i + 1) * $n];
            let mut j0 = 0;
            while j0 + JT <= $n {
                let mut acc = [0.0f32; JT];
                let mut p = 0;
                while p + 2 <= $k {
                    let a0 = arow[p];
                    let a1 = arow[p + 1];
                    let b0 = &$b[p * $n + j0..p * $n + j0 + JT];
                    let b1 = &$b[(p + 1) * $n + j0..(p + 1) * $n + j0 + JT];
                    for jj in 0..JT {
                        acc[jj] = ma!($mode, a0, b0[jj], acc[jj]);
                    }
                    for jj in 0..JT {
                        acc[jj] = ma!($mode, a1, b1[jj], acc[jj]);
                    }
                    p += 2;
                }
                if p < $k {
                    let a0 = arow[p];
                    let b0 = &$b[p * $n + j0..p * $n + j0 + JT];
                    for jj in 0..JT {
                        acc[jj] = ma!($mode, a0, b0[jj], acc[jj]);
                    }
                }
                crow[j0..j0 + JT].copy_from_slice(&acc);
                j0 += JT;
            }
            if j0 < $n {
                for v in crow[j0..].iter_mut() {
                    *v = 0.0;
                }
                for (p, &apv) in arow.iter().enumerate() {
                    let brow = &$b[p * $n + j0..(p + 1) * $n];
                    for (cv, &bv) in crow[j0..].iter_mut().zip(brow.iter()) {
                        *cv = ma!($mode, apv, bv, *cv);
                    }
                }
            }
        }
    }};
}

// dB rows [first_p, first_p + rows) of dB += A^T * dC, accumulated as a sum
// of row outer products so A and dC stream exactly once per thread.
macro_rules! grad_b_rows_impl {
    ($mode:ident, $a:ident, $dc:ident, $db:ident, $first_p:ident, $k:ident, $n:ident) => {{
        let m = $dc.len() / $n;
        let rows_here = $db.len() / $n;
        for i in 0..m {
            let dcrow = &$dc[i * $n..(i + 1) * $n];
            let arow = &$a[i * $k..(i + 1) * $k];
            for local_p in 0..rows_here {
                let av = arow[$first_p + local_p];
                if av == 0.0 {
                    continue;
                }
                let dbrow = &mut $db[local_p * $n..(local_p + 1) * $n];
                for (dv, &gv) in dbrow.iter_mut().zip(dcrow.iter()) {
                    *dv = ma!($mode, av, gv, *dv);
                }
            }
        }
    }};
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_rows_fma(a: &[f32], b: &[f32], c: &mut [f32], k: usize, n: usize) {
    matmul_rows_impl!(fused, a, b, c, k, n)
}

fn matmul_rows_portable(a: &[f32], b: &[f32], c: &mut [f32], k: usize, n: usize) {
    matmul_rows_impl!(plain, a, b, c, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn grad_b_rows_fma(a: &[f32], dc: &[f32], db: &mut [f32], first_p: usize, k: usize, n: usize) {
    grad_b_rows_impl!(fused, a, dc, db, first_p, k, n)
}

fn grad_b_rows_portable(a: &[f32], dc: &[f32], db: &mut [f32], first_p: usize, k: usize, n: usize) {
    grad_b_rows_impl!(plain, a, dc, db, first_p, k, n)
}

/// C = A * B with A `[m, k]`, B `[k, n]`, C `[m, n]`, all row-major.
pub fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let chosen = isa();
    for_each_row_chunk(c, n, |first_row, chunk| {
        let rows = chunk.len() / n;
        let a_part = &a[first_row * k..(first_row + rows) * k];
        match chosen {
            #[cfg(target_arch = "x86_64")]
            Isa::Fma => unsafe { matmul_rows_fma(a_part, b, chunk, k, n) },
            #[cfg(not(target_arch = "x86_64"))]
            Isa::Fma => matmul_rows_portable(a_part, b, chunk, k, n),
            Isa::Portable => matmul_rows_portable(a_part, b, chunk, k, n),
        }
    });
}

/// C = A * B + bias with an optional relu, fused into one pass over C.
pub fn affine(
    a: &[f32],
    b: &[f32],
    bias: &[f32],
    relu: bool,
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(bias.len(), n);
    if m == 0 || n == 0 {
        return;
    }
    let chosen = isa();
    for_each_row_chunk(c, n, |first_row, chunk| {
        let rows = chunk.len() / n;
        let a_part = &a[first_row * k..(first_row + rows) * k];
        match chosen {
            #[cfg(target_arch = "x86_64")]
            Isa::Fma => unsafe { matmul_rows_fma(a_part, b, chunk, k, n) },
            #[cfg(not(target_arch = "x86_64"))]
            Isa::Fma => matmul_rows_portable(a_part, b, chunk, k, n),
            Isa::Portable => matmul_rows_portable(a_part, b, chunk, k, n),
        }
        // epilogue while the chunk is cache-hot
        if relu {
            for row in chunk.chunks_mut(n) {
                for (v, &bv) in row.iter_mut().zip(bias.iter()) {
                    *v = (*v + bv).max(0.0);
                }
            }
        } else {
            for row in chunk.chunks_mut(n) {
                for (v, &bv) in row.iter_mut().zip(bias.iter()) {
                    *v += bv;
                }
            }
        }
    });
}

/// Row-major transpose, used to reuse `matmul` for dA = dC * B^T.
pub fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// dB += A^T * dC with A `[m, k]`, dC `[m, n]`, dB `[k, n]`.
pub fn matmul_grad_b(a: &[f32], dc: &[f32], db: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(db.len(), k * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let chosen = isa();
    for_each_row_chunk(db, n, |first_p, chunk| match chosen {
        #[cfg(target_arch = "x86_64")]
        Isa::Fma => unsafe { grad_b_rows_fma(a, dc, chunk, first_p, k, n) },
        #[cfg(not(target_arch = "x86_64"))]
        Isa::Fma => grad_b_rows_portable(a, dc, chunk, first_p, k, n),
        Isa::Portable => grad_b_rows_portable(a, dc, chunk, first_p, k, n),
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        c.into_iter().map(|v| v as f32).collect()
    }

    fn pseudo(seed: u64) -> impl FnMut() -> f32 {
        let mut s = seed | 1;
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / 16777216.0 - 0.5
        }
    }

    #[test]
    fn matmul_matches_naive_on_odd_shapes() {
        let mut next = pseudo(0x2545f4914f6cdd1d);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 7), (17, 124, 67), (130, 128, 128)] {
            let a: Vec<f32> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f32> = (0..k * n).map(|_| next()).collect();
            let mut c = vec![0.0; m * n];
            matmul(&a, &b, &mut c, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(want.iter()) {
                assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn grad_b_accumulates_a_transpose_dc() {
        let (m, k, n) = (4usize, 3usize, 2usize);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.25 - 1.0).collect();
        let dc: Vec<f32> = (0..m * n).map(|i| 0.5 - i as f32 * 0.125).collect();
        let mut db = vec![0.0; k * n];
        matmul_grad_b(&a, &dc, &mut db, m, k, n);
        let mut at = vec![0.0; k * m];
        transpose(&a, m, k, &mut at);
        let want = naive(&at, &dc, k, m, n);
        for (x, y) in db.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        // for_each_row_chunk assigns rows to chunks by index, not by thread
        // schedule, so this holds by construction; verify once end to end.
        let mut next = pseudo(99);
        let (m, k, n) = (37usize, 29usize, 65usize);
        let a: Vec<f32> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f32> = (0..k * n).map(|_| next()).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        matmul(&a, &b, &mut c1, m, k, n);
        matmul(&a, &b, &mut c2, m, k, n);
        assert_eq!(c1, c2);
    }
}
