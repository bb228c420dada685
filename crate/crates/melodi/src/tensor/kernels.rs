//! Low-level dense kernels. Row-major f64 throughout.
//!
//! With the `parallel` feature, matrix products are split into fixed-size
//! row chunks that are distributed over the rayon pool. Chunk boundaries do
//! not depend on the worker count, so results are bit-identical to the
//! sequential build.

/// Rows per parallel task. Fixed so the split is independent of thread count.
const ROW_CHUNK: usize = 64;

/// c[m x n] = a[m x k] . b[k x n]
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_chunked(a, b, c, m, k, n, false, false);
}

/// c[m x n] = a_t[k x m]^T . b[k x n]  (a stored transposed)
pub fn matmul_ta(a_t: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a_t.len(), k * m);
    gemm_chunked(a_t, b, c, m, k, n, true, false);
}

/// c[m x n] = a[m x k] . b_t[n x k]^T  (b stored transposed)
pub fn matmul_tb(a: &[f64], b_t: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b_t.len(), n * k);
    gemm_chunked(a, b_t, c, m, k, n, false, true);
}

fn gemm_chunked(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let run = |rows: std::ops::Range<usize>, c_chunk: &mut [f64]| {
        let mm = rows.end - rows.start;
        // Row/col strides of `a` restricted to this row block.
        let (a_ptr, rsa, csa) = if trans_a {
            (unsafe { a.as_ptr().add(rows.start) }, 1isize, m as isize)
        } else {
            (unsafe { a.as_ptr().add(rows.start * k) }, k as isize, 1isize)
        };
        let (rsb, csb) = if trans_b {
            (1isize, k as isize)
        } else {
            (n as isize, 1isize)
        };
        unsafe {
            matrixmultiply::dgemm(
                mm,
                k,
                n,
                1.0,
                a_ptr,
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        c.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, chunk)| {
                let start = i * ROW_CHUNK;
                let end = (start + ROW_CHUNK).min(m);
                run(start..end, chunk);
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, chunk) in c.chunks_mut(ROW_CHUNK * n).enumerate() {
            let start = i * ROW_CHUNK;
            let end = (start + ROW_CHUNK).min(m);
            run(start..end, chunk);
        }
    }
}

/// out += scale * src, elementwise.
pub fn axpy(out: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(out.len(), src.len());
    for (o, s) in out.iter_mut().zip(src) {
        *o += scale * s;
    }
}
