//! Thin safe wrapper over `matrixmultiply::dgemm` with arbitrary strides.
//!
//! Each output element accumulates over `k` in the same order regardless of
//! how many rows are multiplied at once, so a row computed inside a large batch
//! is bit-identical to the same row computed alone.

#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    /// Row-major matrix with `cols` columns.
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c <- a * b + beta * c` where `a` is m-by-k, `b` is k-by-n and `c` is a
/// row-major m-by-n buffer.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // Bounds: the furthest element touched must be inside each slice.
    let last = |mat: &Mat<'_>, rows: usize, cols: usize| {
        (rows as isize - 1) * mat.rs + (cols as isize - 1) * mat.cs
    };
    assert!((last(&a, m, k) as usize) < a.data.len());
    assert!((last(&b, k, n) as usize) < b.data.len());
    // SAFETY: strides and extents were checked against the slice lengths above
    // and `c` is a distinct, exclusively borrowed buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
