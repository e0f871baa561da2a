//! Thin safe wrapper around `matrixmultiply::dgemm`.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: isize,
    pub cols: isize,
}

impl Layout {
    /// Row-major `[r, c]` matrix, optionally read transposed.
    pub fn row_major(cols: usize, transposed: bool) -> Self {
        if transposed {
            Self {
                rows: 1,
                cols: cols as isize,
            }
        } else {
            Self {
                rows: cols as isize,
                cols: 1,
            }
        }
    }
}

fn span(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * l.rows + (cols - 1) as isize * l.cols) as usize + 1
}

/// `c <- beta * c + a · b` where `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    n_c: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= span(m, k, la), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, lb), "gemm: rhs buffer too small");
    assert!(c.len() >= m * n_c && n <= n_c, "gemm: output buffer too small");
    // SAFETY: operand extents were checked against their strides above and the
    // output is a freshly borrowed, non-aliased mutable slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            c.as_mut_ptr(),
            n_c as isize,
            1,
        );
    }
}
