//! Thin strided wrapper over `matrixmultiply::dgemm`.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n, "gemm output too small");
    let span = |rows: usize, cols: usize, l: Layout| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * l.rs + (cols - 1) as isize * l.cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, la), "gemm lhs too small");
    assert!(b.len() >= span(k, n, lb), "gemm rhs too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    // SAFETY: bounds of all three operands were checked above against the
    // strides handed to dgemm, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut c = [0.0; 2];
        gemm(2, 2, 1, &a, Layout::row_major(2), &b, Layout::row_major(1), 0.0, &mut c);
        assert_eq!(c, [3.0, 7.0]);
        // aᵀ·b
        gemm(2, 2, 1, &a, Layout::transposed(2), &b, Layout::row_major(1), 0.0, &mut c);
        assert_eq!(c, [4.0, 6.0]);
        gemm(2, 2, 1, &a, Layout::transposed(2), &b, Layout::row_major(1), 1.0, &mut c);
        assert_eq!(c, [8.0, 12.0]);
    }
}
