/// Strided view of a row-major-ish matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }

    fn max_index(&self, m: usize, n: usize) -> usize {
        if m == 0 || n == 0 {
            return 0;
        }
        (m - 1) * self.rs as usize + (n - 1) * self.cs as usize
    }
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and `c` is a
/// row-major `m x n` buffer.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(m == 0 || k == 0 || a.max_index(m, k) < a.data.len());
    assert!(k == 0 || n == 0 || b.max_index(k, n) < b.data.len());
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
    // SAFETY: the asserts above bound every index the kernel touches.
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

/// Plain row-major product `out = a[m,k] * b[k,n]`.
pub fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm(m, k, n, MatRef::rows(a, k), MatRef::rows(b, n), 0.0, out);
}
