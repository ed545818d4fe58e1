//! Raw numeric kernels over row-major slices.

use crate::Scalar;

/// Matrix operand: a row-major buffer viewed as `rows × cols`, optionally
/// read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, F> {
    pub data: &'a [F],
    /// Row count of the stored buffer.
    pub rows: usize,
    /// Column count of the stored buffer.
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, F> MatRef<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        MatRef { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (+)= a · b` with `f64` accumulation.
///
/// When `accumulate` is false the previous contents of `out` are ignored.
pub(crate) fn gemm<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, out: &mut [F], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    let wa = F::widen(a.data);
    let wb = F::widen(b.data);
    let mut acc = vec![0.0f64; m * n];
    if k > 0 {
        let (rsa, csa) = a.strides();
        let (rsb, csb) = b.strides();
        // SAFETY: strides describe in-bounds views of `wa`/`wb` of logical
        // shape m×k and k×n; `acc` is a dense m×n row-major buffer.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                wa.as_ptr(),
                rsa,
                csa,
                wb.as_ptr(),
                rsb,
                csb,
                0.0,
                acc.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    if accumulate {
        for (o, v) in out.iter_mut().zip(acc) {
            *o = F::from_f64(o.to_f64() + v);
        }
    } else {
        for (o, v) in out.iter_mut().zip(acc) {
            *o = F::from_f64(v);
        }
    }
}

/// Left-to-right `f64` sum.
#[inline]
pub(crate) fn sum_f64<F: Scalar>(values: &[F]) -> f64 {
    let mut s = 0.0f64;
    for &v in values {
        s += v.to_f64();
    }
    s
}

/// Sum of `values` viewed as `groups × inner`, collapsed over `groups`.
pub(crate) fn sum_leading<F: Scalar>(values: &[F], inner: usize) -> Vec<F> {
    let mut acc = vec![0.0f64; inner];
    for chunk in values.chunks_exact(inner) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v.to_f64();
        }
    }
    acc.into_iter().map(F::from_f64).collect()
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Row-max stabilized softmax over the last dimension, written into `out`.
pub(crate) fn softmax_rows<F: Scalar>(x: &[F], cols: usize, out: &mut [F]) {
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v.to_f64());
        }
        let mut denom = 0.0f64;
        let mut exps = Vec::with_capacity(cols);
        for &v in row {
            let e = (v.to_f64() - max).exp();
            denom += e;
            exps.push(e);
        }
        for (o, e) in orow.iter_mut().zip(exps) {
            *o = F::from_f64(e / denom);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_respects_transposition_flags() {
        // a = [[1,2,3],[4,5,6]]
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0f32; 4];
        // a · aᵀ
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&a, 2, 3).t(), &mut out, false);
        assert_eq!(out, [14.0, 32.0, 32.0, 77.0]);
        let mut out = [0.0f32; 9];
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), &mut out, false);
        assert_eq!(out, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn gemm_accumulates() {
        let a = [1.0f64, 0.0, 0.0, 1.0];
        let b = [2.0f64, 3.0, 4.0, 5.0];
        let mut out = [1.0f64; 4];
        gemm(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2), &mut out, true);
        assert_eq!(out, [3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746).abs() < 1e-8);
        let h = 1e-5;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
