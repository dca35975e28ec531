//! Thin wrapper over the `f64` GEMM kernel.

/// Operand layout: a row-major buffer, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub transposed: bool,
}

impl<'a> Operand<'a> {
    pub fn plain(data: &'a [f64]) -> Self {
        Operand {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [f64]) -> Self {
        Operand {
            data,
            transposed: true,
        }
    }

    /// Row and column strides for a logical `rows × cols` view.
    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            // stored as cols × rows
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn widen(src: &[f32]) -> Vec<f64> {
    src.iter().map(|&v| v as f64).collect()
}

pub(crate) fn widen_into(src: &[f32], dst: &mut [f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v as f64);
}

pub(crate) fn narrow(src: &[f64]) -> Vec<f32> {
    src.iter().map(|&v| v as f32).collect()
}
