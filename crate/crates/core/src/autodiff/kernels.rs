//! Row-major matrix product kernels. All kernels accumulate into `out`.
//!
//! The blocked GEMM is single-threaded with a fixed blocking, so results are
//! bit-reproducible run to run.

use crate::tensor::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    // SAFETY: the lengths checked above cover every strided index.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    // SAFETY: as above; `b` is read with swapped strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == k * m && b.len() == k * n && out.len() == m * n);
    // SAFETY: as above; `a` is read with swapped strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
