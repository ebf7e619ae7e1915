//! Scalar abstraction shared by every numeric routine in the workspace.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// Besides the usual arithmetic this carries a GEMM entry point so that
/// generic code reaches the specialised `matrixmultiply` kernels.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Name written into serialized weight blobs.
    const DTYPE: &'static str;
    /// Width of one element in bytes.
    const BYTES: usize;

    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A * B + beta * C` on raw strided storage.
    ///
    /// # Safety
    /// All pointers must address storage large enough for the given
    /// dimensions and strides. See [`gemm`] for the checked wrapper.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn lit(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only strided window into a slice: element `(i, j)` lives at
/// `off + i * rs + j * cs`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major matrix with `cols` columns starting at `off`.
    pub fn rows(data: &'a [T], off: usize, cols: usize) -> Self {
        View { data, off, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major block with leading dimension `ld`.
    pub fn trans(data: &'a [T], off: usize, ld: usize) -> Self {
        View { data, off, rs: 1, cs: ld }
    }

    fn last(&self, r: usize, c: usize) -> usize {
        self.off + (r - 1) * self.rs + (c - 1) * self.cs
    }
}

pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn rows(data: &'a mut [T], off: usize, cols: usize) -> Self {
        ViewMut { data, off, rs: cols, cs: 1 }
    }
}

/// Checked `C = alpha * A(m×k) * B(k×n) + beta * C(m×n)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: ViewMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        let c_data = c.data;
        for i in 0..m {
            for j in 0..n {
                let idx = c.off + i * c.rs + j * c.cs;
                c_data[idx] = if beta == T::zero() { T::zero() } else { beta * c_data[idx] };
            }
        }
        return;
    }
    assert!(a.last(m, k) < a.data.len(), "gemm: A out of bounds");
    assert!(b.last(k, n) < b.data.len(), "gemm: B out of bounds");
    assert!(c.off + (m - 1) * c.rs + (n - 1) * c.cs < c.data.len(), "gemm: C out of bounds");
    // SAFETY: extents checked above; A/B never alias C because C is borrowed mutably.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
