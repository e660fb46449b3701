use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training) and `f64` (gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
    ///
    /// `a_t` / `b_t` mean the operand is stored transposed (row-major `k x m` / `n x k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows x cols) view over row-major storage
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Below this many multiply-adds, packing for the blocked kernel costs more
/// than it saves.
const SMALL_GEMM: usize = 32 * 1024;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Float>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, c: &mut [T], accumulate: bool) {
    if !accumulate {
        c[..m * n].iter_mut().for_each(|x| *x = T::zero());
    }
    let (rsa, csa) = strides(m, k, a_t);
    let (rsa, csa) = (rsa as usize, csa as usize);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if b_t {
            // b stored n x k: each output is a contiguous dot product
            for (j, out) in row.iter_mut().enumerate() {
                let bj = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (p, &y) in bj.iter().enumerate() {
                    acc = acc + a[i * rsa + p * csa] * y;
                }
                *out = *out + acc;
            }
        } else {
            for p in 0..k {
                let x = a[i * rsa + p * csa];
                for (out, &y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *out = *out + x * y;
                }
            }
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if m * k * n <= SMALL_GEMM {
                    small_gemm(m, k, n, a, a_t, b, b_t, c, accumulate);
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above, strides describe in-bounds views.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
