use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

/// Element type of tensors. `f32` is used for training, `f64` for gradient checks.
pub trait Scalar:
    Float + NumCast + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// `c = a * b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n` (row-major, contiguous).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    ) {
        Self::gemm_ex(m, k, n, Self::one(), a, a_strides, b, b_strides, beta, c, (n as isize, 1));
    }

    /// `c = alpha * a * b + beta * c` with strided operands, including `c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_ex(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// `exp` for softmax kernels. Implementations may trade the last ulp
    /// for speed.
    fn exp_kernel(self) -> Self {
        self.exp()
    }

    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite f64 converts to every scalar")
    }

    fn to_f64_lossless(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_strides: (isize, isize),
    b_len: usize,
    b_strides: (isize, isize),
    c_len: usize,
    c_strides: (isize, isize),
) {
    let non_negative = |(r, c): (isize, isize)| r >= 0 && c >= 0;
    assert!(non_negative(a_strides) && non_negative(b_strides) && non_negative(c_strides));
    assert!(c_strides.0 > 0 && c_strides.1 > 0, "gemm: output strides must be positive");
    assert!(span(m, k, a_strides) <= a_len, "gemm: lhs buffer too small");
    assert!(span(k, n, b_strides) <= b_len, "gemm: rhs buffer too small");
    assert!(span(m, n, c_strides) <= c_len, "gemm: output buffer too small");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $exp:path) => {
        impl_scalar!(@impl $t, $gemm, fn exp_kernel(self) -> Self { $exp(self) });
    };
    ($t:ty, $gemm:path) => {
        impl_scalar!(@impl $t, $gemm,);
    };
    (@impl $t:ty, $gemm:path, $($extra:item)?) => {
        impl Scalar for $t {
            $($extra)?

            fn gemm_ex(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len(), c_strides);
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            c[i * c_strides.0 as usize + j * c_strides.1 as usize] *= beta;
                        }
                    }
                    return;
                }
                // SAFETY: bounds of all three operands were checked above and `c`
                // cannot alias the shared borrows.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, exp_f32);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Polynomial `exp` with range reduction to `[-ln2/2, ln2/2]`; relative error
/// below 3e-7 on the normal range. Inputs are clamped to the finite range.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.3, 88.7);
    let n = (x * LOG2E).round();
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    f32::from_bits((y.to_bits() as i32 + ((n as i32) << 23)) as u32)
}
