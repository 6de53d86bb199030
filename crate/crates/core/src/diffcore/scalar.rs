use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type of a tape.
///
/// `f64` is the working type. [`Dual`] carries a tangent alongside the value so
/// that running the reverse pass over dual numbers yields exact
/// Hessian-vector products (forward-over-reverse).
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;

    /// Primal value. Branch decisions (ReLU masks, max) are taken on it.
    fn re(self) -> f64;

    fn exp(self) -> Self;

    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// `c = a * b (+ c if accumulate)` for row/column-strided matrices.
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        accumulate: bool,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand too small: need index {last}, have {len}");
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn re(self) -> f64 {
        self
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (usize, usize),
        b: &[f64],
        b_strides: (usize, usize),
        c: &mut [f64],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_extent(c.len(), m, n, (n, 1));
        if k == 0 {
            if !accumulate {
                c[..m * n].iter_mut().for_each(|v| *v = 0.0);
            }
            return;
        }
        check_extent(a.len(), m, k, a_strides);
        check_extent(b.len(), k, n, b_strides);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: extents of all three operands were checked above against
        // the strides handed to the kernel, and `c` does not alias `a` or `b`.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// First-order dual number `v + t·ϵ`, ϵ² = 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub t: f64,
}

impl Dual {
    pub fn new(v: f64, t: f64) -> Self {
        Self { v, t }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.t + o.t)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.t - o.t)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.v * o.t + self.t * o.v)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.v / o.v, (self.t * o.v - self.v * o.t) / (o.v * o.v))
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.t)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }

    #[inline]
    fn re(self) -> f64 {
        self.v
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.t * e)
    }

    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.t / self.v)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Dual],
        (ars, acs): (usize, usize),
        b: &[Dual],
        (brs, bcs): (usize, usize),
        c: &mut [Dual],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_extent(c.len(), m, n, (n, 1));
        if k > 0 {
            check_extent(a.len(), m, k, (ars, acs));
            check_extent(b.len(), k, n, (brs, bcs));
        }
        for i in 0..m {
            for j in 0..n {
                let mut acc = if accumulate { c[i * n + j] } else { Dual::default() };
                for p in 0..k {
                    acc += a[i * ars + p * acs] * b[p * brs + j * bcs];
                }
                c[i * n + j] = acc;
            }
        }
    }
}
