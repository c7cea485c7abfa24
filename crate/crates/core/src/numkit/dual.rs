//! First-order dual numbers, used to push a directional derivative through
//! the network's forward and backward passes. Running the reverse pass in
//! dual arithmetic yields an exact Hessian-vector product.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub const fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

/// Arithmetic the network kernels are generic over.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> + AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn gelu(self) -> Self;
    fn gelu_prime(self) -> Self;
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// tanh-approximated GeLU.
pub fn gelu(u: f64) -> f64 {
    let s = SQRT_2_OVER_PI * (u + GELU_C * u * u * u);
    0.5 * u * (1.0 + s.tanh())
}

pub fn gelu_prime(u: f64) -> f64 {
    let s = SQRT_2_OVER_PI * (u + GELU_C * u * u * u);
    let ds = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * u * u);
    let th = s.tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * ds
}

pub fn gelu_second(u: f64) -> f64 {
    let s = SQRT_2_OVER_PI * (u + GELU_C * u * u * u);
    let ds = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * u * u);
    let dds = SQRT_2_OVER_PI * 6.0 * GELU_C * u;
    let th = s.tanh();
    let sech2 = 1.0 - th * th;
    sech2 * ds + 0.5 * u * sech2 * (dds - 2.0 * th * ds * ds)
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn gelu(self) -> Self {
        gelu(self)
    }
    #[inline]
    fn gelu_prime(self) -> Self {
        gelu_prime(self)
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn gelu(self) -> Self {
        Dual::new(gelu(self.re), gelu_prime(self.re) * self.eps)
    }
    #[inline]
    fn gelu_prime(self) -> Self {
        Dual::new(gelu_prime(self.re), gelu_second(self.re) * self.eps)
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}
