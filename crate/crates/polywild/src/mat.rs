//! 2x2 matrices and state points (A, B).

use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

/// 2x2 matrix stored row-major as (a11, a12, a21, a22).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat2<T> {
    pub e: [T; 4],
}

impl<T: Real> Mat2<T> {
    pub fn new(a11: T, a12: T, a21: T, a22: T) -> Self {
        Self { e: [a11, a12, a21, a22] }
    }

    pub fn zero() -> Self {
        Self { e: [T::zero(); 4] }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::one())
    }

    /// Entry (r, c), zero-based.
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.e[2 * r + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, x: T) {
        self.e[2 * r + c] = x;
    }

    /// Column c as a vector.
    pub fn col(&self, c: usize) -> [T; 2] {
        [self.at(0, c), self.at(1, c)]
    }

    /// Outer product a ⊗ n.
    pub fn outer(a: [T; 2], n: [T; 2]) -> Self {
        Self::new(a[0] * n[0], a[0] * n[1], a[1] * n[0], a[1] * n[1])
    }

    pub fn det(&self) -> T {
        det2(self)
    }

    pub fn cof(&self) -> Self {
        cof2(self)
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.e[0], self.e[2], self.e[1], self.e[3])
    }

    /// Frobenius inner product A : B = tr(AᵀB).
    pub fn dot(&self, o: &Self) -> T {
        self.e.iter().zip(o.e.iter()).fold(T::zero(), |s, (a, b)| s + *a * *b)
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn mul_vec(&self, v: [T; 2]) -> [T; 2] {
        [self.e[0] * v[0] + self.e[1] * v[1], self.e[2] * v[0] + self.e[3] * v[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { e: self.e.map(f) }
    }
}

/// Determinant a11 a22 - a12 a21.
pub fn det2<T: Real>(a: &Mat2<T>) -> T {
    a.e[0] * a.e[3] - a.e[1] * a.e[2]
}

/// Cofactor matrix, the gradient of the determinant: [[a22, -a21], [-a12, a11]].
pub fn cof2<T: Real>(a: &Mat2<T>) -> Mat2<T> {
    Mat2::new(a.e[3], -a.e[2], -a.e[1], a.e[0])
}

impl<T: Real> Add for Mat2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { e: [self.e[0] + o.e[0], self.e[1] + o.e[1], self.e[2] + o.e[2], self.e[3] + o.e[3]] }
    }
}

impl<T: Real> Sub for Mat2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { e: [self.e[0] - o.e[0], self.e[1] - o.e[1], self.e[2] - o.e[2], self.e[3] - o.e[3]] }
    }
}

impl<T: Real> Neg for Mat2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(|x| -x)
    }
}

impl<T: Real> Mul<T> for Mat2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.map(|x| x * s)
    }
}

impl<T: Real> AddAssign for Mat2<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> SubAssign for Mat2<T> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

/// A point (A, B) of the product space, identified with R^8 as (A entries, B entries).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 8]", into = "[T; 8]")]
pub struct StatePoint<T: Copy> {
    pub a: Mat2<T>,
    pub b: Mat2<T>,
}

impl<T: Copy> From<[T; 8]> for StatePoint<T> {
    fn from(x: [T; 8]) -> Self {
        Self { a: Mat2 { e: [x[0], x[1], x[2], x[3]] }, b: Mat2 { e: [x[4], x[5], x[6], x[7]] } }
    }
}

impl<T: Copy> From<StatePoint<T>> for [T; 8] {
    fn from(s: StatePoint<T>) -> Self {
        [s.a.e[0], s.a.e[1], s.a.e[2], s.a.e[3], s.b.e[0], s.b.e[1], s.b.e[2], s.b.e[3]]
    }
}

impl<T: Real> StatePoint<T> {
    pub fn new(a: Mat2<T>, b: Mat2<T>) -> Self {
        Self { a, b }
    }

    pub fn zero() -> Self {
        Self { a: Mat2::zero(), b: Mat2::zero() }
    }

    pub fn to_array(&self) -> [T; 8] {
        (*self).into()
    }

    pub fn from_array(x: [T; 8]) -> Self {
        x.into()
    }

    pub fn dot(&self, o: &Self) -> T {
        self.a.dot(&o.a) + self.b.dot(&o.b)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Projection onto the gradient slot.
    pub fn proj(&self) -> Mat2<T> {
        self.a
    }

    /// Affine combination λ self + (1 - λ) other.
    pub fn lerp_to(&self, other: &Self, lam: T) -> Self {
        *self * lam + *other * (T::one() - lam)
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite()
    }
}

impl<T: Real> Add for StatePoint<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { a: self.a + o.a, b: self.b + o.b }
    }
}

impl<T: Real> Sub for StatePoint<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { a: self.a - o.a, b: self.b - o.b }
    }
}

impl<T: Real> Neg for StatePoint<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self { a: -self.a, b: -self.b }
    }
}

impl<T: Real> Mul<T> for StatePoint<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self { a: self.a * s, b: self.b * s }
    }
}

impl<T: Real> AddAssign for StatePoint<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_and_cof_small_cases() {
        let m = Mat2::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(det2(&m), -2.0);
        assert_eq!(cof2(&m), Mat2::new(4.0, -3.0, -2.0, 1.0));
        assert_eq!(det2(&Mat2::<f64>::identity()), 1.0);
        assert_eq!(cof2(&Mat2::<f64>::zero()), Mat2::zero());
    }

    #[test]
    fn state_round_trips_through_array() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(StatePoint::from_array(x).to_array(), x);
        let s: StatePoint<f64> = serde_json::from_str("[1,2,3,4,5,6,7,8]").unwrap();
        assert_eq!(s.b.at(1, 1), 8.0);
    }

    #[test]
    fn works_in_single_precision() {
        let m = Mat2::<f32>::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(m.det(), -2.0f32);
    }
}
