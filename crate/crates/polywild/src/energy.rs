//! Polyconvex energies F(A) = ν/2 |A|² + G(A, det A) with G drawn from a convex term algebra.

use crate::mat::{cof2, det2, Mat2, StatePoint};
use crate::scalar::{lit, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// An affine function c_a : A + c_d d + c_0 of (A, d).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de> + Default"))]
pub struct AffineForm<T> {
    pub ca: [T; 4],
    #[serde(default)]
    pub cd: T,
    #[serde(default)]
    pub c0: T,
}

impl<T: Real> AffineForm<T> {
    fn eval(&self, a: &Mat2<T>, d: T) -> T {
        Mat2 { e: self.ca }.dot(a) + self.cd * d + self.c0
    }
}

/// One convex term of G.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound(deserialize = "T: Deserialize<'de> + Default"))]
pub enum GTerm<T> {
    /// ℓ(A, d).
    Affine(AffineForm<T>),
    /// coeff · ℓ(A, d)², coeff ≥ 0.
    SquaredLinear { coeff: T, form: AffineForm<T> },
    /// coeff · d^power, coeff ≥ 0, power even.
    EvenPower { coeff: T, power: u32 },
    /// width · log Σ exp(ℓ_m / width), a smooth surrogate of max_m ℓ_m.
    SmoothMax { width: T, planes: Vec<AffineForm<T>> },
}

/// Value, A-gradient and d-partial of a term.
struct TermJet<T> {
    val: T,
    ga: Mat2<T>,
    gd: T,
}

impl<T: Real> GTerm<T> {
    /// Whether the term's parameters make it convex.
    pub fn is_convex(&self) -> bool {
        match self {
            GTerm::Affine(_) => true,
            GTerm::SquaredLinear { coeff, .. } => *coeff >= T::zero(),
            GTerm::EvenPower { coeff, power } => *coeff >= T::zero() && power % 2 == 0,
            GTerm::SmoothMax { width, planes } => *width > T::zero() && !planes.is_empty(),
        }
    }

    fn jet(&self, a: &Mat2<T>, d: T) -> TermJet<T> {
        match self {
            GTerm::Affine(f) => TermJet { val: f.eval(a, d), ga: Mat2 { e: f.ca }, gd: f.cd },
            GTerm::SquaredLinear { coeff, form } => {
                let l = form.eval(a, d);
                let two = lit::<T>(2.0);
                TermJet { val: *coeff * l * l, ga: Mat2 { e: form.ca } * (two * *coeff * l), gd: two * *coeff * l * form.cd }
            }
            GTerm::EvenPower { coeff, power } => {
                let p = *power as i32;
                let gd = if p == 0 { T::zero() } else { *coeff * lit::<T>(p as f64) * d.powi(p - 1) };
                TermJet { val: *coeff * d.powi(p), ga: Mat2::zero(), gd }
            }
            GTerm::SmoothMax { width, planes } => {
                let ls: Vec<T> = planes.iter().map(|f| f.eval(a, d)).collect();
                let m = ls.iter().copied().fold(T::neg_infinity(), T::max);
                let ws: Vec<T> = ls.iter().map(|l| ((*l - m) / *width).exp()).collect();
                let z = ws.iter().copied().fold(T::zero(), |s, w| s + w);
                let mut ga = Mat2::zero();
                let mut gd = T::zero();
                for (w, f) in ws.iter().zip(planes) {
                    ga += Mat2 { e: f.ca } * (*w / z);
                    gd = gd + f.cd * (*w / z);
                }
                TermJet { val: m + *width * z.ln(), ga, gd }
            }
        }
    }
}

/// F(A) = ν/2 |A|² + Σ_terms G_m(A, det A).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de> + Default"))]
pub struct PolyconvexEnergy<T> {
    pub nu: T,
    #[serde(default)]
    pub terms: Vec<GTerm<T>>,
}

/// Energy construction or validation failure.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnergyError {
    #[error("quadratic modulus must be positive, got {0}")]
    NonPositiveNu(f64),
    #[error("term {0} does not report itself convex")]
    NonConvexTerm(usize),
    #[error("midpoint convexity check failed by {0:e}")]
    MidpointViolation(f64),
}

impl<T: Real> PolyconvexEnergy<T> {
    /// Pure quadratic energy, G ≡ 0.
    pub fn quadratic(nu: T) -> Self {
        Self { nu, terms: Vec::new() }
    }

    pub fn with_terms(nu: T, terms: Vec<GTerm<T>>) -> Result<Self, EnergyError> {
        let e = Self { nu, terms };
        e.validate()?;
        Ok(e)
    }

    /// Checks ν > 0 and that every term reports itself convex.
    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(self.nu > T::zero()) {
            return Err(EnergyError::NonPositiveNu(self.nu.to_f64().unwrap_or(f64::NAN)));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if !t.is_convex() {
                return Err(EnergyError::NonConvexTerm(i));
            }
        }
        Ok(())
    }

    /// G(A, d).
    pub fn eval_g(&self, a: &Mat2<T>, d: T) -> T {
        self.terms.iter().fold(T::zero(), |s, t| s + t.jet(a, d).val)
    }

    /// (∇_A G, ∂_d G) at (A, d).
    pub fn grad_g(&self, a: &Mat2<T>, d: T) -> (Mat2<T>, T) {
        let mut ga = Mat2::zero();
        let mut gd = T::zero();
        for t in &self.terms {
            let j = t.jet(a, d);
            ga += j.ga;
            gd = gd + j.gd;
        }
        (ga, gd)
    }

    /// F(A).
    pub fn eval_f(&self, a: &Mat2<T>) -> T {
        lit::<T>(0.5) * self.nu * a.norm_sq() + self.eval_g(a, det2(a))
    }

    /// DF(A) = νA + ∇_A G + ∂_d G · cof A.
    pub fn eval_df(&self, a: &Mat2<T>) -> Mat2<T> {
        let (ga, gd) = self.grad_g(a, det2(a));
        *a * self.nu + ga + cof2(a) * gd
    }

    /// Graph residual f(A, B) = DF(A) - B.
    pub fn residual(&self, x: &StatePoint<T>) -> Mat2<T> {
        self.eval_df(&x.a) - x.b
    }

    /// Midpoint convexity of G on random segments in (A, d) with |entries| ≤ radius.
    pub fn check_convexity(&self, samples: usize, radius: f64, seed: u64) -> Result<(), EnergyError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> (Mat2<T>, T) {
            let e = [0; 4].map(|_| lit::<T>(rng.gen_range(-radius..radius)));
            (Mat2 { e }, lit::<T>(rng.gen_range(-radius..radius)))
        };
        let half = lit::<T>(0.5);
        for _ in 0..samples {
            let (a0, d0) = draw(&mut rng);
            let (a1, d1) = draw(&mut rng);
            let mid = self.eval_g(&((a0 + a1) * half), (d0 + d1) * half);
            let avg = (self.eval_g(&a0, d0) + self.eval_g(&a1, d1)) * half;
            let scale = T::one() + avg.abs();
            let defect = mid - avg;
            if defect > lit::<T>(1e-9) * scale {
                return Err(EnergyError::MidpointViolation(defect.to_f64().unwrap_or(f64::NAN)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d_squared() -> PolyconvexEnergy<f64> {
        PolyconvexEnergy::with_terms(1.0, vec![GTerm::EvenPower { coeff: 1.0, power: 2 }]).unwrap()
    }

    #[test]
    fn quadratic_values() {
        let e = PolyconvexEnergy::quadratic(1.0);
        assert_eq!(e.eval_f(&Mat2::identity()), 1.0);
        assert_eq!(e.eval_f(&Mat2::zero()), 0.0);
        let a = Mat2::new(0.3, -1.0, 2.0, 0.5);
        assert_eq!(e.eval_df(&a), a);
        let e2 = PolyconvexEnergy::quadratic(2.0);
        assert_eq!(e2.eval_df(&Mat2::new(1.0, 2.0, 3.0, 4.0)), Mat2::new(2.0, 4.0, 6.0, 8.0));
    }

    #[test]
    fn determinant_square_term() {
        let e = d_squared();
        assert_eq!(e.eval_f(&Mat2::identity()), 2.0);
        assert_eq!(e.eval_df(&Mat2::identity()), Mat2::identity() * 3.0);
    }

    #[test]
    fn residual_examples() {
        let e = PolyconvexEnergy::quadratic(1.0);
        let i = Mat2::identity();
        assert_eq!(e.residual(&StatePoint::new(i, Mat2::zero())), i);
        assert_eq!(e.residual(&StatePoint::new(Mat2::zero(), i)), -i);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(PolyconvexEnergy::<f64>::with_terms(0.0, vec![]), Err(EnergyError::NonPositiveNu(_))));
        let t = GTerm::EvenPower { coeff: 1.0, power: 3 };
        assert_eq!(PolyconvexEnergy::with_terms(1.0, vec![t]), Err(EnergyError::NonConvexTerm(0)));
    }

    #[test]
    fn json_round_trip() {
        let s = r#"{"nu": 1.5, "terms": [
            {"kind": "affine", "ca": [1, 0, 0, 1], "cd": 0.5},
            {"kind": "squared_linear", "coeff": 2.0, "form": {"ca": [0, 1, 0, 0], "cd": 1.0, "c0": -1.0}},
            {"kind": "even_power", "coeff": 0.25, "power": 4},
            {"kind": "smooth_max", "width": 0.1, "planes": [{"ca": [1, 0, 0, 0]}, {"ca": [0, 0, 0, 1], "c0": 0.2}]}
        ]}"#;
        let e: PolyconvexEnergy<f64> = serde_json::from_str(s).unwrap();
        e.check_convexity(200, 3.0, 7).unwrap();
        let back: PolyconvexEnergy<f64> = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
