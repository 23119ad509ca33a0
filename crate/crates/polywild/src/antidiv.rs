//! Explicit antidivergence operators on rectangles and space-time cubes, and the rescaling
//! operator L_{y,l} f(z) = l f((z - y)/l).
//!
//! On J = (a1,b1) × (a2,b2), row i of v = R^J u is
//! v^i_1(x) = ρ(x2) ∫_{a1}^{x1} U^i(r) dr and v^i_2(x) = ∫_{a2}^{x2} u^i(x1,s) ds - P(x2) U^i(x1),
//! where U^i(r) = ∫_{a2}^{b2} u^i(r,s) ds and P is the primitive of the profile ρ.

use crate::quadrature::GaussRule;
use crate::Mat;
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle (lo.0, hi.0) × (lo.1, hi.1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        assert!(lo[0] < hi[0] && lo[1] < hi[1], "degenerate rectangle");
        Self { lo, hi }
    }

    /// The reference square (-1, 1)^2.
    pub fn reference() -> Self {
        Self::new([-1.0, -1.0], [1.0, 1.0])
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }
}

/// The profile ρ(s) = (15/16)(1 - σ²)² · 2/(b - a) with σ the affine image of s in (-1, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    pub a: f64,
    pub b: f64,
}

impl BumpProfile {
    pub fn new(a: f64, b: f64) -> Self {
        assert!(a < b, "empty profile interval");
        Self { a, b }
    }

    fn sigma(&self, s: f64) -> f64 {
        ((2.0 * s - self.a - self.b) / (self.b - self.a)).clamp(-1.0, 1.0)
    }

    pub fn rho(&self, s: f64) -> f64 {
        let z = self.sigma(s);
        let w = 1.0 - z * z;
        15.0 / 16.0 * w * w * 2.0 / (self.b - self.a)
    }

    /// ρ'(s).
    pub fn drho(&self, s: f64) -> f64 {
        let z = self.sigma(s);
        let sc = 2.0 / (self.b - self.a);
        15.0 / 16.0 * (-4.0 * z * (1.0 - z * z)) * sc * sc
    }

    /// P(s) = ∫_a^s ρ, equal to 1 at s = b.
    pub fn primitive(&self, s: f64) -> f64 {
        let z = self.sigma(s);
        15.0 / 16.0 * (z - 2.0 * z.powi(3) / 3.0 + z.powi(5) / 5.0 + 8.0 / 15.0)
    }
}

/// Where an operator constant comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Measured,
    Asserted,
}

/// The constant C0 of the time-derivative estimate ‖∂t R u‖ ≤ C0 ‖∂t u‖.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorConstant {
    pub c0: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AntidivError {
    #[error("slice mean at t = {t} is {mean:e}, expected zero")]
    MeanNonZero { t: f64, mean: f64 },
}

/// R^J u for a vector field u on a rectangle, evaluated by composite Gauss quadrature.
pub struct RectAntidiv<F> {
    u: F,
    rect: Rect,
    profile: BumpProfile,
    rule: GaussRule,
    panels: usize,
}

/// Builds R^J u with the default rule (8 nodes, 4 panels per axis).
pub fn antidiv_rect<F: Fn([f64; 2]) -> [f64; 2]>(u: F, rect: Rect) -> RectAntidiv<F> {
    RectAntidiv::with_rule(u, rect, 8, 4)
}

impl<F: Fn([f64; 2]) -> [f64; 2]> RectAntidiv<F> {
    pub fn with_rule(u: F, rect: Rect, nodes: usize, panels: usize) -> Self {
        let profile = BumpProfile::new(rect.lo[1], rect.hi[1]);
        Self { u, rect, profile, rule: GaussRule::new(nodes), panels }
    }

    pub fn rect(&self) -> Rect {
        self.rect
    }

    /// ∫_{a2}^{hi} u(x1, s) ds.
    fn column_integral(&self, x1: f64, hi: f64) -> [f64; 2] {
        let mut s = [0.0; 2];
        let a2 = self.rect.lo[1];
        if hi <= a2 {
            return s;
        }
        for i in 0..2 {
            s[i] = self.rule.composite(a2, hi, self.panels, |y| (self.u)([x1, y])[i]);
        }
        s
    }

    /// U(r) = ∫ u(r, s) ds over the full second interval.
    pub fn total(&self, r: f64) -> [f64; 2] {
        self.column_integral(r, self.rect.hi[1])
    }

    /// v(x) with rows indexed by the component of u.
    pub fn eval(&self, x: [f64; 2]) -> Mat {
        let a1 = self.rect.lo[0];
        let mut w = [0.0; 2];
        if x[0] > a1 {
            for i in 0..2 {
                w[i] = self.rule.composite(a1, x[0], self.panels, |r| self.total(r)[i]);
            }
        }
        let part = self.column_integral(x[0], x[1]);
        let tot = self.total(x[0]);
        let rho = self.profile.rho(x[1]);
        let p = self.profile.primitive(x[1]);
        Mat::new(rho * w[0], part[0] - p * tot[0], rho * w[1], part[1] - p * tot[1])
    }

    /// Row-wise divergence of v by sixth-order central differences with step h.
    pub fn div_fd(&self, x: [f64; 2], h: f64) -> [f64; 2] {
        let c = [-1.0 / 60.0, 3.0 / 20.0, -3.0 / 4.0, 0.0, 3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0];
        let mut d = [0.0; 2];
        for (k, ck) in c.iter().enumerate() {
            if *ck == 0.0 {
                continue;
            }
            let o = (k as f64 - 3.0) * h;
            let v1 = self.eval([x[0] + o, x[1]]);
            let v2 = self.eval([x[0], x[1] + o]);
            for i in 0..2 {
                d[i] += ck * (v1.at(i, 0) + v2.at(i, 1)) / h;
            }
        }
        d
    }
}

/// Slice-wise operator R u(·, t) = R^{Q0} u(·, t) on Q = (-1,1)^2 × (-1,1).
pub struct CubeAntidiv<F, G> {
    u: F,
    dtu: G,
}

/// Builds the cube operator from u and its time derivative.
pub fn antidiv_cube<F, G>(u: F, dtu: G) -> CubeAntidiv<F, G>
where
    F: Fn([f64; 3]) -> [f64; 2],
    G: Fn([f64; 3]) -> [f64; 2],
{
    CubeAntidiv { u, dtu }
}

impl<F, G> CubeAntidiv<F, G>
where
    F: Fn([f64; 3]) -> [f64; 2],
    G: Fn([f64; 3]) -> [f64; 2],
{
    fn slice<'a, H: Fn([f64; 3]) -> [f64; 2]>(h: &'a H, t: f64) -> RectAntidiv<impl Fn([f64; 2]) -> [f64; 2] + 'a> {
        RectAntidiv::with_rule(move |x: [f64; 2]| h([x[0], x[1], t]), Rect::reference(), 8, 4)
    }

    /// Checks ∫_{Q0} u(x, t) dx = 0 at the given times.
    pub fn check_mean_zero(&self, times: &[f64], tol: f64) -> Result<(), AntidivError> {
        for &t in times {
            let s = Self::slice(&self.u, t);
            let g = GaussRule::new(8);
            for i in 0..2 {
                let mean = g.composite(-1.0, 1.0, 4, |r| s.total(r)[i]);
                if mean.abs() > tol {
                    return Err(AntidivError::MeanNonZero { t, mean });
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, z: [f64; 3]) -> Mat {
        Self::slice(&self.u, z[2]).eval([z[0], z[1]])
    }

    /// ∂t R u = R ∂t u.
    pub fn eval_dt(&self, z: [f64; 3]) -> Mat {
        Self::slice(&self.dtu, z[2]).eval([z[0], z[1]])
    }

    pub fn div_fd(&self, z: [f64; 3], h: f64) -> [f64; 2] {
        Self::slice(&self.u, z[2]).div_fd([z[0], z[1]], h)
    }
}

/// Reference coordinates ζ = (z - y)/l of a world point.
#[inline]
pub fn to_local(z: [f64; 3], y: [f64; 3], l: f64) -> [f64; 3] {
    [(z[0] - y[0]) / l, (z[1] - y[1]) / l, (z[2] - y[2]) / l]
}

/// L_{y,l} f for a field given with its gradient: returns (l f(ζ), ∇f(ζ)).
pub fn rescale<const N: usize>(
    f: impl Fn([f64; 3]) -> ([f64; N], [[f64; 3]; N]),
    y: [f64; 3],
    l: f64,
) -> impl Fn([f64; 3]) -> ([f64; N], [[f64; 3]; N]) {
    assert!(l > 0.0, "radius must be positive");
    move |z| {
        let (v, g) = f(to_local(z, y, l));
        (v.map(|x| l * x), g)
    }
}

/// g̃ = l L_{y,l}(R φ): value l² Rφ(ζ) and time derivative l ∂t Rφ(ζ).
pub struct ScaledAntidiv<F, G> {
    op: CubeAntidiv<F, G>,
    y: [f64; 3],
    l: f64,
}

pub fn antidiv_scaled<F, G>(op: CubeAntidiv<F, G>, y: [f64; 3], l: f64) -> ScaledAntidiv<F, G>
where
    F: Fn([f64; 3]) -> [f64; 2],
    G: Fn([f64; 3]) -> [f64; 2],
{
    assert!(l > 0.0, "radius must be positive");
    ScaledAntidiv { op, y, l }
}

impl<F, G> ScaledAntidiv<F, G>
where
    F: Fn([f64; 3]) -> [f64; 2],
    G: Fn([f64; 3]) -> [f64; 2],
{
    pub fn eval(&self, z: [f64; 3]) -> Mat {
        self.op.eval(to_local(z, self.y, self.l)) * (self.l * self.l)
    }

    pub fn eval_dt(&self, z: [f64; 3]) -> Mat {
        self.op.eval_dt(to_local(z, self.y, self.l)) * self.l
    }

    /// Row-wise divergence in world coordinates by finite differences.
    pub fn div_fd(&self, z: [f64; 3], h: f64) -> [f64; 2] {
        self.op.div_fd(to_local(z, self.y, self.l), h / self.l).map(|d| d * self.l)
    }
}

/// Measures C0 as the largest ‖R^{Q0} w‖∞ / ‖w‖∞ over mean-zero monomials w of degree ≤ `degree`,
/// with both sup norms sampled on an n × n midpoint grid.
pub fn measure_c0(degree: u32, n: usize) -> OperatorConstant {
    let g = GaussRule::new(8);
    let grid: Vec<[f64; 2]> =
        (0..n).flat_map(|i| (0..n).map(move |j| [-1.0 + (2 * i + 1) as f64 / n as f64, -1.0 + (2 * j + 1) as f64 / n as f64])).collect();
    let mut c0: f64 = 0.0;
    for a in 0..=degree as i32 {
        for b in 0..=(degree as i32 - a) {
            if a + b == 0 {
                continue;
            }
            let mono = |x: [f64; 2]| x[0].powi(a) * x[1].powi(b);
            let mean = 0.25 * g.integrate(-1.0, 1.0, |x| g.integrate(-1.0, 1.0, |y| mono([x, y])));
            let w = |x: [f64; 2]| [mono(x) - mean, 0.0];
            let op = RectAntidiv::with_rule(w, Rect::reference(), 8, 2);
            let mut num: f64 = 0.0;
            let mut den: f64 = 0.0;
            for x in &grid {
                num = num.max(op.eval(*x).norm());
                den = den.max(w(*x)[0].abs());
            }
            if den > 0.0 {
                c0 = c0.max(num / den);
            }
        }
    }
    OperatorConstant { c0, provenance: Provenance::Measured }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_integrates_to_one() {
        let p = BumpProfile::new(0.3, 1.7);
        let g = GaussRule::new(6);
        assert!((g.integrate(0.3, 1.7, |s| p.rho(s)) - 1.0).abs() < 1e-13);
        assert!(p.primitive(0.3).abs() < 1e-15);
        assert!((p.primitive(1.7) - 1.0).abs() < 1e-15);
        assert_eq!(p.rho(0.3), 0.0);
    }

    #[test]
    fn constant_input_closed_form() {
        let op = antidiv_rect(|_| [1.0, 0.0], Rect::new([0.0, 0.0], [1.0, 1.0]));
        let p = BumpProfile::new(0.0, 1.0);
        let x = [0.3, 0.6];
        let v = op.eval(x);
        assert!((v.at(0, 0) - p.rho(0.6) * 0.3).abs() < 1e-13);
        assert!((v.at(0, 1) - (0.6 - p.primitive(0.6))).abs() < 1e-13);
        assert_eq!(v.at(1, 0), 0.0);
        let d = op.div_fd(x, 1e-3);
        assert!((d[0] - 1.0).abs() < 1e-9 && d[1].abs() < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero() {
        let op = antidiv_rect(|_| [0.0, 0.0], Rect::reference());
        assert_eq!(op.eval([0.1, 0.2]), Mat::zero());
    }

    #[test]
    fn time_independent_input_has_zero_time_derivative() {
        let op = antidiv_cube(|z: [f64; 3]| [z[0], 0.0], |_| [0.0, 0.0]);
        op.check_mean_zero(&[-0.5, 0.5], 1e-12).unwrap();
        assert_eq!(op.eval_dt([0.2, 0.1, 0.3]), Mat::zero());
        let bad = antidiv_cube(|_: [f64; 3]| [1.0, 0.0], |_| [0.0, 0.0]);
        assert!(bad.check_mean_zero(&[0.0], 1e-8).is_err());
    }

    #[test]
    fn rescale_identity_and_gradient_transport() {
        let f = |z: [f64; 3]| ([z[0] * z[1] + z[2]], [[z[1], z[0], 1.0]]);
        let id = rescale(f, [0.0; 3], 1.0);
        assert_eq!(id([0.2, 0.3, 0.4]), f([0.2, 0.3, 0.4]));
        let y = [0.5, -0.25, 0.125];
        let r = rescale(f, y, 0.25);
        let z = [0.6, -0.2, 0.2];
        let (v, g) = r(z);
        let zl = to_local(z, y, 0.25);
        assert_eq!(v[0], 0.25 * f(zl).0[0]);
        assert_eq!(g, f(zl).1);
    }

    #[test]
    fn measured_constant_is_positive() {
        let c = measure_c0(2, 6);
        assert!(c.c0 > 0.0 && c.c0 < 10.0, "{c:?}");
        assert_eq!(c.provenance, Provenance::Measured);
    }
}
