//! Five-branch configuration bundles: fibers (ξ_i, π_i, λ_i) over a parameter ball,
//! the segment families S_i(λ), membership inversion and property certification.

use crate::chain::chain_coefficients;
use crate::energy::PolyconvexEnergy;
use crate::{Mat, State};
use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

type M8 = SMatrix<f64, 8, 8>;
type V8 = SVector<f64, 8>;

/// Default membership tolerance.
pub const MEMBERSHIP_TOL: f64 = 1e-7;
/// Graph residual below which a bundle counts as graph-certified.
pub const GRAPH_TOL: f64 = 1e-8;

/// Values of the configuration maps at one parameter point q.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T5Fiber {
    pub q: [f64; 8],
    pub xi: [State; 5],
    pub pi: [State; 5],
    pub lam: [f64; 5],
}

impl T5Fiber {
    /// Builds a fiber from ξ and λ, deriving π by the chain solve.
    pub fn from_xi(q: [f64; 8], xi: [State; 5], lam: [f64; 5]) -> Result<Self, ConfigError> {
        let nu = chain_coefficients(&lam).map_err(|e| ConfigError::LambdaDomain(e.index))?;
        let pi = [0, 1, 2, 3, 4].map(|i| (0..5).fold(State::zero(), |s, j| s + xi[j] * nu[i][j]));
        Ok(Self { q, xi, pi, lam })
    }

    /// max_i |π_{i+1} - (λ_i ξ_i + (1 - λ_i) π_i)|.
    pub fn chain_residual(&self) -> f64 {
        (0..5)
            .map(|i| (self.pi[(i + 1) % 5] - self.xi[i].lerp_to(&self.pi[i], self.lam[i])).norm())
            .fold(0.0, f64::max)
    }
}

/// λ ξ_i + (1 - λ) π_i on one fiber.
pub fn point_on_segment(fiber: &T5Fiber, i: usize, lambda: f64) -> State {
    fiber.xi[i].lerp_to(&fiber.pi[i], lambda)
}

/// Barycentric data of Y = λ ξ_i + (1 - λ) π_i over the level-μ targets X_k = μ ξ_k + (1 - μ) π_k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    /// π_k = Σ_j nu_tilde[k][j] X_j.
    pub nu_tilde: [[f64; 5]; 5],
    /// Y = Σ_k y_weights[k] X_k.
    pub y_weights: [f64; 5],
    pub targets: [State; 5],
    pub y: State,
}

impl Expansion {
    /// |Y - Σ_k y_weights[k] X_k|.
    pub fn reconstruction_defect(&self) -> f64 {
        let s = (0..5).fold(State::zero(), |s, k| s + self.targets[k] * self.y_weights[k]);
        (s - self.y).norm()
    }

    pub fn min_entry(&self) -> f64 {
        self.nu_tilde.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Expands Y ∈ S_i(λ) over the targets at level μ via the chain with t_k = λ_k / μ.
/// λ = μ is accepted and gives the unit weight vector at i.
pub fn barycentric_expand(
    lambda: f64,
    mu: f64,
    fiber: &T5Fiber,
    i: usize,
    nu1: f64,
    delta1: f64,
) -> Result<Expansion, ConfigError> {
    if !(mu < 1.0 && mu > nu1.max(delta1) && (0.0..=mu).contains(&lambda)) {
        return Err(ConfigError::Levels { lambda, mu });
    }
    let t = fiber.lam.map(|l| l / mu);
    let nu_tilde = chain_coefficients(&t).map_err(|e| ConfigError::LambdaDomain(e.index))?;
    let r = lambda / mu;
    let mut y_weights = nu_tilde[i].map(|w| (1.0 - r) * w);
    y_weights[i] += r;
    let targets = [0, 1, 2, 3, 4].map(|k| point_on_segment(fiber, k, mu));
    Ok(Expansion { nu_tilde, y_weights, targets, y: point_on_segment(fiber, i, lambda) })
}

/// Whether the ξ points are known to lie on the graph of a concrete DF.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BundleMode {
    GraphCertified,
    Synthetic,
}

/// Bundle construction or certification failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("constants must satisfy 0 < nu0 < nu1 < 1 and 0 < delta1 < 1")]
    Constants,
    #[error("beta must be finite and non-negative")]
    Beta,
    #[error("no fiber at q = 0")]
    MissingCenter,
    #[error("pi_1(0) must be (0,0), found distance {0:e}")]
    CenterNotZero(f64),
    #[error("lambda[{0}] outside (0,1)")]
    LambdaDomain(usize),
    #[error("lambda[{0}] outside (nu0, nu1)")]
    LambdaRange(usize),
    #[error("non-finite fiber data")]
    NonFinite,
    #[error("projected images of branches {0} and {1} are not separated (margin {2:e})")]
    Separation(usize, usize, f64),
    #[error("levels must satisfy max(lambda, nu1, delta1) < mu < 1, got lambda = {lambda}, mu = {mu}")]
    Levels { lambda: f64, mu: f64 },
}

/// Affine fiber model in q fitted from the sampled fibers.
#[derive(Clone, Debug)]
struct FiberModel {
    xi0: [V8; 5],
    jac: [M8; 5],
    lam0: [f64; 5],
    lam_grad: [V8; 5],
    translation: Option<f64>,
}

/// On-disk layout of a bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleFile {
    pub beta: f64,
    pub nu0: f64,
    pub nu1: f64,
    pub delta1: f64,
    pub mode: BundleMode,
    pub fibers: Vec<T5Fiber>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_residual: Option<f64>,
}

/// A configuration bundle with its fitted fiber model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "BundleFile", into = "BundleFile")]
pub struct ConfigBundle {
    pub beta: f64,
    pub nu0: f64,
    pub nu1: f64,
    pub delta1: f64,
    pub mode: BundleMode,
    pub fibers: Vec<T5Fiber>,
    pub slope: Option<f64>,
    pub graph_residual: Option<f64>,
    model: FiberModel,
}

impl TryFrom<BundleFile> for ConfigBundle {
    type Error = ConfigError;
    fn try_from(f: BundleFile) -> Result<Self, ConfigError> {
        ConfigBundle::new(f)
    }
}

impl From<ConfigBundle> for BundleFile {
    fn from(b: ConfigBundle) -> Self {
        BundleFile {
            beta: b.beta,
            nu0: b.nu0,
            nu1: b.nu1,
            delta1: b.delta1,
            mode: b.mode,
            fibers: b.fibers,
            slope: b.slope,
            graph_residual: b.graph_residual,
        }
    }
}

fn v8(s: &State) -> V8 {
    V8::from_column_slice(&s.to_array())
}

fn st(v: &V8) -> State {
    let mut a = [0.0; 8];
    a.copy_from_slice(v.as_slice());
    State::from_array(a)
}

fn qv(q: &[f64; 8]) -> V8 {
    V8::from_column_slice(q)
}

/// Result of a membership query X ∈ S_i(λ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub branch: usize,
    pub lambda: f64,
    pub q: [f64; 8],
    pub residual: f64,
}

impl ConfigBundle {
    /// Validates the structural invariants and fits the fiber model.
    pub fn new(f: BundleFile) -> Result<Self, ConfigError> {
        let ok = |x: f64| x > 0.0 && x < 1.0;
        if !(ok(f.nu0) && ok(f.nu1) && f.nu0 < f.nu1 && ok(f.delta1)) {
            return Err(ConfigError::Constants);
        }
        if !(f.beta.is_finite() && f.beta >= 0.0) {
            return Err(ConfigError::Beta);
        }
        for fb in &f.fibers {
            let fin = fb.q.iter().chain(fb.lam.iter()).all(|x| x.is_finite())
                && fb.xi.iter().chain(fb.pi.iter()).all(|s| s.is_finite());
            if !fin {
                return Err(ConfigError::NonFinite);
            }
            if let Some(i) = fb.lam.iter().position(|l| !(*l > 0.0 && *l < 1.0)) {
                return Err(ConfigError::LambdaDomain(i));
            }
        }
        let center = f.fibers.iter().find(|fb| fb.q.iter().all(|x| *x == 0.0)).ok_or(ConfigError::MissingCenter)?;
        let c0 = center.pi[0].norm();
        if c0 > 1e-12 {
            return Err(ConfigError::CenterNotZero(c0));
        }
        let model = fit_model(&f.fibers, center, f.slope);
        Ok(Self {
            beta: f.beta,
            nu0: f.nu0,
            nu1: f.nu1,
            delta1: f.delta1,
            mode: f.mode,
            fibers: f.fibers,
            slope: f.slope,
            graph_residual: f.graph_residual,
            model,
        })
    }

    /// The fiber at q = 0.
    pub fn center(&self) -> &T5Fiber {
        self.fibers.iter().find(|fb| fb.q.iter().all(|x| *x == 0.0)).expect("validated")
    }

    /// Fiber values at an arbitrary parameter point, with π derived by the chain.
    pub fn fiber(&self, q: &[f64; 8]) -> T5Fiber {
        let m = &self.model;
        let qq = qv(q);
        let xi = [0, 1, 2, 3, 4].map(|i| st(&(m.xi0[i] + m.jac[i] * qq)));
        let lam = [0, 1, 2, 3, 4].map(|i| (m.lam0[i] + m.lam_grad[i].dot(&qq)).clamp(1e-12, 1.0 - 1e-12));
        T5Fiber::from_xi(*q, xi, lam).expect("clamped lambda")
    }

    /// Common translation slope c when ξ_i(q) = ξ_i(0) + c q and λ is constant.
    pub fn translation_slope(&self) -> Option<f64> {
        self.model.translation
    }

    /// Radius of the ball in R^8 contained in every S_k(λ) around its q = 0 point.
    pub fn tube_radius(&self) -> f64 {
        if let Some(c) = self.model.translation {
            return c.abs() * self.beta;
        }
        let mut r = f64::INFINITY;
        for k in 0..5 {
            for lam in [0.0, 0.5, 1.0] {
                let m = self.segment_jacobian(k, lam);
                let s = m.singular_values().min();
                r = r.min(s * self.beta);
            }
        }
        r
    }

    /// ∂/∂q of λ ξ_k(q) + (1 - λ) π_k(q) at q = 0 for constant λ.
    fn segment_jacobian(&self, k: usize, lam: f64) -> M8 {
        let m = &self.model;
        let nu = chain_coefficients(&m.lam0).expect("valid lambda");
        let mut pj = M8::zeros();
        for j in 0..5 {
            pj += m.jac[j] * nu[k][j];
        }
        m.jac[k] * lam + pj * (1.0 - lam)
    }

    /// Maximum graph residual |DF(A_i) - B_i| over the sampled fibers.
    pub fn graph_residual_of(&self, e: &PolyconvexEnergy<f64>) -> f64 {
        self.fibers
            .iter()
            .flat_map(|fb| fb.xi.iter().map(|x| e.residual(x).norm()))
            .fold(0.0, f64::max)
    }

    /// Diameter estimate of all sampled ξ and π points.
    pub fn diameter(&self) -> f64 {
        let pts: Vec<State> = self.fibers.iter().flat_map(|f| f.xi.iter().chain(f.pi.iter()).copied()).collect();
        let mut d: f64 = 0.0;
        for a in &pts {
            for b in &pts {
                d = d.max((*a - *b).norm());
            }
        }
        d
    }

    /// Best membership of X in some S_i(λ) with λ ≤ lambda_max.
    ///
    /// Smallest residual wins; residuals within 1e-10 tie and are resolved by smaller λ, then smaller i.
    pub fn locate(&self, x: &State, lambda_max: f64) -> Option<Membership> {
        let mut best: Option<Membership> = None;
        for i in 0..5 {
            if let Some(m) = self.locate_branch(x, i, lambda_max) {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        if (m.residual - b.residual).abs() > 1e-10 {
                            m.residual < b.residual
                        } else {
                            m.lambda < b.lambda - 1e-12
                        }
                    }
                };
                if better {
                    best = Some(m);
                }
            }
        }
        best
    }

    /// Membership in branch i with λ ≤ lambda_max, or none if the defect exceeds the tolerance.
    pub fn locate_branch(&self, x: &State, i: usize, lambda_max: f64) -> Option<Membership> {
        let xv = v8(x);
        if let Some(m) = self.translation_membership(&xv, i, None, lambda_max) {
            return m;
        }
        let mut starts: Vec<(f64, [f64; 8])> = self
            .fibers
            .iter()
            .map(|fb| {
                let (lam, r) = project_on_segment(&v8(&fb.xi[i]), &v8(&fb.pi[i]), &xv, lambda_max);
                (r + 0.0 * lam, fb.q)
            })
            .collect();
        starts.sort_by(|a, b| a.0.total_cmp(&b.0));
        starts.truncate(8);
        let mut best: Option<Membership> = None;
        for (_, q0) in starts {
            let m = self.invert_branch(&xv, i, lambda_max, q0);
            if best.as_ref().map_or(true, |b| m.residual < b.residual) {
                best = Some(m);
            }
        }
        best.filter(|m| m.residual <= MEMBERSHIP_TOL)
    }

    /// Membership in S_i(λ) at a fixed level.
    pub fn locate_at_level(&self, x: &State, i: usize, lambda: f64) -> Option<Membership> {
        let xv = v8(x);
        if let Some(m) = self.translation_membership(&xv, i, Some(lambda), lambda) {
            return m;
        }
        let mut best: Option<Membership> = None;
        for fb in &self.fibers {
            let q = self.solve_q(&xv, i, lambda, fb.q);
            let r = (self.segment_point(i, lambda, &q) - xv).norm();
            if best.as_ref().map_or(true, |b| r < b.residual) {
                best = Some(Membership { branch: i, lambda, q, residual: r });
            }
        }
        best.filter(|m| m.residual <= MEMBERSHIP_TOL)
    }

    /// Closed-form membership for translation families, where S_i(λ) is a ball of radius cβ
    /// around the segment point at q = 0. Returns `None` when the model is not a translation.
    fn translation_membership(&self, x: &V8, i: usize, level: Option<f64>, lambda_max: f64) -> Option<Option<Membership>> {
        let c = self.model.translation.filter(|c| *c != 0.0)?;
        let xi = self.model.xi0[i];
        let pi = v8(&self.center().pi[i]);
        let lam = match level {
            Some(l) => l,
            None => project_on_segment(&xi, &pi, x, lambda_max).0,
        };
        let d = x - (xi * lam + pi * (1.0 - lam));
        let r = self.beta * c.abs();
        let dist = d.norm();
        let m = if dist <= r {
            let mut q = [0.0; 8];
            q.copy_from_slice((d / c).as_slice());
            Membership { branch: i, lambda: lam, q, residual: 0.0 }
        } else {
            Membership { branch: i, lambda: lam, q: [0.0; 8], residual: dist - r }
        };
        Some((m.residual <= MEMBERSHIP_TOL).then_some(m))
    }

    fn segment_point(&self, i: usize, lambda: f64, q: &[f64; 8]) -> V8 {
        let fb = self.fiber(q);
        v8(&point_on_segment(&fb, i, lambda))
    }

    /// Alternates a λ projection on the current fiber with a Gauss–Newton solve for q.
    fn invert_branch(&self, x: &V8, i: usize, lambda_max: f64, q0: [f64; 8]) -> Membership {
        let mut q = q0;
        let mut lam = 0.0;
        for _ in 0..50 {
            let fb = self.fiber(&q);
            let (l, _) = project_on_segment(&v8(&fb.xi[i]), &v8(&fb.pi[i]), x, lambda_max);
            let qn = self.solve_q(x, i, l, q);
            let dl = (l - lam).abs();
            let dq = (qv(&qn) - qv(&q)).norm();
            lam = l;
            q = qn;
            if dl < 1e-15 && dq < 1e-15 {
                break;
            }
        }
        let r = (self.segment_point(i, lam, &q) - x).norm();
        Membership { branch: i, lambda: lam, q, residual: r }
    }

    /// Damped Gauss–Newton for q at fixed (i, λ), kept inside the closed ball of radius β.
    fn solve_q(&self, x: &V8, i: usize, lambda: f64, q0: [f64; 8]) -> [f64; 8] {
        if self.beta == 0.0 {
            return [0.0; 8];
        }
        let mut q = qv(&q0);
        let arr = |v: &V8| -> [f64; 8] {
            let mut a = [0.0; 8];
            a.copy_from_slice(v.as_slice());
            a
        };
        let f = |q: &V8| self.segment_point(i, lambda, &arr(q)) - x;
        let mut r = f(&q);
        for _ in 0..50 {
            if r.norm() < 1e-15 {
                break;
            }
            let h = 1e-7;
            let mut jm = M8::zeros();
            for c in 0..8 {
                let mut qp = q;
                qp[c] += h;
                let mut qm = q;
                qm[c] -= h;
                jm.set_column(c, &((f(&qp) - f(&qm)) / (2.0 * h)));
            }
            let jt = jm.transpose();
            let damp = 1e-12 * (1.0 + (jt * jm).trace());
            let step = match (jt * jm + M8::identity() * damp).lu().solve(&(jt * r)) {
                Some(s) => s,
                None => break,
            };
            let mut qn = q - step;
            let nrm = qn.norm();
            if nrm > self.beta {
                qn *= self.beta / nrm;
            }
            let rn = f(&qn);
            if rn.norm() >= r.norm() {
                break;
            }
            q = qn;
            r = rn;
        }
        arr(&q)
    }
}

/// Orthogonal projection of x onto the segment λ ξ + (1 - λ) π, λ ∈ [0, lambda_max].
fn project_on_segment(xi: &V8, pi: &V8, x: &V8, lambda_max: f64) -> (f64, f64) {
    let d = xi - pi;
    let dd = d.norm_squared();
    let lam = if dd > 0.0 { ((x - pi).dot(&d) / dd).clamp(0.0, lambda_max.clamp(0.0, 1.0)) } else { 0.0 };
    (lam, (pi + d * lam - x).norm())
}

fn fit_model(fibers: &[T5Fiber], center: &T5Fiber, slope: Option<f64>) -> FiberModel {
    let xi0 = center.xi.map(|s| v8(&s));
    if fibers.len() == 1 {
        let c = slope.unwrap_or(0.0);
        return FiberModel {
            xi0,
            jac: [M8::identity() * c; 5],
            lam0: center.lam,
            lam_grad: [V8::zeros(); 5],
            translation: Some(c),
        };
    }
    // Affine least squares with minimum-norm solution: rows [1, q_s].
    let n = fibers.len();
    let mut design = DMatrix::<f64>::zeros(n, 9);
    for (s, fb) in fibers.iter().enumerate() {
        design[(s, 0)] = 1.0;
        for c in 0..8 {
            design[(s, c + 1)] = fb.q[c];
        }
    }
    let svd = design.clone().svd(true, true);
    let solve = |y: DVector<f64>| -> DVector<f64> { svd.solve(&y, 1e-12).expect("svd solve") };
    let mut jac = [M8::zeros(); 5];
    let mut lam_grad = [V8::zeros(); 5];
    let mut lam0 = center.lam;
    for i in 0..5 {
        for comp in 0..8 {
            let y = DVector::from_iterator(n, fibers.iter().map(|fb| fb.xi[i].to_array()[comp]));
            let coef = solve(y);
            for c in 0..8 {
                jac[i][(comp, c)] = coef[c + 1];
            }
        }
        let y = DVector::from_iterator(n, fibers.iter().map(|fb| fb.lam[i]));
        let coef = solve(y);
        lam0[i] = center.lam[i];
        for c in 0..8 {
            lam_grad[i][c] = coef[c + 1];
        }
    }
    let translation = {
        let c = jac[0][(0, 0)];
        let uniform = jac.iter().all(|j| (j - M8::identity() * c).abs().max() < 1e-12);
        let flat = lam_grad.iter().all(|g| g.abs().max() < 1e-12);
        (uniform && flat).then_some(c)
    };
    FiberModel { xi0, jac, lam0, lam_grad, translation }
}

/// Certification record for (P1)–(P3).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    /// (P2): max chain residual over sampled and random fibers.
    pub chain_residual: f64,
    /// (P2): every λ_i strictly inside (ν0, ν1).
    pub lambda_range_ok: bool,
    /// (P1): minimum distance between projected ξ images.
    pub xi_margin: f64,
    /// (P1): minimum distance between projected π images.
    pub pi_margin: f64,
    /// (P3)(a): minimum distance between the sets S_i(0).
    pub level0_margin: f64,
    /// (P3)(c): minimum distance between the sets S_i(λ) over sampled λ ∈ [δ1, 1).
    pub upper_margin: f64,
    /// (P3)(b): certified interior radius used by the openness proxy.
    pub openness_radius: f64,
    pub openness_ok: bool,
    pub pass: bool,
}

/// Distance between the images of two maps over the closed ball of radius β.
fn set_distance(b: &ConfigBundle, k: usize, l: usize, lam: f64, projected: bool) -> f64 {
    let pick = |v: V8| -> Vec<f64> {
        if projected {
            v.as_slice()[..4].to_vec()
        } else {
            v.as_slice().to_vec()
        }
    };
    let pt = |i: usize, q: &[f64; 8]| pick(b.segment_point(i, lam, q));
    let dist = |u: &[f64], w: &[f64]| u.iter().zip(w).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
    let z = [0.0; 8];
    if let Some(c) = b.translation_slope() {
        let r = c.abs() * b.beta;
        return (dist(&pt(k, &z), &pt(l, &z)) - 2.0 * r).max(0.0);
    }
    if b.beta == 0.0 {
        return dist(&pt(k, &z), &pt(l, &z));
    }
    // Projected gradient descent on |f_k(q1) - f_l(q2)|² over the product of balls.
    let mut q1 = [0.0; 8];
    let mut q2 = [0.0; 8];
    let jac = |i: usize, q: &[f64; 8]| -> Vec<Vec<f64>> {
        let h = 1e-7;
        (0..8)
            .map(|c| {
                let mut qp = *q;
                qp[c] += h;
                let mut qm = *q;
                qm[c] -= h;
                pt(i, &qp).iter().zip(pt(i, &qm)).map(|(a, m)| (a - m) / (2.0 * h)).collect()
            })
            .collect()
    };
    let j1 = jac(k, &q1);
    let j2 = jac(l, &q2);
    let fro = |j: &Vec<Vec<f64>>| j.iter().flatten().map(|x| x * x).sum::<f64>();
    let step = 0.5 / (fro(&j1) + fro(&j2) + 1e-300);
    let proj = |q: &mut [f64; 8]| {
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > b.beta {
            q.iter_mut().for_each(|x| *x *= b.beta / n);
        }
    };
    let mut best = f64::INFINITY;
    for _ in 0..400 {
        let diff: Vec<f64> = pt(k, &q1).iter().zip(pt(l, &q2)).map(|(a, c)| a - c).collect();
        best = best.min(diff.iter().map(|x| x * x).sum::<f64>().sqrt());
        let j1 = jac(k, &q1);
        let j2 = jac(l, &q2);
        for c in 0..8 {
            let g1: f64 = j1[c].iter().zip(&diff).map(|(a, d)| a * d).sum();
            let g2: f64 = j2[c].iter().zip(&diff).map(|(a, d)| a * d).sum();
            q1[c] -= 2.0 * step * g1;
            q2[c] += 2.0 * step * g2;
        }
        proj(&mut q1);
        proj(&mut q2);
    }
    best
}

fn min_pair_distance(b: &ConfigBundle, lam: f64, projected: bool) -> (f64, usize, usize) {
    let mut best = (f64::INFINITY, 0, 0);
    for k in 0..5 {
        for l in (k + 1)..5 {
            let d = set_distance(b, k, l, lam, projected);
            if d < best.0 {
                best = (d, k, l);
            }
        }
    }
    best
}

/// Numerical certification of (P1)–(P3) on sampled fibers and levels.
pub fn verify_properties(b: &ConfigBundle, samples: usize) -> PropertyReport {
    let samples = samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut chain_residual: f64 = 0.0;
    let mut lambda_range_ok = true;
    let mut check = |fb: &T5Fiber| {
        chain_residual = chain_residual.max(fb.chain_residual());
        lambda_range_ok &= fb.lam.iter().all(|l| *l > b.nu0 && *l < b.nu1);
    };
    for fb in &b.fibers {
        check(fb);
    }
    for _ in 0..samples {
        let q = random_in_ball(&mut rng, b.beta);
        check(&b.fiber(&q));
    }
    let xi_margin = min_pair_distance(b, 1.0, true).0;
    let pi_margin = min_pair_distance(b, 0.0, true).0;
    let level0_margin = min_pair_distance(b, 0.0, false).0;
    let mut upper_margin = f64::INFINITY;
    for s in 0..samples {
        let lam = b.delta1 + (1.0 - b.delta1) * (s as f64) / (samples as f64);
        upper_margin = upper_margin.min(min_pair_distance(b, lam, false).0);
    }
    let openness_radius = 0.5 * b.tube_radius();
    let mut openness_ok = openness_radius > 0.0;
    if openness_ok {
        let z = [0.0; 8];
        'outer: for k in 0..5 {
            for s in 0..samples.min(8) {
                let lam = (s as f64 + 0.5) / (samples.min(8) as f64) * 0.9;
                let centre = st(&b.segment_point(k, lam, &z));
                for _ in 0..8 {
                    let mut u = [0.0; 8];
                    u.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
                    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let p = centre + State::from_array(u.map(|x| x * openness_radius / n));
                    if b.locate(&p, 1.0).is_none() {
                        openness_ok = false;
                        break 'outer;
                    }
                }
            }
        }
    }
    let tiny = 1e-12;
    let pass = chain_residual <= 1e-9
        && lambda_range_ok
        && xi_margin > tiny
        && pi_margin > tiny
        && level0_margin > tiny
        && upper_margin > tiny
        && openness_ok;
    PropertyReport {
        chain_residual,
        lambda_range_ok,
        xi_margin,
        pi_margin,
        level0_margin,
        upper_margin,
        openness_radius,
        openness_ok,
        pass,
    }
}

fn random_in_ball(rng: &mut ChaCha8Rng, beta: f64) -> [f64; 8] {
    if beta == 0.0 {
        return [0.0; 8];
    }
    loop {
        let q = [0; 8].map(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if n < 1.0 {
            return q.map(|x| x * beta * 0.999);
        }
    }
}

/// Minimum distance between the projected closures of ξ images, the wildness constant δ.
pub fn separation_delta(b: &ConfigBundle) -> Result<f64, ConfigError> {
    let (d, k, l) = min_pair_distance(b, 1.0, true);
    if d <= 1e-12 {
        return Err(ConfigError::Separation(k, l, d));
    }
    Ok(d)
}

/// Single-fiber synthetic bundle with ξ_i = X_i, π_i from the chain and translation slope `slope`.
pub fn make_synthetic(
    x: [State; 5],
    lam: [f64; 5],
    beta: f64,
    slope: f64,
    constants: (f64, f64, f64),
) -> Result<ConfigBundle, ConfigError> {
    let (nu0, nu1, delta1) = constants;
    if let Some(i) = lam.iter().position(|l| !(*l > nu0 && *l < nu1)) {
        return Err(ConfigError::LambdaRange(i));
    }
    let mut fiber = T5Fiber::from_xi([0.0; 8], x, lam)?;
    // The chain solve leaves rounding noise at π_1; the first base point is pinned to the origin.
    let shift = fiber.pi[0];
    if shift.norm() > 1e-12 * (1.0 + x.iter().map(|s| s.norm()).fold(0.0, f64::max)) {
        return Err(ConfigError::CenterNotZero(shift.norm()));
    }
    fiber.pi[0] = State::zero();
    let b = ConfigBundle::new(BundleFile {
        beta,
        nu0,
        nu1,
        delta1,
        mode: BundleMode::Synthetic,
        fibers: vec![fiber],
        slope: Some(slope),
        graph_residual: None,
    })?;
    let (d, k, l) = min_pair_distance(&b, 1.0, true);
    if d <= 1e-12 {
        return Err(ConfigError::Separation(k, l, d));
    }
    let (d, k, l) = min_pair_distance(&b, 0.0, true);
    if d <= 1e-12 {
        return Err(ConfigError::Separation(k, l, d));
    }
    Ok(b)
}

/// Five T5 points whose chain closes through the origin: ξ_k = π_k + (π_{k+1} - π_k)/λ_k
/// for prescribed base points π with π_0 = 0.
pub fn xi_from_base_points(pi: [State; 5], lam: [f64; 5]) -> [State; 5] {
    [0, 1, 2, 3, 4].map(|k| pi[k] + (pi[(k + 1) % 5] - pi[k]) * (1.0 / lam[k]))
}

/// Demonstration bundle: a pentagon of base points in the first column of A, with flux edges of
/// size `flux` in the second column of B, so that every chain edge has the form (a ⊗ e1, b ⊗ e2).
pub fn pentagon_bundle(nu0: f64, nu1: f64, delta1: f64) -> ConfigBundle {
    pentagon_bundle_with(nu0, nu1, delta1, 0.5, 1e-9, 0.1, 1.0)
}

/// Pentagon bundle with explicit level, flux size, ball radius and slope.
pub fn pentagon_bundle_with(
    nu0: f64,
    nu1: f64,
    delta1: f64,
    lam: f64,
    flux: f64,
    beta: f64,
    slope: f64,
) -> ConfigBundle {
    use std::f64::consts::PI;
    let vert = |k: usize| {
        let a = 2.0 * PI * k as f64 / 5.0;
        [a.cos() - 1.0, a.sin()]
    };
    let pi = [0, 1, 2, 3, 4].map(|k| {
        let p = vert(k);
        let mut a = Mat::zero();
        a.set(0, 0, p[0]);
        a.set(1, 0, p[1]);
        let mut b = Mat::zero();
        b.set(0, 1, -flux * p[1]);
        b.set(1, 1, flux * p[0]);
        State::new(a, b)
    });
    let lam5 = [lam; 5];
    let xi = xi_from_base_points(pi, lam5);
    make_synthetic(xi, lam5, beta, slope, (nu0, nu1, delta1)).expect("pentagon bundle is valid")
}

/// Outcome of a configuration search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub iterations: usize,
    pub mode: BundleMode,
}

/// Levenberg–Marquardt refinement of the gradient slots A_i so that DF(A_i) = B_i,
/// with hinge penalties keeping the projected separation above `margin_min`.
pub fn search_config(
    e: &PolyconvexEnergy<f64>,
    seed: &ConfigBundle,
    iters: usize,
    margin_min: f64,
) -> (ConfigBundle, SearchOutcome) {
    let initial = seed.graph_residual_of(e);
    if initial <= GRAPH_TOL {
        let mut out = seed.clone();
        out.mode = BundleMode::GraphCertified;
        out.graph_residual = Some(initial);
        let mode = out.mode;
        return (out, SearchOutcome { initial_residual: initial, final_residual: initial, iterations: 0, mode });
    }
    let radius = seed.tube_radius();
    let mut fibers = seed.fibers.clone();
    let mut used = 0;
    for fb in fibers.iter_mut() {
        let bs = fb.xi.map(|s| s.b);
        let mut z: Vec<f64> = fb.xi.iter().flat_map(|s| s.a.e).collect();
        let resid = |z: &[f64]| -> Vec<f64> {
            let a = |i: usize| Mat { e: [z[4 * i], z[4 * i + 1], z[4 * i + 2], z[4 * i + 3]] };
            let mut r = Vec::with_capacity(30);
            for i in 0..5 {
                r.extend((e.eval_df(&a(i)) - bs[i]).e);
            }
            for i in 0..5 {
                for j in (i + 1)..5 {
                    let gap = (a(i) - a(j)).norm() - 2.0 * radius;
                    r.push(10.0 * (margin_min - gap).max(0.0));
                }
            }
            r
        };
        let mut mu = 1e-3;
        let mut r = resid(&z);
        let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
        for it in 0..iters {
            used = used.max(it + 1);
            if cost(&r).sqrt() <= 1e-14 {
                break;
            }
            let n = z.len();
            let m = r.len();
            let mut jm = DMatrix::<f64>::zeros(m, n);
            for c in 0..n {
                let h = 1e-7 * (1.0 + z[c].abs());
                let mut zp = z.clone();
                zp[c] += h;
                let mut zm = z.clone();
                zm[c] -= h;
                let (rp, rm) = (resid(&zp), resid(&zm));
                for row in 0..m {
                    jm[(row, c)] = (rp[row] - rm[row]) / (2.0 * h);
                }
            }
            let rv = DVector::from_column_slice(&r);
            let jt = jm.transpose();
            let lhs = &jt * &jm + DMatrix::<f64>::identity(n, n) * mu;
            let Some(step) = lhs.lu().solve(&(&jt * &rv)) else { break };
            let zn: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
            let rn = resid(&zn);
            if cost(&rn) < cost(&r) {
                z = zn;
                r = rn;
                mu = (mu * 0.3).max(1e-15);
            } else {
                mu *= 10.0;
            }
        }
        let xi = [0, 1, 2, 3, 4].map(|i| State::new(Mat { e: [z[4 * i], z[4 * i + 1], z[4 * i + 2], z[4 * i + 3]] }, bs[i]));
        if let Ok(nf) = T5Fiber::from_xi(fb.q, xi, fb.lam) {
            *fb = nf;
        }
    }
    // Graph points need not close through the origin; the fibers are translated so that π_1(0) = 0,
    // which moves B_i as well, so the residual is re-evaluated afterwards.
    let center_shift = fibers.iter().find(|f| f.q.iter().all(|x| *x == 0.0)).map(|f| f.pi[0]).unwrap_or(State::zero());
    for fb in fibers.iter_mut() {
        for s in fb.xi.iter_mut().chain(fb.pi.iter_mut()) {
            *s = *s - center_shift;
        }
    }
    if let Some(c) = fibers.iter_mut().find(|f| f.q.iter().all(|x| *x == 0.0)) {
        c.pi[0] = State::zero();
    }
    let trial = BundleFile {
        beta: seed.beta,
        nu0: seed.nu0,
        nu1: seed.nu1,
        delta1: seed.delta1,
        mode: BundleMode::Synthetic,
        fibers,
        slope: seed.slope,
        graph_residual: None,
    };
    let mut out = ConfigBundle::new(trial).unwrap_or_else(|_| seed.clone());
    let fin = out.graph_residual_of(e);
    out.mode = if fin <= GRAPH_TOL { BundleMode::GraphCertified } else { BundleMode::Synthetic };
    out.graph_residual = Some(fin);
    let outcome = SearchOutcome { initial_residual: initial, final_residual: fin, iterations: used, mode: out.mode };
    (out, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pentagon_bundle_certifies() {
        let b = pentagon_bundle(0.1, 0.6, 0.6);
        let rep = verify_properties(&b, 8);
        assert!(rep.pass, "{rep:?}");
        assert!(separation_delta(&b).unwrap() > 0.5);
    }

    #[test]
    fn locate_round_trip_on_center_fiber() {
        let b = pentagon_bundle(0.1, 0.6, 0.6);
        let x = point_on_segment(b.center(), 3, 0.4);
        let m = b.locate(&x, 1.0).unwrap();
        assert_eq!(m.branch, 3);
        assert!((m.lambda - 0.4).abs() < 1e-9);
        for i in 0..5 {
            let m = b.locate(&b.center().pi[i], 1.0).unwrap();
            assert_eq!(m.branch, i);
            assert!(m.lambda.abs() < 1e-9);
        }
        let far = State::from_array([100.0 * b.diameter(); 8]);
        assert!(b.locate(&far, 1.0).is_none());
    }

    #[test]
    fn expansion_reconstructs_and_bounds() {
        let b = pentagon_bundle(0.1, 0.6, 0.6);
        let fb = b.center();
        let e = barycentric_expand(0.3, 0.9, fb, 2, 0.6, 0.6).unwrap();
        assert!(e.reconstruction_defect() < 1e-12);
        assert!((e.y_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.min_entry() > 0.3f64.powi(4) * 0.1);
        let u = barycentric_expand(0.9, 0.9, fb, 4, 0.6, 0.6).unwrap();
        assert_eq!(u.y_weights[4], 1.0);
        assert!(matches!(barycentric_expand(0.3, 0.55, fb, 0, 0.6, 0.6), Err(ConfigError::Levels { .. })));
    }

    #[test]
    fn json_round_trip_keeps_model() {
        let b = pentagon_bundle(0.1, 0.6, 0.6);
        let s = serde_json::to_string(&b).unwrap();
        let c: ConfigBundle = serde_json::from_str(&s).unwrap();
        assert_eq!(c.translation_slope(), Some(1.0));
        assert_eq!(c.fibers, b.fibers);
    }
}
