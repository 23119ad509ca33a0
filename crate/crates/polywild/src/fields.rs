//! Piecewise-C¹ space-time fields (u, v) on dyadic cube partitions.
//!
//! A field is a base field on the domain box plus a set of disjoint top-level cubes, each
//! carrying an atom. A patch atom is a rescaled laminate whose target regions may in turn
//! carry child patches, shared by every tile of the region. Points are addressed by a
//! [`Probe`], one local coordinate per nesting depth, because tiles of the third generation
//! are far below the f64 resolution of world coordinates.

use crate::antidiv::{Rect, RectAntidiv};
use crate::oscillate::{Jet, Oscillation, OscillationCertificate, TableNode};
use crate::quadrature::{GaussRule, Quadrature};
use crate::{Mat, State};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// Q_{y,l} = y + l (-1,1)^3 with coordinates (x1, x2, t).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Cube {
    pub fn new(center: [f64; 3], radius: f64) -> Result<Self, FieldError> {
        if !(radius > 0.0 && radius.is_finite()) || center.iter().any(|c| !c.is_finite()) {
            return Err(FieldError::BadCube);
        }
        Ok(Self { center, radius })
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.radius).powi(3)
    }

    /// Open-cube membership.
    pub fn contains(&self, z: [f64; 3]) -> bool {
        (0..3).all(|k| (z[k] - self.center[k]).abs() < self.radius)
    }

    pub fn to_local(&self, z: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| (z[k] - self.center[k]) / self.radius)
    }

    pub fn to_world(&self, z: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.center[k] + self.radius * z[k])
    }

    pub fn lo(&self) -> [f64; 3] {
        self.center.map(|c| c - self.radius)
    }

    pub fn hi(&self) -> [f64; 3] {
        self.center.map(|c| c + self.radius)
    }

    /// Whether the closures overlap in a set of positive measure.
    pub fn overlaps(&self, o: &Cube) -> bool {
        (0..3).all(|k| (self.center[k] - o.center[k]).abs() < self.radius + o.radius)
    }

    /// Whether the closure lies in the closed box [lo, hi].
    pub fn inside_box(&self, lo: [f64; 3], hi: [f64; 3]) -> bool {
        (0..3).all(|k| self.lo()[k] >= lo[k] && self.hi()[k] <= hi[k])
    }

    /// The eight children of a dyadic bisection.
    pub fn children(&self) -> [Cube; 8] {
        let r = 0.5 * self.radius;
        [0, 1, 2, 3, 4, 5, 6, 7].map(|m| {
            let s = |b: usize| if m >> b & 1 == 1 { r } else { -r };
            Cube { center: [self.center[0] + s(0), self.center[1] + s(1), self.center[2] + s(2)], radius: r }
        })
    }

    /// A 5x5 grid on each of the six faces.
    pub fn face_points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        let g = [-0.8, -0.4, 0.0, 0.4, 0.8];
        for ax in 0..3 {
            for side in [-1.0, 1.0] {
                for a in g {
                    for b in g {
                        let mut z = [a, b, a];
                        let (p, q) = ((ax + 1) % 3, (ax + 2) % 3);
                        z[p] = a;
                        z[q] = b;
                        z[ax] = side;
                        out.push(self.to_world(z));
                    }
                }
            }
        }
        out
    }
}

/// Ω_T = (lo_1, hi_1) x (lo_2, hi_2) x (0, T).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl DomainBox {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self, FieldError> {
        if (0..3).any(|k| !(hi[k] > lo[k]) || !lo[k].is_finite() || !hi[k].is_finite()) {
            return Err(FieldError::BadDomain);
        }
        Ok(Self { lo, hi })
    }

    /// (0,1)^2 x (0,1).
    pub fn unit() -> Self {
        Self { lo: [0.0; 3], hi: [1.0; 3] }
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|k| self.hi[k] - self.lo[k]).product()
    }

    pub fn contains(&self, z: [f64; 3]) -> bool {
        (0..3).all(|k| z[k] > self.lo[k] && z[k] < self.hi[k])
    }

    pub fn rect(&self) -> Rect {
        Rect::new([self.lo[0], self.lo[1]], [self.hi[0], self.hi[1]])
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("cube needs a positive finite radius and a finite centre")]
    BadCube,
    #[error("domain box must have hi > lo on every axis")]
    BadDomain,
    #[error("point {0:?} is outside the domain")]
    OutOfDomain([f64; 3]),
    #[error("cube overlaps leaf {0}")]
    Overlap(usize),
    #[error("cube is not inside the domain")]
    CubeOutside,
    #[error("cube side {0} is not a power of two aligned to the dyadic grid")]
    NotDyadic(f64),
    #[error("atom trace jumps by {0:e} across the cube boundary")]
    Boundary(f64),
    #[error("patch certified for radius {certified}, attached at {radius}")]
    Scale { certified: f64, radius: f64 },
    #[error("fields live on different domains")]
    Domain,
    #[error("covering residual {achieved:e} exceeds the budget {budget:e} at depth {depth}")]
    Cover { achieved: f64, budget: f64, depth: u32 },
    #[error("shaving cannot meet the bound {0:e} within the depth limit")]
    Shave(f64),
    #[error("radius bound and residual budget must be positive")]
    CoverParams,
    #[error("structural integrals need a constant-state base under the leaves")]
    NonConstantBase,
    #[error("io: {0}")]
    Io(String),
}

/// Values and first derivatives of (u, v) at one point.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Sample {
    pub u: [f64; 2],
    pub du: Mat,
    pub dtu: [f64; 2],
    pub v: Mat,
    pub div_v: [f64; 2],
    pub dtv: Mat,
}

impl Sample {
    pub fn state(&self) -> State {
        State::new(self.du, self.dtv)
    }

    fn add(&mut self, o: &Sample) {
        for i in 0..2 {
            self.u[i] += o.u[i];
            self.dtu[i] += o.dtu[i];
            self.div_v[i] += o.div_v[i];
        }
        self.du += o.du;
        self.v += o.v;
        self.dtv += o.dtv;
    }

    /// Largest absolute entry of u - div v.
    pub fn div_defect(&self) -> f64 {
        (self.u[0] - self.div_v[0]).abs().max((self.u[1] - self.div_v[1]).abs())
    }
}

/// amp · Π_k (1 - ζ_k²)² on the reference cube, in the u-component only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyBump {
    pub amp: [f64; 2],
}

impl PolyBump {
    fn eval(&self, z: [f64; 3], l: f64) -> Sample {
        if z.iter().any(|x| x.abs() >= 1.0) {
            return Sample::default();
        }
        let p = z.map(|x| (1.0 - x * x).powi(2));
        let dp = z.map(|x| -4.0 * x * (1.0 - x * x));
        let val = p[0] * p[1] * p[2];
        let grad = [dp[0] * p[1] * p[2], p[0] * dp[1] * p[2], p[0] * p[1] * dp[2]].map(|g| g / l);
        let mut s = Sample::default();
        for i in 0..2 {
            s.u[i] = self.amp[i] * val;
            s.du.set(i, 0, self.amp[i] * grad[0]);
            s.du.set(i, 1, self.amp[i] * grad[1]);
            s.dtu[i] = self.amp[i] * grad[2];
        }
        s
    }
}

/// A rescaled laminate with optional child patches on its target regions.
#[derive(Clone, Debug)]
pub struct Patch {
    pub osc: Arc<Oscillation>,
    /// World radius l of the cube the pattern is certified for.
    pub scale: f64,
    pub certificate: Option<OscillationCertificate>,
    /// One optional child per region, shared by all its tiles; its scale is the tile radius.
    pub children: Vec<Option<Arc<Patch>>>,
}

impl Patch {
    pub fn new(osc: Arc<Oscillation>, scale: f64, certificate: Option<OscillationCertificate>) -> Self {
        let n = osc.regions.len();
        Self { osc, scale, certificate, children: vec![None; n] }
    }

    /// World radius of the tiles of region r.
    pub fn tile_scale(&self, r: usize) -> f64 {
        self.scale * self.osc.regions[r].tile_radius()
    }

    /// Nesting depth: 1 for a patch without children.
    pub fn depth(&self) -> usize {
        1 + self.children.iter().flatten().map(|c| c.depth()).max().unwrap_or(0)
    }

    /// Contribution of this pattern (without children) at reference point z.
    fn own(&self, jet: &Jet) -> Sample {
        let l = self.scale;
        let mut s = Sample::default();
        for i in 0..2 {
            s.u[i] = l * jet.phi[i];
            s.dtu[i] = jet.dtphi[i];
            s.div_v[i] = jet.div_psi[i] + l * jet.div_g[i];
        }
        s.du = jet.dphi;
        s.v = jet.psi * l + jet.g * (l * l);
        s.dtv = jet.dtpsi + jet.dtg * l;
        s
    }

    /// Contribution along a probe path starting at this patch's local coordinate.
    fn eval_path(&self, path: &[[f64; 3]], out: &mut Sample) {
        let z = path[0];
        let jet = self.osc.jet(z);
        out.add(&self.own(&jet));
        if path.len() < 2 {
            return;
        }
        if let Some((r, _, _)) = self.osc.region_at(z) {
            if let Some(c) = &self.children[r] {
                c.eval_path(&path[1..], out);
            }
        }
    }

    /// Extends a path below depth 0 with fresh uniform coordinates, as deep as children exist.
    fn extend_path(&self, path: &mut Vec<[f64; 3]>, rng: &mut impl Rng) {
        let z = *path.last().expect("nonempty");
        if let Some((r, _, _)) = self.osc.region_at(z) {
            if let Some(c) = &self.children[r] {
                path.push([0; 3].map(|_| rng.gen_range(-1.0..1.0)));
                c.extend_path(path, rng);
            }
        }
    }

    /// Exact path of a reference point, as far as f64 resolves the tiles.
    fn resolve_path(&self, z: [f64; 3], path: &mut Vec<[f64; 3]>) {
        path.push(z);
        if let Some((r, c, s)) = self.osc.region_at(z) {
            if let Some(ch) = &self.children[r] {
                ch.resolve_path([0, 1, 2].map(|k| (z[k] - c[k]) / s), path);
            }
        }
    }

    /// Relative volumes (fractions of Q) of the deepest regions on each branch at level `mu`.
    pub fn branch_fractions_at(&self, mu: f64) -> [f64; 5] {
        let mut f = [0.0; 5];
        for (r, reg) in self.osc.regions.iter().enumerate() {
            let w = reg.volume() / 8.0;
            match &self.children[r] {
                Some(c) => {
                    let cf = c.branch_fractions_at(mu);
                    for k in 0..5 {
                        f[k] += w * cf[k];
                    }
                }
                None if self.osc.mu == mu => f[reg.branch] += w,
                None => {}
            }
        }
        f
    }

    /// ∫_Q f(state) dζ over the reference cube, with child regions substituted.
    pub fn integral(&self, rule: &GaussRule, f: &dyn Fn(&State) -> f64) -> f64 {
        self.integral_parts::<1>(rule, &|st| [f(st)], &mut HashMap::new())[0]
    }

    /// The M integrals ∫_Q f_m(state) dζ at once, shared children integrated once.
    pub fn integral_parts<const M: usize>(
        &self,
        rule: &GaussRule,
        f: &dyn Fn(&State) -> [f64; M],
        memo: &mut HashMap<*const Patch, [f64; M]>,
    ) -> [f64; M] {
        let l = self.scale;
        let mut s = self.osc.integrate_parts(rule, &mut |j: &Jet| f(&self.osc.state_of(j, l)), &|_| [1.0; M]);
        for (r, reg) in self.osc.regions.iter().enumerate() {
            if let Some(c) = &self.children[r] {
                let ci = match memo.get(&Arc::as_ptr(c)) {
                    Some(v) => *v,
                    None => {
                        let v = c.integral_parts(rule, f, memo);
                        memo.insert(Arc::as_ptr(c), v);
                        v
                    }
                };
                let frac = reg.volume() / 8.0;
                let fx = f(&reg.state);
                for m in 0..M {
                    s[m] += frac * (ci[m] - 8.0 * fx[m]);
                }
            }
        }
        s
    }

    /// ∫ f(state(x, τ)) dx over the reference slice at local time τ.
    pub fn slice_integral(&self, rule: &GaussRule, tau: f64, f: &dyn Fn(&State) -> f64) -> f64 {
        self.slice_integral_memo(rule, tau, f, &mut HashMap::new())
    }

    /// As `slice_integral`, with child slices shared through `memo` keyed by (patch, τ).
    pub fn slice_integral_memo(&self, rule: &GaussRule, tau: f64, f: &dyn Fn(&State) -> f64, memo: &mut HashMap<(*const Patch, u64), f64>) -> f64 {
        if let Some(v) = memo.get(&(self as *const Patch, tau.to_bits())) {
            return *v;
        }
        let l = self.scale;
        let mut s = self.osc.integrate_slice(rule, tau, &mut |j: &Jet| f(&self.osc.state_of(j, l)));
        for (r, reg) in self.osc.regions.iter().enumerate() {
            let Some(c) = &self.children[r] else { continue };
            for b in &reg.boxes {
                let (lo, hi) = b.extent();
                if tau <= lo[2] || tau >= hi[2] {
                    continue;
                }
                let row = ((tau - lo[2]) / b.side).floor().min(b.counts[2] as f64 - 1.0);
                let tc = lo[2] + (row + 0.5) * b.side;
                let local = (tau - tc) / (0.5 * b.side);
                let tiles = b.counts[0] as f64 * b.counts[1] as f64 * b.repeats as f64;
                let area = 0.25 * b.side * b.side;
                s += tiles * area * (c.slice_integral_memo(rule, local, f, memo) - 4.0 * f(&reg.state));
            }
        }
        memo.insert((self as *const Patch, tau.to_bits()), s);
        s
    }

    /// Σ_m ∫_Q f_m(state) w_m(ζ) dζ; child regions are homogenized with w frozen per tile.
    pub fn weighted_integral<const M: usize>(
        &self,
        rule: &GaussRule,
        f: &dyn Fn(&State) -> [f64; M],
        w: &dyn Fn([f64; 3]) -> [f64; M],
    ) -> f64 {
        apply_table(&self.weight_table(rule, f, &mut HashMap::new()), w)
    }

    /// Weight table of the pattern with child regions replaced by their mean densities on the
    /// Gauss nodes of each box hull; `memo` holds the child integrals.
    pub fn weight_table<const M: usize>(
        &self,
        rule: &GaussRule,
        f: &dyn Fn(&State) -> [f64; M],
        memo: &mut HashMap<*const Patch, [f64; M]>,
    ) -> Vec<TableNode<M>> {
        let l = self.scale;
        let mut out = self.osc.weight_table(rule, &mut |j: &Jet| f(&self.osc.state_of(j, l)));
        for (r, reg) in self.osc.regions.iter().enumerate() {
            let Some(c) = &self.children[r] else { continue };
            let fx = f(&reg.state);
            let cm = match memo.get(&Arc::as_ptr(c)) {
                Some(v) => *v,
                None => {
                    let v = c.integral_parts(rule, f, memo);
                    memo.insert(Arc::as_ptr(c), v);
                    v
                }
            };
            let value: [f64; M] = std::array::from_fn(|m| cm[m] / 8.0 - fx[m]);
            if value.iter().all(|d| *d == 0.0) {
                continue;
            }
            // Tiles fill the fraction `fill` of every pair; the density is spread over the hull.
            for b in &reg.boxes {
                let (lo, hi) = b.extent();
                let fill = b.counts[0] as f64 * b.side / (2.0 * self.osc.cell);
                for (x1, a) in rule.mapped(lo[0], hi[0]) {
                    for (x2, bb) in rule.mapped(lo[1], hi[1]) {
                        for (t, cc) in rule.mapped(lo[2], hi[2]) {
                            out.push(TableNode { z: [x1, x2, t], coef: fill * a * bb * cc, value });
                        }
                    }
                }
            }
        }
        out
    }

    /// Number of descendant patch instances per unit of this cube, by depth below it.
    pub fn instances(&self) -> Vec<f64> {
        let mut out = vec![1.0];
        for (r, reg) in self.osc.regions.iter().enumerate() {
            let Some(c) = &self.children[r] else { continue };
            let n: f64 = reg.boxes.iter().map(|b| b.tiles()).sum();
            for (d, m) in c.instances().iter().enumerate() {
                if out.len() <= d + 1 {
                    out.push(0.0);
                }
                out[d + 1] += n * m;
            }
        }
        out
    }
}

/// The atom carried by a top-level cube.
#[derive(Clone, Debug)]
pub enum Atom {
    Patch(Arc<Patch>),
    Bump(PolyBump),
}

#[derive(Clone, Debug)]
pub struct Leaf {
    pub cube: Cube,
    pub atom: Atom,
}

/// A boxed spatial vector field usable as an antidivergence input.
pub type SpatialFn = Box<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

/// u = s φ(x) t and v = s h(x) t with h an antidivergence of φ.
#[derive(Clone)]
pub struct SeedField {
    pub scale: f64,
    pub phi: SpatialBump,
    pub h: Arc<RectAntidiv<SpatialFn>>,
}

impl std::fmt::Debug for SeedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeedField").field("scale", &self.scale).field("phi", &self.phi).finish()
    }
}

/// amp · ((1 - ξ1²)(1 - ξ2²))² on a rectangle, ξ the affine map to (-1,1)², vanishing with
/// its gradient on the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialBump {
    pub rect: Rect,
    pub amp: [f64; 2],
}

impl SpatialBump {
    fn frame(&self) -> ([f64; 2], [f64; 2]) {
        let c = [0.5 * (self.rect.lo[0] + self.rect.hi[0]), 0.5 * (self.rect.lo[1] + self.rect.hi[1])];
        let h = [0.5 * (self.rect.hi[0] - self.rect.lo[0]), 0.5 * (self.rect.hi[1] - self.rect.lo[1])];
        (c, h)
    }

    /// (φ(x), Dφ(x)).
    pub fn jet(&self, x: [f64; 2]) -> ([f64; 2], Mat) {
        let (c, h) = self.frame();
        let xi = [(x[0] - c[0]) / h[0], (x[1] - c[1]) / h[1]];
        if xi.iter().any(|s| s.abs() >= 1.0) {
            return ([0.0; 2], Mat::zero());
        }
        let p = xi.map(|s| (1.0 - s * s).powi(2));
        let dp = [0, 1].map(|k| -4.0 * xi[k] * (1.0 - xi[k] * xi[k]) / h[k]);
        let val = p[0] * p[1];
        let mut d = Mat::zero();
        for i in 0..2 {
            d.set(i, 0, self.amp[i] * dp[0] * p[1]);
            d.set(i, 1, self.amp[i] * p[0] * dp[1]);
        }
        ([self.amp[0] * val, self.amp[1] * val], d)
    }

    pub fn value(&self, x: [f64; 2]) -> [f64; 2] {
        self.jet(x).0
    }

    /// Upper bound of sup |Dφ| (Frobenius): max |d/ds (1-s²)²| = 8/(3√3) and the other factor ≤ 1.
    pub fn sup_grad(&self) -> f64 {
        let (_, h) = self.frame();
        let m = 8.0 / (3.0 * 3f64.sqrt());
        self.amp[0].hypot(self.amp[1]) * (m / h[0]).hypot(m / h[1])
    }

    pub fn boxed(self) -> SpatialFn {
        Box::new(move |x| self.value(x))
    }
}

/// u = u0 + A x, v_i = (u0_i x1 + A_i1 x1²/2, A_i2 x2²/2) + B_i t: a constant state (A, B).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineState {
    pub u0: [f64; 2],
    pub a: Mat,
    pub b: Mat,
}

/// Field on the whole domain underneath the leaves.
#[derive(Clone, Debug)]
pub enum BaseField {
    Zero,
    Affine(AffineState),
    Seed(SeedField),
}

impl BaseField {
    pub fn sample(&self, z: [f64; 3]) -> Sample {
        match self {
            BaseField::Zero => Sample::default(),
            BaseField::Affine(s) => {
                let mut o = Sample::default();
                for i in 0..2 {
                    o.u[i] = s.u0[i] + s.a.at(i, 0) * z[0] + s.a.at(i, 1) * z[1];
                    o.div_v[i] = o.u[i];
                    o.v.set(i, 0, s.u0[i] * z[0] + 0.5 * s.a.at(i, 0) * z[0] * z[0] + s.b.at(i, 0) * z[2]);
                    o.v.set(i, 1, 0.5 * s.a.at(i, 1) * z[1] * z[1] + s.b.at(i, 1) * z[2]);
                }
                o.du = s.a;
                o.dtv = s.b;
                o
            }
            BaseField::Seed(sd) => {
                let x = [z[0], z[1]];
                let (phi, dphi) = sd.phi.jet(x);
                let h = sd.h.eval(x);
                let div_h = sd.h.div_fd(x, 1e-4);
                let (s, t) = (sd.scale, z[2]);
                let mut o = Sample::default();
                for i in 0..2 {
                    o.u[i] = s * phi[i] * t;
                    o.dtu[i] = s * phi[i];
                    o.div_v[i] = s * div_h[i] * t;
                }
                o.du = dphi * (s * t);
                o.v = h * (s * t);
                o.dtv = h * s;
                o
            }
        }
    }

    /// The constant state, if the base field has one.
    pub fn constant_state(&self) -> Option<State> {
        match self {
            BaseField::Zero => Some(State::zero()),
            BaseField::Affine(s) => Some(State::new(s.a, s.b)),
            BaseField::Seed(sd) if sd.scale == 0.0 => Some(State::zero()),
            BaseField::Seed(_) => None,
        }
    }
}

/// A point addressed by one local coordinate per nesting depth below its top-level leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub world: [f64; 3],
    pub leaf: Option<usize>,
    pub path: Vec<[f64; 3]>,
}

/// A nesting frame along a probe: the patch and its cube in world coordinates.
#[derive(Clone, Debug)]
pub struct Frame {
    pub patch: Arc<Patch>,
    pub cube: Cube,
}

/// Base field plus disjoint dyadic top-level leaves.
#[derive(Clone, Debug)]
pub struct SpaceTimeField {
    pub domain: DomainBox,
    pub base: BaseField,
    pub leaves: Vec<Leaf>,
    index: HashMap<(i32, [i64; 3]), usize>,
    depths: Vec<i32>,
    /// Measure of the domain left to the base field by construction.
    pub residual: f64,
}

fn dyadic_exponent(side: f64) -> Option<i32> {
    let e = side.log2().round() as i32;
    (2f64.powi(e) == side).then_some(e)
}

impl SpaceTimeField {
    pub fn new(domain: DomainBox, base: BaseField) -> Self {
        Self { domain, base, leaves: Vec::new(), index: HashMap::new(), depths: Vec::new(), residual: domain.volume() }
    }

    pub fn zero(domain: DomainBox) -> Self {
        Self::new(domain, BaseField::Zero)
    }

    fn key(e: i32, z: [f64; 3]) -> (i32, [i64; 3]) {
        let side = 2f64.powi(e);
        (e, z.map(|x| (x / side).floor() as i64))
    }

    /// Index of the leaf whose open cube contains z.
    pub fn leaf_at(&self, z: [f64; 3]) -> Option<usize> {
        for &e in &self.depths {
            if let Some(&i) = self.index.get(&Self::key(e, z)) {
                if self.leaves[i].cube.contains(z) {
                    return Some(i);
                }
            }
        }
        None
    }

    /// Probe of a world point, resolved as deep as f64 allows.
    pub fn probe(&self, z: [f64; 3]) -> Result<Probe, FieldError> {
        if !self.domain.contains(z) {
            return Err(FieldError::OutOfDomain(z));
        }
        let leaf = self.leaf_at(z);
        let mut path = Vec::new();
        if let Some(i) = leaf {
            let lf = &self.leaves[i];
            let loc = lf.cube.to_local(z);
            match &lf.atom {
                Atom::Patch(p) => p.resolve_path(loc, &mut path),
                Atom::Bump(_) => path.push(loc),
            }
        }
        Ok(Probe { world: z, leaf, path })
    }

    /// A uniformly distributed probe: world point first, then fresh local coordinates below
    /// every tile that carries a child.
    pub fn random_probe(&self, rng: &mut impl Rng) -> Probe {
        let z = [0, 1, 2].map(|k| rng.gen_range(self.domain.lo[k]..self.domain.hi[k]));
        let z = z.map(|x| x.max(f64::MIN_POSITIVE));
        let mut p = Probe { world: z, leaf: self.leaf_at(z), path: Vec::new() };
        if let Some(i) = p.leaf {
            let lf = &self.leaves[i];
            p.path.push(lf.cube.to_local(z));
            if let Atom::Patch(pt) = &lf.atom {
                pt.extend_path(&mut p.path, rng);
            }
        }
        p
    }

    /// Frames along a probe, outermost first.
    pub fn frames(&self, p: &Probe) -> Vec<Frame> {
        let mut out = Vec::new();
        let Some(i) = p.leaf else { return out };
        let Atom::Patch(pt) = &self.leaves[i].atom else { return out };
        let mut patch = pt.clone();
        let mut cube = self.leaves[i].cube;
        for (d, z) in p.path.iter().enumerate() {
            out.push(Frame { patch: patch.clone(), cube });
            if d + 1 == p.path.len() {
                break;
            }
            let Some((r, c, s)) = patch.osc.region_at(*z) else { break };
            let Some(ch) = patch.children[r].clone() else { break };
            cube = Cube { center: cube.to_world(c), radius: cube.radius * s };
            patch = ch;
        }
        out
    }

    /// A uniform probe in the box of world radius r around p, clipped to the domain.
    pub fn probe_near(&self, p: &Probe, r: f64, rng: &mut impl Rng) -> Probe {
        let frames = self.frames(p);
        let deep = frames.iter().rposition(|f| f.cube.radius >= r);
        let Some(d) = deep else {
            let z = [0, 1, 2].map(|k| {
                let lo = (p.world[k] - r).max(self.domain.lo[k]);
                let hi = (p.world[k] + r).min(self.domain.hi[k]);
                rng.gen_range(lo..hi).max(self.domain.lo[k] + f64::EPSILON)
            });
            let mut q = Probe { world: z, leaf: self.leaf_at(z), path: Vec::new() };
            if let Some(i) = q.leaf {
                let lf = &self.leaves[i];
                q.path.push(lf.cube.to_local(z));
                if let Atom::Patch(pt) = &lf.atom {
                    pt.extend_path(&mut q.path, rng);
                }
            }
            return q;
        };
        let f = &frames[d];
        let rho = r / f.cube.radius;
        let c = p.path[d];
        let z = [0, 1, 2].map(|k| {
            let lo = (c[k] - rho).max(-1.0);
            let hi = (c[k] + rho).min(1.0);
            rng.gen_range(lo..hi)
        });
        let mut path = p.path[..d].to_vec();
        path.push(z);
        f.patch.extend_path(&mut path, rng);
        Probe { world: f.cube.to_world(z), leaf: p.leaf, path }
    }

    /// Values and derivatives at a probe.
    pub fn sample_probe(&self, p: &Probe) -> Sample {
        let mut s = self.base.sample(p.world);
        if let Some(i) = p.leaf {
            let lf = &self.leaves[i];
            match &lf.atom {
                Atom::Patch(pt) => pt.eval_path(&p.path, &mut s),
                Atom::Bump(b) => s.add(&b.eval(p.path[0], lf.cube.radius)),
            }
        }
        s
    }

    /// Values and derivatives at a world point.
    pub fn sample(&self, z: [f64; 3]) -> Result<Sample, FieldError> {
        Ok(self.sample_probe(&self.probe(z)?))
    }

    /// Adds a top-level leaf. The cube must be dyadic, inside the domain and disjoint from
    /// every existing leaf; the atom must vanish on the cube boundary.
    pub fn attach(&self, cube: Cube, atom: Atom) -> Result<SpaceTimeField, FieldError> {
        let side = 2.0 * cube.radius;
        let e = dyadic_exponent(side).ok_or(FieldError::NotDyadic(side))?;
        if cube.lo().iter().any(|x| (x / side).fract() != 0.0) {
            return Err(FieldError::NotDyadic(side));
        }
        if !cube.inside_box(self.domain.lo, self.domain.hi) {
            return Err(FieldError::CubeOutside);
        }
        if let Some(i) = self.leaves.iter().position(|l| l.cube.overlaps(&cube)) {
            return Err(FieldError::Overlap(i));
        }
        if let Atom::Patch(p) = &atom {
            if p.scale != cube.radius {
                return Err(FieldError::Scale { certified: p.scale, radius: cube.radius });
            }
        }
        let leaf = Leaf { cube, atom };
        let jump = trace_sup(&leaf.atom, cube);
        if jump > 1e-8 {
            return Err(FieldError::Boundary(jump));
        }
        let mut out = self.clone();
        out.index.insert(Self::key(e, cube.center), out.leaves.len());
        if !out.depths.contains(&e) {
            out.depths.push(e);
            out.depths.sort_unstable();
        }
        out.residual -= cube.volume();
        out.leaves.push(leaf);
        Ok(out)
    }

    /// The same partition with every patch atom replaced by f(patch).
    pub fn map_patches(&self, f: &mut dyn FnMut(usize, &Arc<Patch>) -> Arc<Patch>) -> SpaceTimeField {
        let mut out = self.clone();
        for (i, lf) in out.leaves.iter_mut().enumerate() {
            if let Atom::Patch(p) = &lf.atom {
                lf.atom = Atom::Patch(f(i, p));
            }
        }
        out
    }

    /// A field with many leaves at once. Patch atoms shared by pointer are trace-checked once.
    pub fn with_leaves(domain: DomainBox, base: BaseField, leaves: Vec<Leaf>) -> Result<SpaceTimeField, FieldError> {
        let mut out = Self::new(domain, base);
        let mut checked: Vec<*const Patch> = Vec::new();
        for lf in &leaves {
            let c = lf.cube;
            let side = 2.0 * c.radius;
            let e = dyadic_exponent(side).ok_or(FieldError::NotDyadic(side))?;
            if c.lo().iter().any(|x| (x / side).fract() != 0.0) {
                return Err(FieldError::NotDyadic(side));
            }
            if !c.inside_box(domain.lo, domain.hi) {
                return Err(FieldError::CubeOutside);
            }
            for &d in &out.depths {
                // Same-depth duplicates and nesting across depths both show up at the centre.
                if let Some(&j) = out.index.get(&Self::key(d, c.center)) {
                    if out.leaves[j].cube.overlaps(&c) {
                        return Err(FieldError::Overlap(j));
                    }
                }
            }
            if let Atom::Patch(p) = &lf.atom {
                if p.scale != c.radius {
                    return Err(FieldError::Scale { certified: p.scale, radius: c.radius });
                }
                let ptr = Arc::as_ptr(p);
                if !checked.contains(&ptr) {
                    let jump = trace_sup(&lf.atom, c);
                    if jump > 1e-8 {
                        return Err(FieldError::Boundary(jump));
                    }
                    checked.push(ptr);
                }
            }
            out.index.insert(Self::key(e, c.center), out.leaves.len());
            if !out.depths.contains(&e) {
                out.depths.push(e);
                out.depths.sort_unstable();
            }
            out.residual -= c.volume();
            out.leaves.push(lf.clone());
        }
        Ok(out)
    }

    fn require_constant_base(&self) -> Result<Option<State>, FieldError> {
        match self.base.constant_state() {
            Some(s) => Ok(Some(s)),
            None if self.leaves.is_empty() => Ok(None),
            None => Err(FieldError::NonConstantBase),
        }
    }

    /// ∫_{Ω_T} f(Du, ∂t v) using the cell structure of every patch.
    pub fn integral_state(&self, rule: &GaussRule, f: &dyn Fn(&State) -> f64) -> Result<f64, FieldError> {
        let mut s = 0.0;
        match self.require_constant_base()? {
            Some(b) => s += self.residual * f(&b),
            None => s += gauss_box(rule, self.domain.lo, self.domain.hi, 4, &|z| f(&self.base.sample(z).state())),
        }
        let base = self.base.constant_state().unwrap_or(State::zero());
        let mut memo: HashMap<*const Patch, f64> = HashMap::new();
        for lf in &self.leaves {
            let vol = lf.cube.volume();
            s += match &lf.atom {
                Atom::Patch(p) => {
                    let m = *memo.entry(Arc::as_ptr(p)).or_insert_with(|| p.integral(rule, f) / 8.0);
                    vol * m
                }
                Atom::Bump(b) => {
                    let r = lf.cube.radius;
                    vol / 8.0 * gauss_box(rule, [-1.0; 3], [1.0; 3], 4, &|z| {
                        let e = b.eval(z, r);
                        f(&State::new(base.a + e.du, base.b))
                    })
                }
            };
        }
        Ok(s)
    }

    /// ∫_Ω f(Du(x,t), ∂t v(x,t)) dx at one time.
    pub fn slice_integral_state(&self, rule: &GaussRule, t: f64, f: &dyn Fn(&State) -> f64) -> Result<f64, FieldError> {
        let area = (self.domain.hi[0] - self.domain.lo[0]) * (self.domain.hi[1] - self.domain.lo[1]);
        let base = self.require_constant_base()?;
        let mut covered = 0.0;
        let mut s = 0.0;
        let mut memo = HashMap::new();
        for lf in &self.leaves {
            let c = lf.cube;
            let tau = (t - c.center[2]) / c.radius;
            if tau.abs() >= 1.0 {
                continue;
            }
            let a = 4.0 * c.radius * c.radius;
            covered += a;
            s += match &lf.atom {
                Atom::Patch(p) => 0.25 * a * p.slice_integral_memo(rule, tau, f, &mut memo),
                Atom::Bump(b) => {
                    let b0 = base.unwrap_or(State::zero());
                    0.25 * a * gauss_rect(rule, &|x1, x2| {
                        let e = b.eval([x1, x2, tau], c.radius);
                        f(&State::new(b0.a + e.du, b0.b))
                    })
                }
            };
        }
        match base {
            Some(b) => s += (area - covered) * f(&b),
            None => {
                s += gauss_box2(rule, self.domain, &|x1, x2| f(&self.base.sample([x1, x2, t]).state()));
            }
        }
        Ok(s)
    }

    /// Σ_m ∫_{Ω_T} f_m(Du, ∂t v) w_m(z) dz with the laminates homogenized against w.
    pub fn weighted_integral_state<const M: usize>(
        &self,
        rule: &GaussRule,
        f: &dyn Fn(&State) -> [f64; M],
        w: &dyn Fn([f64; 3]) -> [f64; M],
    ) -> Result<f64, FieldError> {
        Ok(self.weighted_integrals_state(rule, f, &[w])?[0])
    }

    /// `weighted_integral_state` for several weights, sharing the pattern tables.
    pub fn weighted_integrals_state<const M: usize>(
        &self,
        rule: &GaussRule,
        f: &dyn Fn(&State) -> [f64; M],
        ws: &[&dyn Fn([f64; 3]) -> [f64; M]],
    ) -> Result<Vec<f64>, FieldError> {
        let dot = |a: [f64; M], b: [f64; M]| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
        let constant = self.require_constant_base()?;
        let base = self.base.constant_state().unwrap_or(State::zero());
        let mut tables: HashMap<*const Patch, Vec<TableNode<M>>> = HashMap::new();
        let mut memo = HashMap::new();
        for lf in &self.leaves {
            if let Atom::Patch(p) = &lf.atom {
                tables.entry(Arc::as_ptr(p)).or_insert_with(|| p.weight_table(rule, f, &mut memo));
            }
        }
        let mut out = Vec::with_capacity(ws.len());
        for w in ws {
            let mut s = 0.0;
            match constant {
                Some(b) => {
                    let fb = f(&b);
                    s += gauss_box(rule, self.domain.lo, self.domain.hi, 4, &|z| dot(fb, w(z)));
                    for lf in &self.leaves {
                        let c = lf.cube;
                        s -= gauss_box(rule, c.lo(), c.hi(), 1, &|z| dot(fb, w(z)));
                    }
                }
                None => s += gauss_box(rule, self.domain.lo, self.domain.hi, 4, &|z| dot(f(&self.base.sample(z).state()), w(z))),
            }
            for lf in &self.leaves {
                let c = lf.cube;
                let wl = |z: [f64; 3]| w(c.to_world(z));
                s += c.radius.powi(3)
                    * match &lf.atom {
                        Atom::Patch(p) => apply_table(&tables[&Arc::as_ptr(p)], &wl),
                        Atom::Bump(b) => gauss_box(rule, [-1.0; 3], [1.0; 3], 4, &|z| {
                            let e = b.eval(z, c.radius);
                            dot(f(&State::new(base.a + e.du, base.b)), wl(z))
                        }),
                    };
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Fraction of the domain on each branch among the deepest regions at level mu.
    pub fn branch_fractions_at(&self, mu: f64) -> [f64; 5] {
        let mut f = [0.0; 5];
        let mut memo: HashMap<*const Patch, [f64; 5]> = HashMap::new();
        for lf in &self.leaves {
            if let Atom::Patch(p) = &lf.atom {
                let b = *memo.entry(Arc::as_ptr(p)).or_insert_with(|| p.branch_fractions_at(mu));
                for k in 0..5 {
                    f[k] += lf.cube.volume() * b[k];
                }
            }
        }
        f.map(|x| x / self.domain.volume())
    }

    /// Sum of leaf volumes plus the base-field remainder.
    pub fn bookkeeping(&self) -> f64 {
        self.leaves.iter().map(|l| l.cube.volume()).sum::<f64>() + self.residual
    }
}

/// Σ coef · value · w(z) over a weight table.
fn apply_table<const M: usize>(table: &[TableNode<M>], w: &dyn Fn([f64; 3]) -> [f64; M]) -> f64 {
    let mut s = 0.0;
    for n in table {
        let wv = w(n.z);
        for m in 0..M {
            s += n.coef * n.value[m] * wv[m];
        }
    }
    s
}

/// Largest |u| or |v| of an atom on a face grid of its cube.
pub fn trace_sup(atom: &Atom, cube: Cube) -> f64 {
    let mut jump: f64 = 0.0;
    for z in cube.face_points() {
        let loc = cube.to_local(z).map(|x| x.clamp(-1.0, 1.0));
        let s = match atom {
            Atom::Patch(p) => {
                let mut s = Sample::default();
                p.eval_path(&[loc], &mut s);
                s
            }
            Atom::Bump(b) => b.eval(loc, cube.radius),
        };
        jump = jump.max(s.u[0].abs()).max(s.u[1].abs()).max(s.v.norm());
    }
    jump
}

/// Composite tensor Gauss over a box with `panels` panels per axis.
fn gauss_box(rule: &GaussRule, lo: [f64; 3], hi: [f64; 3], panels: usize, f: &dyn Fn([f64; 3]) -> f64) -> f64 {
    let h = [0, 1, 2].map(|k| (hi[k] - lo[k]) / panels as f64);
    let mut s = 0.0;
    for i in 0..panels {
        for j in 0..panels {
            for k in 0..panels {
                let a = [lo[0] + i as f64 * h[0], lo[1] + j as f64 * h[1], lo[2] + k as f64 * h[2]];
                for (x, wx) in rule.mapped(a[0], a[0] + h[0]) {
                    for (y, wy) in rule.mapped(a[1], a[1] + h[1]) {
                        for (t, wt) in rule.mapped(a[2], a[2] + h[2]) {
                            s += wx * wy * wt * f([x, y, t]);
                        }
                    }
                }
            }
        }
    }
    s
}

fn gauss_rect(rule: &GaussRule, f: &dyn Fn(f64, f64) -> f64) -> f64 {
    let mut s = 0.0;
    for (x, wx) in rule.mapped(-1.0, 1.0) {
        for (y, wy) in rule.mapped(-1.0, 1.0) {
            s += wx * wy * f(x, y);
        }
    }
    s
}

fn gauss_box2(rule: &GaussRule, d: DomainBox, f: &dyn Fn(f64, f64) -> f64) -> f64 {
    let n = 8;
    let h = [(d.hi[0] - d.lo[0]) / n as f64, (d.hi[1] - d.lo[1]) / n as f64];
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = [d.lo[0] + i as f64 * h[0], d.lo[1] + j as f64 * h[1]];
            for (x, wx) in rule.mapped(a[0], a[0] + h[0]) {
                for (y, wy) in rule.mapped(a[1], a[1] + h[1]) {
                    s += wx * wy * f(x, y);
                }
            }
        }
    }
    s
}

/// Output of a dyadic covering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cover {
    pub cubes: Vec<Cube>,
    /// Sampled measure of the region and the uncovered fraction of it.
    pub region_measure: f64,
    pub residual: f64,
}

/// Disjoint dyadic cubes of radius < eps inside an open region, covering all but a fraction
/// eta of its sampled measure.
///
/// Cubes are accepted when a 5³ grid of their closure (pulled in by 1e-9 of the radius) lies
/// in the region; otherwise they are bisected up to `max_depth` generations.
pub fn vitali_cover(
    region: &dyn Fn([f64; 3]) -> bool,
    bound: Cube,
    eps: f64,
    eta: f64,
    max_depth: u32,
) -> Result<Cover, FieldError> {
    if !(eps > 0.0 && eta > 0.0) {
        return Err(FieldError::CoverParams);
    }
    let grid = [-1.0 + 1e-9, -0.5, 0.0, 0.5, 1.0 - 1e-9];
    let inside = |c: &Cube| {
        grid.iter().all(|a| grid.iter().all(|b| grid.iter().all(|d| region(c.to_world([*a, *b, *d])))))
    };
    let mut cubes = Vec::new();
    let mut stack = vec![(bound, 0u32)];
    while let Some((c, d)) = stack.pop() {
        if c.radius < eps && inside(&c) {
            cubes.push(c);
        } else if d < max_depth {
            stack.extend(c.children().map(|k| (k, d + 1)));
        }
    }
    cubes.sort_by(|a, b| a.center.partial_cmp(&b.center).expect("finite"));
    let n = 48;
    let cell = bound.volume() / (n * n * n) as f64;
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let z = [i, j, k].map(|m| -1.0 + (2 * m + 1) as f64 / n as f64);
                if region(bound.to_world(z)) {
                    hits += 1;
                }
            }
        }
    }
    let measure = hits as f64 * cell;
    let covered: f64 = cubes.iter().map(|c| c.volume()).sum();
    let residual = if measure > 0.0 { ((measure - covered) / measure).max(0.0) } else { 0.0 };
    if residual > eta {
        return Err(FieldError::Cover { achieved: residual, budget: eta, depth: max_depth });
    }
    Ok(Cover { cubes, region_measure: measure, residual })
}

/// The interior of a cube after removing one layer of its 2^-gen subcubes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shaved {
    pub cube: Cube,
    pub generation: u32,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Shaved {
    pub fn volume(&self) -> f64 {
        (0..3).map(|k| self.hi[k] - self.lo[k]).product()
    }
}

/// Shrinks each cube to the union of its interior dyadic subcubes of the first generation
/// whose shaved layer is at most eps_prime of the cube.
pub fn select_subsets(cells: &[Cube], eps_prime: f64) -> Result<Vec<Shaved>, FieldError> {
    let mut out = Vec::with_capacity(cells.len());
    for c in cells {
        let mut g = 2u32;
        loop {
            let n = 2f64.powi(g as i32);
            let shaved = 1.0 - ((n - 2.0) / n).powi(3);
            if shaved <= eps_prime {
                let layer = 2.0 * c.radius / n;
                out.push(Shaved { cube: *c, generation: g, lo: c.lo().map(|x| x + layer), hi: c.hi().map(|x| x - layer) });
                break;
            }
            g += 1;
            if g > 50 {
                return Err(FieldError::Shave(eps_prime));
            }
        }
    }
    Ok(out)
}

/// Fraction of midpoint-subgrid points of each cube carrying each label.
///
/// The subgrid is dyadic, so it aliases with dyadic laminate cells; structural fractions of
/// patch regions are reported separately by the driver.
pub fn measure_fraction(
    f: &SpaceTimeField,
    classifier: &dyn Fn(&State) -> String,
    cubes: &[Cube],
    quad: &Quadrature,
) -> Vec<BTreeMap<String, f64>> {
    let n = quad.resolution;
    let w = 1.0 / (n * n * n) as f64;
    cubes
        .iter()
        .map(|c| {
            let mut m = BTreeMap::new();
            for z in quad.subgrid() {
                let s = f.sample(c.to_world(z)).map(|s| classifier(&s.state())).unwrap_or_else(|_| "outside".into());
                *m.entry(s).or_insert(0.0) += w;
            }
            m
        })
        .collect()
}

/// L¹ and sampled L∞ distances between two fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1_value: f64,
    pub l1_du: f64,
    pub linf_value: f64,
    pub linf_dt: f64,
    /// Sup norms are lower estimates at this subgrid resolution.
    pub resolution: usize,
}

/// Tensor Gauss quadrature on a resolution³ grid of the domain, plus the midpoint subgrid
/// for the sup norms.
pub fn norms(f: &SpaceTimeField, g: &SpaceTimeField, quad: &Quadrature) -> Result<Norms, FieldError> {
    if f.domain != g.domain {
        return Err(FieldError::Domain);
    }
    let d = f.domain;
    let n = quad.resolution;
    let rule = quad.rule();
    let h = [0, 1, 2].map(|k| (d.hi[k] - d.lo[k]) / n as f64);
    let mut out = Norms { l1_value: 0.0, l1_du: 0.0, linf_value: 0.0, linf_dt: 0.0, resolution: n };
    let diff = |z: [f64; 3]| -> Result<(f64, f64, f64), FieldError> {
        let a = f.sample(z)?;
        let b = g.sample(z)?;
        let dv = (a.u[0] - b.u[0]).hypot(a.u[1] - b.u[1]);
        let dd = (a.du - b.du).norm();
        let dt = (a.dtu[0] - b.dtu[0]).hypot(a.dtu[1] - b.dtu[1]);
        Ok((dv, dd, dt))
    };
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let lo = [i, j, k].map(|m| m as f64);
                let lo = [0, 1, 2].map(|a| d.lo[a] + lo[a] * h[a]);
                for (x, wx) in rule.mapped(lo[0], lo[0] + h[0]) {
                    for (y, wy) in rule.mapped(lo[1], lo[1] + h[1]) {
                        for (t, wt) in rule.mapped(lo[2], lo[2] + h[2]) {
                            let (dv, dd, dt) = diff([x, y, t])?;
                            out.l1_value += wx * wy * wt * dv;
                            out.l1_du += wx * wy * wt * dd;
                            out.linf_value = out.linf_value.max(dv);
                            out.linf_dt = out.linf_dt.max(dt);
                        }
                    }
                }
            }
        }
    }
    let whole = Cube { center: [0, 1, 2].map(|k| 0.5 * (d.lo[k] + d.hi[k])), radius: 1.0 };
    for z in quad.subgrid() {
        let w = [0, 1, 2].map(|k| whole.center[k] + 0.5 * (d.hi[k] - d.lo[k]) * z[k]);
        let (dv, _, dt) = diff(w)?;
        out.linf_value = out.linf_value.max(dv);
        out.linf_dt = out.linf_dt.max(dt);
    }
    Ok(out)
}

/// One row of the export index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LeafRecord {
    pub id: usize,
    pub center: [f64; 3],
    pub radius: f64,
    pub atom: String,
    pub payload: serde_json::Value,
}

/// Writes `index.json` and one CSV sample grid per leaf (n³ midpoints) into `dir`.
pub fn export(f: &SpaceTimeField, dir: &std::path::Path, n: usize) -> Result<Vec<LeafRecord>, FieldError> {
    let io = |e: std::io::Error| FieldError::Io(e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut recs = Vec::with_capacity(f.leaves.len());
    let q = Quadrature { order: 2, resolution: n.max(1) };
    for (id, lf) in f.leaves.iter().enumerate() {
        let (atom, payload) = match &lf.atom {
            Atom::Patch(p) => (
                "patch",
                serde_json::json!({
                    "levels": p.osc.levels.len(),
                    "cell": p.osc.cell,
                    "theta": p.osc.theta,
                    "regions": p.osc.regions.len(),
                    "depth": p.depth(),
                    "branch": p.osc.branch,
                    "lambda": p.osc.lambda,
                    "mu": p.osc.mu,
                }),
            ),
            Atom::Bump(b) => ("bump", serde_json::json!({ "amp": b.amp })),
        };
        let mut csv = String::from("x1,x2,t,u1,u2,du11,du12,du21,du22,dtv11,dtv12,dtv21,dtv22\n");
        for z in q.subgrid() {
            let w = lf.cube.to_world(z);
            let s = f.sample(w)?;
            let row: Vec<String> = w
                .iter()
                .chain(s.u.iter())
                .chain(s.du.e.iter())
                .chain(s.dtv.e.iter())
                .map(|x| format!("{x:e}"))
                .collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        std::fs::write(dir.join(format!("leaf_{id}.csv")), csv).map_err(io)?;
        recs.push(LeafRecord { id, center: lf.cube.center, radius: lf.cube.radius, atom: atom.into(), payload });
    }
    let idx = serde_json::json!({ "domain": f.domain, "residual": f.residual, "leaves": recs });
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&idx).expect("json")).map_err(io)?;
    Ok(recs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn bump_field() -> (SpaceTimeField, Cube) {
        let f = SpaceTimeField::zero(DomainBox::unit());
        let c = Cube::new([0.25, 0.25, 0.25], 0.25).unwrap();
        (f.attach(c, Atom::Bump(PolyBump { amp: [0.5, -0.25] })).unwrap(), c)
    }

    #[test]
    fn affine_atom_derivatives() {
        let a = Mat::new(1.0, 2.0, -1.0, 0.5);
        let b = Mat::new(0.1, 0.0, 0.3, -0.2);
        let f = SpaceTimeField::new(DomainBox::unit(), BaseField::Affine(AffineState { u0: [0.2, -0.1], a, b }));
        let s = f.sample([0.3, 0.6, 0.2]).unwrap();
        assert_eq!(s.du, a);
        assert_eq!(s.dtv, b);
        assert_eq!(s.dtu, [0.0; 2]);
        assert!(s.div_defect() < 1e-15);
    }

    #[test]
    fn bump_matches_finite_differences() {
        let (f, _) = bump_field();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let z = [0; 3].map(|_| rng.gen_range(0.02..0.48));
            let s = f.sample(z).unwrap();
            for ax in 0..3 {
                let mut zp = z;
                let mut zm = z;
                zp[ax] += h;
                zm[ax] -= h;
                let (p, m) = (f.sample(zp).unwrap(), f.sample(zm).unwrap());
                for i in 0..2 {
                    let fd = (p.u[i] - m.u[i]) / (2.0 * h);
                    let an = if ax < 2 { s.du.at(i, ax) } else { s.dtu[i] };
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} {an}");
                }
            }
        }
    }

    #[test]
    fn attach_rules() {
        let (f, c) = bump_field();
        assert!(matches!(f.attach(c, Atom::Bump(PolyBump { amp: [1.0, 0.0] })), Err(FieldError::Overlap(0))));
        let bad = Cube::new([0.3, 0.25, 0.25], 0.25).unwrap();
        assert!(matches!(f.attach(bad, Atom::Bump(PolyBump { amp: [1.0, 0.0] })), Err(FieldError::NotDyadic(_))));
        let g = SpaceTimeField::zero(DomainBox::unit());
        let z = [0.7, 0.6, 0.9];
        assert_eq!(f.sample(z).unwrap(), g.sample(z).unwrap());
        let zero = g.attach(c, Atom::Bump(PolyBump { amp: [0.0; 2] })).unwrap();
        assert_eq!(zero.sample([0.2, 0.1, 0.3]).unwrap(), g.sample([0.2, 0.1, 0.3]).unwrap());
        assert!((f.bookkeeping() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bump_sup_difference() {
        let (f, c) = bump_field();
        let g = SpaceTimeField::zero(DomainBox::unit());
        let q = Quadrature { order: 3, resolution: 2 };
        let nr = norms(&f, &g, &q).unwrap();
        // The 2-cell subgrid midpoint (0.25, 0.25, 0.25) is the bump centre.
        assert!((nr.linf_value - 0.5f64.hypot(0.25)).abs() < 1e-9, "{nr:?}");
        assert!(c.contains([0.25; 3]));
    }

    #[test]
    fn norms_of_constant_and_polynomial_differences() {
        let d = DomainBox::unit();
        let c = AffineState { u0: [0.3, 0.4], a: Mat::zero(), b: Mat::zero() };
        let f = SpaceTimeField::new(d, BaseField::Affine(c));
        let g = SpaceTimeField::zero(d);
        let q = Quadrature::new(3, 2).unwrap();
        let n = norms(&f, &g, &q).unwrap();
        assert!((n.l1_value - 0.5).abs() < 1e-10);
        assert_eq!(norms(&f, &f, &q).unwrap().l1_du, 0.0);
        // |u| = x1 on the unit box: ∫ x1 = 1/2 exactly.
        let lin = AffineState { u0: [0.0; 2], a: Mat::new(1.0, 0.0, 0.0, 0.0), b: Mat::zero() };
        let n = norms(&SpaceTimeField::new(d, BaseField::Affine(lin)), &g, &q).unwrap();
        assert!((n.l1_value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cover_full_box_ball_and_empty() {
        let b = Cube::new([0.5; 3], 0.5).unwrap();
        let full = vitali_cover(&|z| b.contains(z), b, 0.1, 1e-3, 6).unwrap();
        let v: f64 = full.cubes.iter().map(|c| c.volume()).sum();
        assert!((v - 1.0).abs() < 1e-12 && full.cubes.iter().all(|c| c.radius < 0.1));
        let ball = |z: [f64; 3]| (0..3).map(|k| (z[k] - 0.5).powi(2)).sum::<f64>() < 0.25;
        let cov = vitali_cover(&ball, b, 0.1, 0.05, 7).unwrap();
        let v: f64 = cov.cubes.iter().map(|c| c.volume()).sum();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!(v >= 0.95 * exact * 0.98, "{v} vs {exact}");
        for (i, a) in cov.cubes.iter().enumerate() {
            for c in &cov.cubes[i + 1..] {
                assert!(!a.overlaps(c));
            }
        }
        let empty = vitali_cover(&|_| false, b, 0.1, 0.05, 3).unwrap();
        assert!(empty.cubes.is_empty());
    }

    #[test]
    fn shaving() {
        let c = Cube::new([0.0; 3], 1.0).unwrap();
        let s = select_subsets(&[c], 0.5).unwrap();
        assert!(1.0 - s[0].volume() / c.volume() <= 0.5);
        let s = select_subsets(&[c], 1e-3).unwrap();
        let shaved = 1.0 - s[0].volume() / c.volume();
        assert!(shaved <= 1e-3 && shaved > 0.0);
        assert!(select_subsets(&[], 0.1).unwrap().is_empty());
    }

    #[test]
    fn fractions_on_constant_field_and_slab() {
        let x = Mat::new(1.0, 0.0, 0.0, 0.0);
        let f = SpaceTimeField::new(DomainBox::unit(), BaseField::Affine(AffineState { u0: [0.0; 2], a: x, b: Mat::zero() }));
        let c = Cube::new([0.5; 3], 0.5).unwrap();
        let q = Quadrature::default();
        let cl = |s: &State| if s.a == x { "X".to_string() } else { "other".to_string() };
        let m = measure_fraction(&f, &cl, &[c], &q);
        assert_eq!(m[0]["X"], 1.0);
        assert!(measure_fraction(&f, &cl, &[], &q).is_empty());
        // ∂1 of a bump changes sign across the slab x1 = 0.5.
        let g = SpaceTimeField::zero(DomainBox::unit()).attach(c, Atom::Bump(PolyBump { amp: [1.0, 0.0] })).unwrap();
        let slab = |s: &State| if s.a.at(0, 0) > 0.0 { "a".to_string() } else { "b".to_string() };
        let m = measure_fraction(&g, &slab, &[c], &q);
        assert!((m[0]["a"] - 0.5).abs() <= 1.0 / q.resolution as f64);
        assert!((m[0]["a"] + m[0]["b"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn export_writes_index() {
        let (f, _) = bump_field();
        let dir = std::env::temp_dir().join(format!("polywild_export_{}", std::process::id()));
        let recs = export(&f, &dir, 2).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(dir.join("index.json").exists() && dir.join("leaf_0.csv").exists());
        std::fs::remove_dir_all(dir).ok();
    }
}
