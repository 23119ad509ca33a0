//! Nested space-time laminates realizing a five-point splitting on the reference cube
//! Q = (-1,1)^3 with coordinates (x1, x2, t).
//!
//! A state Y on branch i at level λ is split along the closed chain into the level-μ
//! targets X_k. Level j of the laminate lives on a one-dimensional profile e_j(x1): it equals 1
//! on the interval of X_j inside a cell and -ρ_j on the rest of its parent interval, so its
//! cell mean vanishes. Cells of length P alternate with their mirror images. Each level is
//! switched on inside a window W_j in (x2, t); the windows are nested and their collars have
//! width θ. With V_j = (a_j ⊗ e1, b_j ⊗ e2),
//!
//! φ = Σ_j a_j I_j(x1) χ_j(x2) τ_j(t),
//! ψ = Σ_j b_j ⊗ (-I_j γ_j χ_j' η, (e_j η + I_j η') γ_j χ_j),
//!
//! where I_j is the primitive of e_j, η(x1) is a collar cutoff and γ_j' = τ_j - κ_j on the time
//! ramps, so γ_j returns to zero. div ψ = 0 holds identically, and g = R φ is evaluated in
//! closed form from the second primitive of e_j.

use crate::antidiv::BumpProfile;
use crate::config::{barycentric_expand, ConfigBundle, ConfigError, Expansion, T5Fiber};
use crate::quadrature::{GaussRule, Quadrature};
use crate::{Mat, State};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Cell widths are rounded to multiples of 2^-24 of the cell length.
const WIDTH_GRID: f64 = 1.0 / (1u64 << 24) as f64;
/// Half-width of the linear transition bands of e_j, in cell units.
const BAND: f64 = 2.0 * WIDTH_GRID;
const MAX_LEVELS: usize = 80;

/// Input of one oscillation build.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OscillationRequest {
    pub y: State,
    pub branch: usize,
    pub lambda: f64,
    pub mu: f64,
    pub mu_prime: f64,
    pub fiber: T5Fiber,
    /// Bound for l sup|φ| + sup|∂tφ|.
    pub eps: f64,
    /// Allowed relative measure loss of the target regions.
    pub measure_eps: f64,
    /// Radius of the world cube the pattern will be rescaled to.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OscillateError {
    #[error("levels must satisfy 1 > mu' > mu > max(lambda, nu1, delta1), got lambda = {lambda}, mu = {mu}, mu' = {mu_prime}")]
    Levels { lambda: f64, mu: f64, mu_prime: f64 },
    #[error("Y differs from the segment point by {0:e}")]
    NotOnSegment(f64),
    #[error("chain edge {0} is not of the form (a ⊗ e1, b ⊗ e2)")]
    WaveCone(usize),
    #[error("eps must lie in (0,1), got {0}")]
    Eps(f64),
    #[error("collar deviation {deviation:e} exceeds the tube slack {slack:e}")]
    Slack { deviation: f64, slack: f64 },
    #[error("no admissible cell length")]
    CellLength,
    #[error("certificate failed: {0}")]
    Certificate(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// One nesting level of the laminate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Level {
    /// Branch of the target X_k realized on this level's interval.
    pub target: usize,
    pub v: State,
    pub a: [f64; 2],
    pub b: [f64; 2],
    /// Start and width of the X interval, in cell units.
    pub start: f64,
    pub width: f64,
    pub rho: f64,
}

/// A lattice of equal cubes, optionally repeated with a period along x1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileBox {
    pub origin: [f64; 3],
    pub side: f64,
    pub counts: [u64; 3],
    pub period: f64,
    pub repeats: u64,
}

impl TileBox {
    /// Number of tiles, as a float since it can exceed u64.
    pub fn tiles(&self) -> f64 {
        self.counts.iter().map(|c| *c as f64).product::<f64>() * self.repeats as f64
    }

    pub fn volume(&self) -> f64 {
        self.counts.iter().map(|c| *c as f64 * self.side).product::<f64>() * self.repeats as f64
    }

    /// Centre of the tile containing z, if any.
    pub fn locate(&self, z: [f64; 3]) -> Option<[f64; 3]> {
        let mut c = [0.0; 3];
        for ax in 1..3 {
            let off = z[ax] - self.origin[ax];
            if off < 0.0 {
                return None;
            }
            let i = (off / self.side).floor();
            if i >= self.counts[ax] as f64 {
                return None;
            }
            c[ax] = self.origin[ax] + (i + 0.5) * self.side;
        }
        let off = z[0] - self.origin[0];
        if off < 0.0 {
            return None;
        }
        let k = if self.repeats > 1 { (off / self.period).floor() } else { 0.0 };
        if k >= self.repeats as f64 {
            return None;
        }
        let r = off - k * self.period;
        let i = (r / self.side).floor();
        if i >= self.counts[0] as f64 {
            return None;
        }
        c[0] = self.origin[0] + k * self.period + (i + 0.5) * self.side;
        Some(c)
    }

    /// Bounding box (lo, hi) of all tiles.
    pub fn extent(&self) -> ([f64; 3], [f64; 3]) {
        let mut hi = [0.0; 3];
        for ax in 0..3 {
            hi[ax] = self.origin[ax] + self.counts[ax] as f64 * self.side;
        }
        hi[0] += (self.repeats.saturating_sub(1)) as f64 * self.period;
        (self.origin, hi)
    }
}

/// A set on which the perturbed state is exactly the target X_branch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Region {
    pub level: usize,
    pub branch: usize,
    pub state: State,
    pub boxes: Vec<TileBox>,
}

impl Region {
    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(|b| b.volume()).sum()
    }

    pub fn tile_radius(&self) -> f64 {
        0.5 * self.boxes[0].side
    }
}

/// Values and first derivatives of the perturbation at one reference point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub phi: [f64; 2],
    pub dphi: Mat,
    pub dtphi: [f64; 2],
    pub psi: Mat,
    pub div_psi: [f64; 2],
    pub dtpsi: Mat,
    pub g: Mat,
    pub div_g: [f64; 2],
    pub dtg: Mat,
}

impl Default for Mat {
    fn default() -> Self {
        Mat::zero()
    }
}

/// Smoothstep S(z) = 3z² - 2z³ with derivative and primitive from 0.
#[inline]
fn smooth(z: f64) -> (f64, f64, f64) {
    let z = z.clamp(0.0, 1.0);
    (z * z * (3.0 - 2.0 * z), 6.0 * z * (1.0 - z), z * z * z - 0.5 * z * z * z * z)
}

/// Window on (-1,1) with ramps [lo, lo + θ] and [1 - (lo + 1) - θ, ...], symmetric.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Window {
    lo: f64,
    theta: f64,
}

/// Window value, derivative, primitive from -1, and ramp length up to s.
struct WinJet {
    val: f64,
    der: f64,
    int: f64,
    ramp_len: f64,
    on_ramp: bool,
}

impl Window {
    fn inner(&self) -> (f64, f64) {
        (self.lo + self.theta, -self.lo - self.theta)
    }

    fn total(&self) -> f64 {
        let (a, b) = self.inner();
        b - a + self.theta
    }

    fn eval(&self, s: f64) -> WinJet {
        let th = self.theta;
        let lo0 = self.lo;
        let (lo1, hi1) = self.inner();
        let hi0 = hi1 + th;
        if s <= lo0 {
            WinJet { val: 0.0, der: 0.0, int: 0.0, ramp_len: 0.0, on_ramp: false }
        } else if s < lo1 {
            let (v, d, i) = smooth((s - lo0) / th);
            WinJet { val: v, der: d / th, int: th * i, ramp_len: s - lo0, on_ramp: true }
        } else if s <= hi1 {
            WinJet { val: 1.0, der: 0.0, int: 0.5 * th + (s - lo1), ramp_len: th, on_ramp: false }
        } else if s < hi0 {
            let (v, d, i) = smooth((hi0 - s) / th);
            WinJet { val: v, der: -d / th, int: 0.5 * th + (hi1 - lo1) + th * (0.5 - i), ramp_len: th + (s - hi1), on_ramp: true }
        } else {
            WinJet { val: 0.0, der: 0.0, int: self.total(), ramp_len: 2.0 * th, on_ramp: false }
        }
    }
}

/// Ramp H(z) = clamp((z + h)/(2h), 0, 1) and its first two primitives, all in cell units.
#[inline]
fn band(z: f64) -> (f64, f64, f64) {
    let h = BAND;
    if z <= -h {
        (0.0, 0.0, 0.0)
    } else if z < h {
        let w = z + h;
        (w / (2.0 * h), w * w / (4.0 * h), w * w * w / (12.0 * h))
    } else {
        (1.0, z, 0.5 * z * z + h * h / 6.0)
    }
}

/// A built laminate on the reference cube.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Oscillation {
    pub y: State,
    pub branch: usize,
    pub lambda: f64,
    pub mu: f64,
    pub levels: Vec<Level>,
    /// Cell length P (a power of two); a pair of cells has length 2P.
    pub cell: f64,
    pub theta: f64,
    pub leftover: State,
    pub regions: Vec<Region>,
    /// Cutoff in x1 is active on pairs within θ of the faces x1 = ±1.
    pub collar_pairs: u64,
}

/// Profile data of one level at one x1 position: e, I, I2 in physical units.
#[derive(Clone, Copy)]
struct Prof {
    e: f64,
    i1: f64,
    i2: f64,
}

/// Window data of one active level at one (x2, t).
#[derive(Clone, Copy)]
struct LevelWin {
    j: usize,
    cxv: f64,
    cxd: f64,
    cxi: f64,
    ctv: f64,
    ctd: f64,
    gam: f64,
    dgam: f64,
    xtot: f64,
}

struct LevelWins {
    rb: f64,
    pb: f64,
    wins: Vec<LevelWin>,
}

/// Position of x1 inside its pair.
#[derive(Clone, Copy, Debug)]
pub struct CellPos {
    /// Cell coordinate in [0, 1] after reflection.
    pub y: f64,
    pub mirror: bool,
}

impl Oscillation {
    /// The unperturbed oscillation Y ≡ const with one region covering Q.
    pub fn trivial(y: State, branch: usize, level: f64) -> Self {
        let region = Region {
            level: 0,
            branch,
            state: y,
            boxes: vec![TileBox { origin: [-1.0; 3], side: 1.0, counts: [2, 2, 2], period: 2.0, repeats: 1 }],
        };
        Oscillation {
            y,
            branch,
            lambda: level,
            mu: level,
            levels: Vec::new(),
            cell: 1.0,
            theta: 0.5,
            leftover: y,
            regions: vec![region],
            collar_pairs: 0,
        }
    }

    fn window(&self, j: usize) -> Window {
        Window { lo: -1.0 + j as f64 * self.theta, theta: self.theta }
    }

    pub fn pairs(&self) -> u64 {
        (1.0 / self.cell).round() as u64
    }

    /// Splits x1 into its cell position.
    pub fn cell_pos(&self, x1: f64) -> CellPos {
        let pl = 2.0 * self.cell;
        let s = (x1 + 1.0).clamp(0.0, 2.0);
        let k = (s / pl).floor().min(self.pairs() as f64 - 1.0).max(0.0);
        let yp = s - k * pl;
        if yp < self.cell {
            CellPos { y: yp / self.cell, mirror: false }
        } else {
            CellPos { y: (pl - yp) / self.cell, mirror: true }
        }
    }

    fn profile(&self, lv: &Level, pos: CellPos) -> Prof {
        // A level starting at the cell edge needs no band there: its mirror continues it evenly.
        let (h0, h1, h2) = if lv.start == 0.0 { (1.0, pos.y, 0.5 * pos.y * pos.y) } else { band(pos.y - lv.start) };
        let (k0, k1, k2) = band(pos.y - lv.start - lv.width);
        let c = 1.0 + lv.rho;
        let p = self.cell;
        let e = h0 - c * k0;
        let i1 = (h1 - c * k1) * p;
        let i2 = (h2 - c * k2) * p * p;
        if pos.mirror {
            Prof { e, i1: -i1, i2 }
        } else {
            Prof { e, i1, i2 }
        }
    }

    /// η(x1) and η'(x1).
    pub fn eta(&self, x1: f64) -> (f64, f64) {
        if self.levels.is_empty() {
            return (1.0, 0.0);
        }
        let th = self.collar();
        if x1 < -1.0 + th {
            let (v, d, _) = smooth((x1 + 1.0) / th);
            (v, d / th)
        } else if x1 > 1.0 - th {
            let (v, d, _) = smooth((1.0 - x1) / th);
            (v, -d / th)
        } else {
            (1.0, 0.0)
        }
    }

    /// Width of the x1 collar.
    pub fn collar(&self) -> f64 {
        2.0 * self.cell * self.collar_pairs as f64
    }

    /// Perturbation jet at z with the x1 profile given by `pos` and the cutoff by `eta`.
    pub fn jet_with(&self, pos: CellPos, x2: f64, t: f64, eta: (f64, f64)) -> Jet {
        let prof: Vec<Prof> = self.levels.iter().map(|lv| self.profile(lv, pos)).collect();
        self.jet_from(&prof, &self.level_wins(x2, t), eta)
    }

    /// Window data of the levels active at (x2, t).
    fn level_wins(&self, x2: f64, t: f64) -> LevelWins {
        let bump = BumpProfile::new(-1.0, 1.0);
        let mut wins = Vec::with_capacity(self.levels.len());
        for j in 0..self.levels.len() {
            let w = self.window(j);
            let cx = w.eval(x2);
            let ct = w.eval(t);
            // Outside its window a level contributes nothing, including γ which has returned to 0.
            if cx.val == 0.0 && cx.der == 0.0 || ct.val == 0.0 && ct.der == 0.0 {
                continue;
            }
            let xtot = w.total();
            let kappa = xtot / (2.0 * w.theta);
            wins.push(LevelWin {
                j,
                cxv: cx.val,
                cxd: cx.der,
                cxi: cx.int,
                ctv: ct.val,
                ctd: ct.der,
                gam: ct.int - kappa * ct.ramp_len,
                dgam: ct.val - if ct.on_ramp { kappa } else { 0.0 },
                xtot,
            });
        }
        LevelWins { rb: bump.rho(x2), pb: bump.primitive(x2), wins }
    }

    /// Jet from per-level profiles and window data.
    fn jet_from(&self, prof: &[Prof], lw: &LevelWins, eta: (f64, f64)) -> Jet {
        let mut jet = Jet::default();
        let (rb, pb) = (lw.rb, lw.pb);
        let (eta0, eta1) = eta;
        for w in &lw.wins {
            let lv = &self.levels[w.j];
            let pr = prof[w.j];
            let cc = w.cxv * w.ctv;
            let en = pr.e * eta0 + pr.i1 * eta1;
            for i in 0..2 {
                let a = lv.a[i];
                let b = lv.b[i];
                jet.phi[i] += a * pr.i1 * cc;
                jet.dphi.e[2 * i] += a * pr.e * cc;
                jet.dphi.e[2 * i + 1] += a * pr.i1 * w.cxd * w.ctv;
                jet.dtphi[i] += a * pr.i1 * w.cxv * w.ctd;
                let s1 = -b * pr.i1 * w.cxd * eta0;
                let s2 = b * en * w.cxv;
                jet.psi.e[2 * i] += s1 * w.gam;
                jet.psi.e[2 * i + 1] += s2 * w.gam;
                jet.dtpsi.e[2 * i] += s1 * w.dgam;
                jet.dtpsi.e[2 * i + 1] += s2 * w.dgam;
                // ∂1 ψ_1 = -b (e η + I η') γ χ', ∂2 ψ_2 = b (e η + I η') γ χ'.
                let d1 = -b * en * w.cxd * w.gam;
                let d2 = b * en * w.cxd * w.gam;
                jet.div_psi[i] += d1 + d2;
                let g1 = rb * a * pr.i2 * w.xtot;
                let g2 = a * pr.i1 * (w.cxi - pb * w.xtot);
                jet.g.e[2 * i] += g1 * w.ctv;
                jet.g.e[2 * i + 1] += g2 * w.ctv;
                jet.dtg.e[2 * i] += g1 * w.ctd;
                jet.dtg.e[2 * i + 1] += g2 * w.ctd;
                jet.div_g[i] += (rb * a * pr.i1 * w.xtot + a * pr.i1 * (w.cxv - rb * w.xtot)) * w.ctv;
            }
        }
        jet
    }

    /// Perturbation jet at a reference point.
    pub fn jet(&self, z: [f64; 3]) -> Jet {
        if self.levels.is_empty() {
            return Jet::default();
        }
        self.jet_with(self.cell_pos(z[0]), z[1], z[2], self.eta(z[0]))
    }

    /// Perturbed state Y + (Dφ, ∂tψ + l ∂t Rφ) for a pattern of world radius l.
    pub fn state_of(&self, jet: &Jet, l: f64) -> State {
        State::new(self.y.a + jet.dphi, self.y.b + jet.dtpsi + jet.dtg * l)
    }

    pub fn state(&self, z: [f64; 3], l: f64) -> State {
        self.state_of(&self.jet(z), l)
    }

    /// Region index and tile (centre, radius) containing z.
    pub fn region_at(&self, z: [f64; 3]) -> Option<(usize, [f64; 3], f64)> {
        for (r, reg) in self.regions.iter().enumerate() {
            for b in &reg.boxes {
                if let Some(c) = b.locate(z) {
                    return Some((r, c, 0.5 * b.side));
                }
            }
        }
        None
    }

    /// Fraction of |Q| covered by regions of each branch.
    pub fn branch_fractions(&self) -> [f64; 5] {
        let mut f = [0.0; 5];
        for r in &self.regions {
            f[r.branch] += r.volume() / 8.0;
        }
        f
    }

    /// Analytic bounds on sup|φ| and sup|∂tφ|.
    pub fn sup_bounds(&self) -> (f64, f64) {
        let mut s = 0.0;
        for lv in &self.levels {
            s += lv.a[0].hypot(lv.a[1]) * lv.width * self.cell;
        }
        (s, s * 1.5 / self.theta)
    }

    /// x1 breakpoints of the forward cell in cell units.
    fn cell_breaks(&self) -> Vec<f64> {
        let mut v = vec![0.0, 1.0];
        for lv in &self.levels {
            for x in [lv.start, lv.start + lv.width] {
                v.push((x - BAND).max(0.0));
                v.push((x + BAND).min(1.0));
            }
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Breakpoints of the windows on (-1, 1).
    fn window_breaks(&self) -> Vec<f64> {
        let mut v = vec![-1.0, 1.0];
        for j in 0..=self.levels.len() {
            let x = -1.0 + j as f64 * self.theta;
            if x < 0.0 {
                v.push(x);
                v.push(-x);
            }
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// x1 nodes of one cell pair with weights (over the pair, halved) and profiles.
    ///
    /// Transition bands get a single midpoint node: they are 2^-22 of a cell wide.
    fn pair_nodes(&self, rule: &GaussRule) -> Vec<(f64, Vec<Prof>)> {
        let br = self.cell_breaks();
        let mut out = Vec::new();
        for w in br.windows(2) {
            let nodes: Vec<(f64, f64)> =
                if w[1] - w[0] <= 2.0 * BAND * (1.0 + 1e-9) { vec![(0.5 * (w[0] + w[1]), w[1] - w[0])] } else { rule.mapped(w[0], w[1]).collect() };
            for (y, wt) in nodes {
                for mirror in [false, true] {
                    let pos = CellPos { y, mirror };
                    out.push((0.5 * wt, self.levels.iter().map(|lv| self.profile(lv, pos)).collect()));
                }
            }
        }
        out
    }

    /// Pair average of f over x1 at fixed window data and cutoff values.
    fn pair_average<const M: usize>(
        &self,
        nodes: &[(f64, Vec<Prof>)],
        lw: &LevelWins,
        eta: (f64, f64),
        f: &mut dyn FnMut(&Jet) -> [f64; M],
    ) -> [f64; M] {
        let mut s = [0.0; M];
        for (wt, prof) in nodes {
            let v = f(&self.jet_from(prof, lw, eta));
            for m in 0..M {
                s[m] += wt * v[m];
            }
        }
        s
    }

    /// ∫_Q f(jet(z)) w(z) dz with the cell structure in x1 averaged over pairs.
    ///
    /// The pair average is exact for functions of the jet alone up to quadrature error; with a
    /// smooth weight the homogenization error is of order P sup|∂1 w|.
    pub fn integrate(&self, rule: &GaussRule, f: &mut dyn FnMut(&Jet) -> f64, w: &dyn Fn([f64; 3]) -> f64) -> f64 {
        self.integrate_vec::<1>(rule, &mut |j| [f(j)], &|z| [w(z)])
    }

    /// Σ_m ∫_Q f_m(jet(z)) w_m(z) dz in one pass over the pattern.
    pub fn integrate_vec<const M: usize>(
        &self,
        rule: &GaussRule,
        f: &mut dyn FnMut(&Jet) -> [f64; M],
        w: &dyn Fn([f64; 3]) -> [f64; M],
    ) -> f64 {
        self.integrate_parts(rule, f, w).iter().sum()
    }

    /// The M terms ∫_Q f_m(jet(z)) w_m(z) dz, one pass over the pattern.
    pub fn integrate_parts<const M: usize>(
        &self,
        rule: &GaussRule,
        f: &mut dyn FnMut(&Jet) -> [f64; M],
        w: &dyn Fn([f64; 3]) -> [f64; M],
    ) -> [f64; M] {
        let mut total = [0.0; M];
        for n in self.weight_table(rule, f) {
            let wv = w(n.z);
            for m in 0..M {
                total[m] += n.coef * n.value[m] * wv[m];
            }
        }
        total
    }

    /// Nodes z with coefficients and homogenized values such that
    /// ∫_Q f_m(jet) w_m ≈ Σ coef · value_m · w_m(z) for every smooth weight w.
    ///
    /// The jets are evaluated once; the table can then be applied to any number of weights.
    pub fn weight_table<const M: usize>(&self, rule: &GaussRule, f: &mut dyn FnMut(&Jet) -> [f64; M]) -> Vec<TableNode<M>> {
        let mut out = Vec::new();
        if self.levels.is_empty() {
            let value = f(&Jet::default());
            for (x, a) in rule.mapped(-1.0, 1.0) {
                for (y, b) in rule.mapped(-1.0, 1.0) {
                    for (t, c) in rule.mapped(-1.0, 1.0) {
                        out.push(TableNode { z: [x, y, t], coef: a * b * c, value });
                    }
                }
            }
            return out;
        }
        let wb = self.window_breaks();
        let col = self.collar();
        let nodes = self.pair_nodes(rule);
        for px in wb.windows(2) {
            for (x2, a) in rule.mapped(px[0], px[1]) {
                for pt in wb.windows(2) {
                    for (t, b) in rule.mapped(pt[0], pt[1]) {
                        let lw = self.level_wins(x2, t);
                        let mid = self.pair_average(&nodes, &lw, (1.0, 0.0), f);
                        for (x1, c) in rule.mapped(-1.0 + col, 1.0 - col) {
                            out.push(TableNode { z: [x1, x2, t], coef: a * b * c, value: mid });
                        }
                        if col > 0.0 {
                            for (lo, hi) in [(-1.0, -1.0 + col), (1.0 - col, 1.0)] {
                                for (x1, c) in rule.mapped(lo, hi) {
                                    let value = self.pair_average(&nodes, &lw, self.eta(x1), f);
                                    out.push(TableNode { z: [x1, x2, t], coef: a * b * c, value });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// ∫_{Q0} f(jet(x, t)) dx at a fixed reference time.
    pub fn integrate_slice(&self, rule: &GaussRule, t: f64, f: &mut dyn FnMut(&Jet) -> f64) -> f64 {
        if self.levels.is_empty() {
            return 4.0 * f(&Jet::default());
        }
        let wb = self.window_breaks();
        let col = self.collar();
        let nodes = self.pair_nodes(rule);
        let mut total = 0.0;
        for px in wb.windows(2) {
            for (x2, a) in rule.mapped(px[0], px[1]) {
                let lw = self.level_wins(x2, t);
                let mut f1 = |j: &Jet| [f(j)];
                let mut s = self.pair_average::<1>(&nodes, &lw, (1.0, 0.0), &mut f1)[0] * (2.0 - 2.0 * col);
                if col > 0.0 {
                    for (lo, hi) in [(-1.0, -1.0 + col), (1.0 - col, 1.0)] {
                        for (x1, c) in rule.mapped(lo, hi) {
                            s += c * self.pair_average::<1>(&nodes, &lw, self.eta(x1), &mut f1)[0];
                        }
                    }
                }
                total += a * s;
            }
        }
        total
    }

    /// Probe points: one per smooth piece of the pattern in an interior pair and a collar pair.
    pub fn probe_points(&self) -> Vec<[f64; 3]> {
        if self.levels.is_empty() {
            return vec![[0.0; 3]];
        }
        let br = self.cell_breaks();
        let wb = self.window_breaks();
        let mids = |v: &[f64]| -> Vec<f64> { v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect() };
        let ys = mids(&br);
        let ws = mids(&wb);
        let p = self.cell;
        let pair_starts = [-1.0 + 2.0 * p * self.collar_pairs as f64, -1.0 + 0.5 * self.collar()];
        let mut out = Vec::new();
        for base in pair_starts {
            for y in &ys {
                for x1 in [base + y * p, base + 2.0 * p - y * p] {
                    for x2 in &ws {
                        for t in &ws {
                            out.push([x1, *x2, *t]);
                        }
                    }
                }
            }
        }
        out
    }
}

/// One node of a weight table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableNode<const M: usize> {
    pub z: [f64; 3],
    pub coef: f64,
    pub value: [f64; M],
}

/// Postconditions measured on a built oscillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillationCertificate {
    pub max_div_psi: f64,
    pub membership_points: usize,
    pub membership_failures: usize,
    /// Largest level reported by locate over the checked points.
    pub max_level: f64,
    pub max_slice_mean: f64,
    /// Sampled and analytic l sup|φ| + sup|∂tφ|.
    pub sup_sampled: f64,
    pub sup_bound: f64,
    pub eps: f64,
    pub region_state_defect: f64,
    pub region_fraction: [f64; 5],
    pub region_bound: [f64; 5],
    pub total_fraction: f64,
    pub min_nu_tilde: f64,
    pub entry_bound: f64,
    pub resolution: usize,
    pub smoothness: String,
    pub pass: bool,
}

/// A certified oscillation.
#[derive(Clone, Debug)]
pub struct OscillationResult {
    pub osc: Arc<Oscillation>,
    pub expansion: Expansion,
    pub certificate: OscillationCertificate,
}

fn check_request(req: &OscillationRequest, bundle: &ConfigBundle) -> Result<(), OscillateError> {
    let lv = OscillateError::Levels { lambda: req.lambda, mu: req.mu, mu_prime: req.mu_prime };
    if !(req.mu_prime < 1.0 && req.mu_prime > req.mu && req.mu > bundle.nu1.max(bundle.delta1) && (0.0..=req.mu).contains(&req.lambda)) {
        return Err(lv);
    }
    for e in [req.eps, req.measure_eps] {
        if !(e > 0.0 && e < 1.0) {
            return Err(OscillateError::Eps(e));
        }
    }
    let d = (crate::config::point_on_segment(&req.fiber, req.branch, req.lambda) - req.y).norm();
    if d > 1e-9 {
        return Err(OscillateError::NotOnSegment(d));
    }
    Ok(())
}

fn largest_dyadic_below(x: f64) -> f64 {
    2f64.powi(x.log2().floor() as i32)
}

/// Builds a laminate for the request and certifies it at the default resolution.
pub fn build_oscillation(req: &OscillationRequest, bundle: &ConfigBundle) -> Result<OscillationResult, OscillateError> {
    check_request(req, bundle)?;
    let exp = barycentric_expand(req.lambda, req.mu, &req.fiber, req.branch, bundle.nu1, bundle.delta1)?;
    let osc = if req.lambda == req.mu { Oscillation::trivial(req.y, req.branch, req.mu) } else { laminate(req, bundle, &exp)? };
    let osc = Arc::new(osc);
    let certificate = certify(&osc, req, bundle, &exp, &Quadrature::default());
    if !certificate.pass {
        return Err(OscillateError::Certificate(format!("{certificate:?}")));
    }
    Ok(OscillationResult { osc, expansion: exp, certificate })
}

/// Re-certifies a result at the resolution of `quad`.
pub fn verify_oscillation(result: &OscillationResult, req: &OscillationRequest, bundle: &ConfigBundle, quad: &Quadrature) -> OscillationCertificate {
    certify(&result.osc, req, bundle, &result.expansion, quad)
}

/// Appends a level realizing weight t of the remainder after a gap, on the width grid.
///
/// The gap keeps the transition bands of successive levels apart, so that every band joins
/// two states on one rank-one segment. Returns false once the remainder would vanish.
fn push_level(k: usize, t: f64, gap: f64, end: &mut f64, plan: &mut Vec<(usize, f64, f64)>, realized: &mut [f64; 5]) -> bool {
    let snap = |x: f64| (x / WIDTH_GRID).round() * WIDTH_GRID;
    let start = if plan.is_empty() { 0.0 } else { *end + snap(gap * (1.0 - *end)).max(8.0 * BAND) };
    let w = snap(t * (1.0 - start)).max(WIDTH_GRID);
    if 1.0 - (start + w) < 16.0 * WIDTH_GRID {
        return false;
    }
    plan.push((k, start, w));
    *end = start + w;
    realized[k] += w;
    true
}

fn laminate(req: &OscillationRequest, bundle: &ConfigBundle, exp: &Expansion) -> Result<Oscillation, OscillateError> {
    let le = req.measure_eps;
    let gap = le / 256.0;
    let t = req.fiber.lam.map(|l| l / req.mu);
    // Chain order: X_i first (weight λ/μ), then X_{i-1}, X_{i-2}, ... out of the remainder.
    let mut plan: Vec<(usize, f64, f64)> = Vec::new();
    let mut realized = [0.0; 5];
    let mut end = 0.0;
    if req.lambda > 0.0 {
        push_level(req.branch, req.lambda / req.mu, gap, &mut end, &mut plan, &mut realized);
    }
    let mut k = (req.branch + 4) % 5;
    while plan.len() < MAX_LEVELS {
        let done = (0..5).all(|m| realized[m] >= (1.0 - le / 4.0) * exp.y_weights[m]);
        if done || !push_level(k, t[k], gap, &mut end, &mut plan, &mut realized) {
            break;
        }
        k = (k + 4) % 5;
    }
    // Profile levels with exact remainders.
    let mut levels = Vec::with_capacity(plan.len());
    let mut base = req.y;
    for (j, (k, start, w)) in plan.iter().enumerate() {
        let v = exp.targets[*k] - base;
        let tol = 1e-9 * (1.0 + v.norm());
        if v.a.at(0, 1).abs() > tol || v.a.at(1, 1).abs() > tol || v.b.at(0, 0).abs() > tol || v.b.at(1, 0).abs() > tol {
            return Err(OscillateError::WaveCone(j));
        }
        let rho = w / (1.0 - start - w);
        levels.push(Level { target: *k, v, a: v.a.col(0), b: v.b.col(1), start: *start, width: *w, rho });
        base = base - v * rho;
    }
    let nl = levels.len();
    let theta = largest_dyadic_below(le / (8.0 * (nl as f64 + 2.0))).min(0.125);
    // Tube slack and the P-independent collar deviation of ∂tψ on the time ramps.
    let slack = 0.25 * bundle.tube_radius();
    // At any time at most one level is on its time ramp, so the worst level bounds it.
    let mut dev_b: f64 = 0.0;
    for (j, lv) in levels.iter().enumerate() {
        let w = Window { lo: -1.0 + j as f64 * theta, theta };
        let kappa = w.total() / (2.0 * theta);
        dev_b = dev_b.max(lv.b[0].hypot(lv.b[1]) * (1.0 + lv.rho) * (1.0 + kappa) * 1.5);
    }
    if dev_b > 0.5 * slack {
        return Err(OscillateError::Slack { deviation: dev_b, slack });
    }
    let sa: f64 = levels.iter().map(|lv| lv.a[0].hypot(lv.a[1]) * lv.width).sum();
    let sb: f64 = levels.iter().map(|lv| lv.b[0].hypot(lv.b[1]) * lv.width * (1.0 + lv.rho)).sum();
    let kmax = 1.0 / theta;
    let mut cell = theta / 2.0;
    loop {
        let c_bound = cell * sa * (req.scale + 1.5 / theta);
        let dev = cell * sa * 1.5 / theta * (1.0 + 4.0 * req.scale) + cell * sb * (1.0 + kmax) * 3.0 / theta;
        if c_bound <= 0.5 * req.eps && dev + dev_b <= 0.5 * slack {
            break;
        }
        cell *= 0.5;
        if cell < 1e-30 {
            return Err(OscillateError::CellLength);
        }
    }
    let pairs = (1.0 / cell).round() as u64;
    let collar_pairs = ((theta / (2.0 * cell)).round() as u64).max(1);
    // Regions: each X interval minus its bands, inside the window interior, on interior pairs.
    let mut regions = Vec::with_capacity(nl);
    for (j, lv) in levels.iter().enumerate() {
        let lo = -1.0 + (j as f64 + 1.0) * theta;
        let span = -2.0 * lo;
        let len = (lv.width - 2.0 * BAND) * cell;
        let side = largest_dyadic_below(len * le / 16.0).min(theta);
        let nx = (len / side).floor() as u64;
        let nw = (span / side).round() as u64;
        if nx == 0 || nw == 0 {
            continue;
        }
        let first = -1.0 + 2.0 * cell * collar_pairs as f64;
        let fwd = first + (lv.start + BAND) * cell;
        let mir = first + 2.0 * cell - (lv.start + BAND) * cell - nx as f64 * side;
        let reps = pairs - 2 * collar_pairs;
        let mk = |x0: f64| TileBox { origin: [x0, lo, lo], side, counts: [nx, nw, nw], period: 2.0 * cell, repeats: reps };
        regions.push(Region { level: j, branch: lv.target, state: exp.targets[lv.target], boxes: vec![mk(fwd), mk(mir)] });
    }
    Ok(Oscillation {
        y: req.y,
        branch: req.branch,
        lambda: req.lambda,
        mu: req.mu,
        levels,
        cell,
        theta,
        leftover: base,
        regions,
        collar_pairs,
    })
}

fn certify(osc: &Oscillation, req: &OscillationRequest, bundle: &ConfigBundle, exp: &Expansion, quad: &Quadrature) -> OscillationCertificate {
    let l = req.scale;
    let mut pts = quad.subgrid();
    pts.extend(osc.probe_points());
    let mut max_div: f64 = 0.0;
    let mut failures = 0;
    let mut max_level: f64 = 0.0;
    let mut sup: f64 = 0.0;
    for z in &pts {
        let j = osc.jet(*z);
        max_div = max_div.max(j.div_psi[0].abs()).max(j.div_psi[1].abs());
        sup = sup.max(l * j.phi[0].hypot(j.phi[1]) + j.dtphi[0].hypot(j.dtphi[1]));
        match bundle.locate(&osc.state_of(&j, l), req.mu_prime) {
            Some(m) if m.lambda < req.mu_prime => max_level = max_level.max(m.lambda),
            _ => failures += 1,
        }
    }
    // Slice means: every level's x1 primitive I2 vanishes at x1 = ±1.
    let mut max_mean: f64 = 0.0;
    let rule = GaussRule::new(3);
    for s in 0..quad.resolution {
        let t = -1.0 + (2 * s + 1) as f64 / quad.resolution as f64;
        for i in 0..2 {
            let m = osc.integrate_slice(&rule, t, &mut |j: &Jet| j.phi[i]);
            max_mean = max_mean.max(m.abs());
        }
    }
    let mut defect: f64 = 0.0;
    for r in &osc.regions {
        for b in &r.boxes {
            let mut c = [0.0; 3];
            for ax in 0..3 {
                c[ax] = b.origin[ax] + 0.5 * b.side;
            }
            let last = [
                b.origin[0] + (b.repeats - 1) as f64 * b.period + (b.counts[0] as f64 - 0.5) * b.side,
                b.origin[1] + (b.counts[1] as f64 - 0.5) * b.side,
                b.origin[2] + (b.counts[2] as f64 - 0.5) * b.side,
            ];
            for z in [c, last] {
                defect = defect.max((osc.state(z, l) - r.state).norm());
            }
        }
    }
    let frac = osc.branch_fractions();
    let le = req.measure_eps;
    let bound = exp.y_weights.map(|w| (1.0 - le) * w);
    let total: f64 = frac.iter().sum();
    let (s0, s1) = osc.sup_bounds();
    let sup_bound = l * s0 + s1;
    let entry_bound = (req.mu - bundle.nu1).powi(4) * bundle.nu0;
    let min_nu = exp.min_entry();
    let trivial = osc.levels.is_empty();
    let regions_ok = (0..5).all(|k| frac[k] > bound[k] || (trivial && k != req.branch));
    let pass = max_div <= 1e-8
        && failures == 0
        && max_mean <= 1e-8
        && sup.max(sup_bound) < req.eps
        && defect <= 1e-8
        && regions_ok
        && total > 1.0 - le
        && min_nu > entry_bound;
    OscillationCertificate {
        max_div_psi: max_div,
        membership_points: pts.len(),
        membership_failures: failures,
        max_level,
        max_slice_mean: max_mean,
        sup_sampled: sup,
        sup_bound,
        eps: req.eps,
        region_state_defect: defect,
        region_fraction: frac,
        region_bound: bound,
        total_fraction: total,
        min_nu_tilde: min_nu,
        entry_bound,
        resolution: quad.resolution,
        smoothness: "piecewise C1, certified at sample resolution".into(),
        pass,
    }
}

/// The request for the level-μ splitting of Y = λ ξ_i + (1 - λ) π_i on `fiber`.
pub fn request_for(
    fiber: &T5Fiber,
    branch: usize,
    lambda: f64,
    mu: f64,
    mu_prime: f64,
    eps: f64,
    measure_eps: f64,
    scale: f64,
) -> OscillationRequest {
    OscillationRequest {
        y: crate::config::point_on_segment(fiber, branch, lambda),
        branch,
        lambda,
        mu,
        mu_prime,
        fiber: fiber.clone(),
        eps,
        measure_eps,
        scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::pentagon_bundle;

    fn req(lambda: f64, eps: f64) -> (OscillationRequest, ConfigBundle) {
        let b = pentagon_bundle(0.1, 0.6, 0.6);
        let r = request_for(b.center(), 0, lambda, 0.9, 0.95, eps, eps, 0.0625);
        (r, b)
    }

    #[test]
    fn window_integrates_consistently() {
        let w = Window { lo: -1.0 + 0.25, theta: 0.125 };
        let g = GaussRule::new(4);
        let mut s = 0.0;
        for p in [-1.0, -0.75, -0.625, 0.625, 0.75, 1.0].windows(2) {
            s += g.integrate(p[0], p[1], |x| w.eval(x).val);
        }
        assert!((s - w.total()).abs() < 1e-14);
        assert!((w.eval(1.0).int - w.total()).abs() < 1e-14);
        let part = g.integrate(-0.75, -0.625, |x| w.eval(x).val) + g.integrate(-0.625, 0.3, |x| w.eval(x).val);
        assert!((w.eval(0.3).int - part).abs() < 1e-14);
    }

    #[test]
    fn trivial_request_gives_zero_perturbation() {
        let (r, b) = req(0.9, 0.1);
        let res = build_oscillation(&r, &b).unwrap();
        assert!(res.osc.levels.is_empty());
        assert_eq!(res.osc.jet([0.1, 0.2, 0.3]), Jet::default());
        assert!(res.certificate.region_fraction[0] > 0.9);
    }

    #[test]
    fn zero_level_request_certifies() {
        let (r, b) = req(0.0, 0.1);
        let res = build_oscillation(&r, &b).unwrap();
        let c = &res.certificate;
        assert!(c.pass, "{c:?}");
        assert!(c.total_fraction > 0.9);
    }

    #[test]
    fn random_points_stay_in_the_set() {
        use rand::{Rng, SeedableRng};
        let b = pentagon_bundle(0.1, 0.6, 0.6);
        for (branch, lambda) in [(0, 0.0), (2, 0.5), (4, 0.85)] {
            let r = request_for(b.center(), branch, lambda, 0.9, 0.95, 0.05, 0.01, 0.03);
            let res = build_oscillation(&r, &b).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(branch as u64);
            for _ in 0..4000 {
                let z = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
                let st = res.osc.state(z, r.scale);
                assert!(b.locate(&st, r.mu_prime).is_some(), "{z:?} branch {branch}");
            }
        }
    }

    #[test]
    fn tight_budgets_still_certify() {
        let b = pentagon_bundle(0.1, 0.6, 0.6);
        let r = request_for(b.center(), 1, 0.7, 0.8, 0.85, 0.011, 0.002, 1.0 / 64.0);
        let res = build_oscillation(&r, &b).unwrap();
        let c = &res.certificate;
        assert!(c.total_fraction > 0.998, "{c:?}");
        assert!(c.sup_bound < 0.011);
    }
}
