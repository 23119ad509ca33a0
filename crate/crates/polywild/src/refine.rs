//! One refinement stage: from a subsolution at levels (λ, λ′) to one at (μ, μ′).
//!
//! Hosts are the cubes on which the current state is constant: the top cubes of a constant
//! seed at the first stage, and the target-region tiles of the newest patches afterwards.
//! Each host receives a rescaled laminate; everything else is kept verbatim.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{point_on_segment, ConfigBundle};
use crate::fields::{trace_sup, vitali_cover, Atom, Cube, FieldError, Leaf, Patch, Probe, SpaceTimeField};
use crate::oscillate::{build_oscillation, request_for, OscillateError, OscillationCertificate};
use crate::quadrature::{GaussRule, Quadrature};
use crate::{Energy, State};

/// Tolerance for reproducing a host state from its located segment point.
pub const INVERSION_TOL: f64 = 1e-7;
/// Sampled bound for |u - div v| and for the Dirichlet traces.
pub const DIV_TOL: f64 = 1e-8;

/// Levels and scales of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub lambda: f64,
    pub lambda_prime: f64,
    pub mu: f64,
    pub mu_prime: f64,
    pub eps: f64,
    /// Derived from the other fields by `choose_epsilon_prime`.
    pub eps_prime: f64,
    /// Relative measure loss allowed to the new target regions of each host.
    pub measure_eps: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("stage levels violate 0 <= lambda < lambda' < mu < mu' < 1, mu > max(nu1, delta1), lambda = 0 or lambda >= delta1: {0:?}")]
    Params(StageParams),
    #[error("eps must lie in (0,1), got {0}")]
    Eps(f64),
    #[error("no admissible dyadic eps'")]
    EpsPrime,
    #[error("input is not a certified subsolution: {0}")]
    Precondition(String),
    #[error("host at {0:?} is not a constant state")]
    Host([f64; 3]),
    #[error("postcondition failed: {failed:?}")]
    Postcondition { failed: Vec<String>, report: Box<RefineReport> },
    #[error(transparent)]
    Oscillate(#[from] OscillateError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

impl StageParams {
    /// Validated parameters with ε′ derived and the measure loss defaulting to ε′.
    pub fn new(lambda: f64, lambda_prime: f64, mu: f64, mu_prime: f64, eps: f64, bundle: &ConfigBundle) -> Result<Self, RefineError> {
        let mut p = Self { lambda, lambda_prime, mu, mu_prime, eps, eps_prime: 0.0, measure_eps: 0.0 };
        p.check(bundle)?;
        p.eps_prime = choose_epsilon_prime(&p, bundle)?;
        p.measure_eps = p.eps_prime;
        Ok(p)
    }

    pub fn with_measure_eps(mut self, m: f64) -> Self {
        self.measure_eps = m;
        self
    }

    pub fn check(&self, bundle: &ConfigBundle) -> Result<(), RefineError> {
        let ordered = 0.0 <= self.lambda
            && self.lambda < self.lambda_prime
            && self.lambda_prime < self.mu
            && self.mu < self.mu_prime
            && self.mu_prime < 1.0;
        let disjoint = self.lambda == 0.0 || self.lambda >= bundle.delta1;
        if !(ordered && disjoint && self.mu > bundle.nu1.max(bundle.delta1)) {
            return Err(RefineError::Params(*self));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(RefineError::Eps(self.eps));
        }
        Ok(())
    }

    /// ½(μ - λ′)(μ - ν₁)⁴ν₀, the per-cube lower bound for every target branch.
    pub fn branch_bound(&self, bundle: &ConfigBundle) -> f64 {
        0.5 * (self.mu - self.lambda_prime) * (self.mu - bundle.nu1).powi(4) * bundle.nu0
    }
}

/// Largest 2^-k (k ≥ 2) below eps and 1/2 with (1-ε′)²(λ/μ + (μ-λ′)(μ-ν₁)⁴ν₀) ≥ λ/μ + 1e-6.
pub fn choose_epsilon_prime(p: &StageParams, bundle: &ConfigBundle) -> Result<f64, RefineError> {
    p.check(bundle)?;
    let r = p.lambda / p.mu;
    let gain = (p.mu - p.lambda_prime) * (p.mu - bundle.nu1).powi(4) * bundle.nu0;
    for k in 2..=1074 {
        let e = 2f64.powi(-k);
        if e >= p.eps || e >= 0.5 {
            continue;
        }
        if (1.0 - e).powi(2) * (r + gain) - r >= 1e-6 || (p.lambda == 0.0 && gain > 0.0) {
            return Ok(e);
        }
    }
    Err(RefineError::EpsPrime)
}

/// Knobs of the sampled certificates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineSettings {
    pub quad: Quadrature,
    /// Random hierarchical probes per membership check.
    pub probes: usize,
    pub seed: u64,
    /// Largest number of radius halvings at the first stage.
    pub max_halvings: u32,
    /// Gauss order of the structural integrals (drift, residual).
    pub diag_order: usize,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self { quad: Quadrature::default(), probes: 2000, seed: 0, max_halvings: 20, diag_order: 3 }
    }
}

/// Sampled subsolution check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleCheck {
    pub points: usize,
    pub failures: usize,
    pub max_div_defect: f64,
    pub max_level: f64,
}

/// Checks u = div v and (Du, ∂t v) ∈ Σ(level) on the domain subgrid and on random probes.
pub fn check_subsolution(f: &SpaceTimeField, bundle: &ConfigBundle, level: f64, quad: &Quadrature, probes: usize, seed: u64) -> SampleCheck {
    let d = f.domain;
    let mut pts: Vec<Probe> = quad
        .subgrid()
        .into_iter()
        .filter_map(|z| f.probe([0, 1, 2].map(|k| d.lo[k] + 0.5 * (z[k] + 1.0) * (d.hi[k] - d.lo[k]))).ok())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pts.extend((0..probes).map(|_| f.random_probe(&mut rng)));
    let samples: Vec<_> = pts.par_iter().map(|p| f.sample_probe(p)).collect();
    let mut out = SampleCheck { points: samples.len(), failures: 0, max_div_defect: 0.0, max_level: 0.0 };
    for s in &samples {
        out.max_div_defect = out.max_div_defect.max(s.div_defect());
        match bundle.locate(&s.state(), level) {
            Some(m) if m.lambda < level => out.max_level = out.max_level.max(m.lambda),
            _ => out.failures += 1,
        }
    }
    out
}

/// One class of new cubes: all instances of one host pattern share the same new laminate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeClass {
    pub branch: usize,
    /// Level of the host state on its branch.
    pub level: f64,
    pub radius: f64,
    /// Number of cubes in the class.
    pub count: f64,
    /// Label → fraction of each cube: "S1".."S5" at level μ and "other".
    pub fractions: BTreeMap<String, f64>,
    pub k_fraction: f64,
    pub certificate: OscillationCertificate,
}

/// One inequality with its measured margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl Bound {
    /// lhs < rhs.
    pub fn below(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self { name: name.into(), lhs, rhs, pass: lhs < rhs }
    }

    /// lhs ≥ rhs.
    pub fn above(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self { name: name.into(), lhs, rhs, pass: lhs >= rhs }
    }

    pub fn margin(&self) -> f64 {
        (self.rhs - self.lhs).abs()
    }
}

/// Measured quantities of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub params: StageParams,
    pub classes: Vec<CubeClass>,
    pub precondition: SampleCheck,
    pub postcondition: SampleCheck,
    /// Measure of the hosts (the refined part of the classified sets) and of G_0.
    pub host_measure: [f64; 5],
    pub g0_measure: f64,
    pub domain_measure: f64,
    /// Largest l sup|φ| + sup|∂tφ| over the new patterns, analytic and sampled.
    pub linf_drift: f64,
    pub linf_sampled: f64,
    pub l1_drift: f64,
    /// l1_drift / [|G_0| + (eps + μ - λ)|G|].
    pub c_meas: f64,
    pub max_trace: f64,
    pub k_fraction: f64,
    pub branch_fractions: [f64; 5],
    pub residual_l1: f64,
    pub bounds: Vec<Bound>,
    pub pass: bool,
}

/// The refined field with its report. The field carries both ũ and ṽ.
#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub field: SpaceTimeField,
    pub report: RefineReport,
}

struct Host {
    branch: usize,
    state: State,
    radius: f64,
    count: f64,
}

type Key = (usize, [u64; 8], u64);

fn key(branch: usize, y: &State, radius: f64) -> Key {
    let v = y.to_array();
    (branch, v.map(f64::to_bits), radius.to_bits())
}

/// Locates a constant host state at its exact level on `branch` and returns the rescaled request
/// level, or the smallest located level when the branch is unknown.
fn host_level(bundle: &ConfigBundle, y: &State, lambda: f64, lambda_prime: f64) -> Result<(usize, f64, crate::T5Fiber), RefineError> {
    let m = bundle
        .locate(y, lambda_prime)
        .filter(|m| m.lambda < lambda_prime)
        .ok_or_else(|| RefineError::Precondition("host state outside the admissible set".into()))?;
    // On G_k the level is λ itself; elsewhere the located level is used.
    let level = if (m.lambda - lambda).abs() <= INVERSION_TOL { lambda } else { m.lambda };
    let m = bundle.locate_at_level(y, m.branch, level).unwrap_or(m);
    let fiber = bundle.fiber(&m.q);
    let d = (point_on_segment(&fiber, m.branch, level) - *y).norm();
    if d > INVERSION_TOL {
        return Err(RefineError::Precondition(format!("host state reproduced to {d:e} only")));
    }
    Ok((m.branch, level, fiber))
}

/// The certified patch of a host, its request level and ∫_Q |Dφ|.
fn build_patch(bundle: &ConfigBundle, p: &StageParams, h: &Host, rule: &GaussRule) -> Result<(Patch, f64, f64), RefineError> {
    let (branch, level, fiber) = host_level(bundle, &h.state, p.lambda, p.lambda_prime)?;
    debug_assert_eq!(branch, h.branch);
    let req = request_for(&fiber, branch, level, p.mu, p.mu_prime, p.eps, p.measure_eps, h.radius);
    let res = build_oscillation(&req, bundle)?;
    let grad = res.osc.integrate(rule, &mut |j| j.dphi.norm(), &|_| 1.0);
    Ok((Patch::new(res.osc, h.radius, Some(res.certificate)), level, grad))
}

/// Collects hosts below a patch: regions without child at level λ, weighted by instance count.
fn collect_hosts(p: &Arc<Patch>, count: f64, lambda: f64, out: &mut BTreeMap<Key, Host>, seen: &mut HashMap<*const Patch, f64>) {
    *seen.entry(Arc::as_ptr(p)).or_insert(0.0) += count;
    for (r, reg) in p.osc.regions.iter().enumerate() {
        let n: f64 = reg.boxes.iter().map(|b| b.tiles()).sum();
        match &p.children[r] {
            Some(c) => collect_hosts(c, count * n, lambda, out, seen),
            None if p.osc.mu == lambda => {
                let radius = p.tile_scale(r);
                let h = out.entry(key(reg.branch, &reg.state, radius)).or_insert(Host { branch: reg.branch, state: reg.state, radius, count: 0.0 });
                h.count += count * n;
            }
            None => {}
        }
    }
}

fn attach_children(p: &Arc<Patch>, lambda: f64, built: &BTreeMap<Key, Arc<Patch>>, memo: &mut HashMap<*const Patch, Arc<Patch>>) -> Arc<Patch> {
    if let Some(n) = memo.get(&Arc::as_ptr(p)) {
        return n.clone();
    }
    let mut np = (**p).clone();
    for (r, reg) in p.osc.regions.iter().enumerate() {
        np.children[r] = match &p.children[r] {
            Some(c) => Some(attach_children(c, lambda, built, memo)),
            None if p.osc.mu == lambda => built.get(&key(reg.branch, &reg.state, p.tile_scale(r))).cloned(),
            None => None,
        };
    }
    let np = Arc::new(np);
    memo.insert(Arc::as_ptr(p), np.clone());
    np
}

/// Refines every constant-state host of `field` from level λ to level μ.
pub fn refine_step(
    field: &SpaceTimeField,
    p: &StageParams,
    bundle: &ConfigBundle,
    energy: &Energy,
    settings: &RefineSettings,
) -> Result<RefineOutcome, RefineError> {
    p.check(bundle)?;
    let quad = &settings.quad;
    let rule = GaussRule::new(settings.diag_order);
    let pre = check_subsolution(field, bundle, p.lambda_prime, quad, settings.probes, settings.seed);
    if pre.failures > 0 || pre.max_div_defect > DIV_TOL {
        return Err(RefineError::Precondition(format!("{pre:?}")));
    }
    let domain_measure = field.domain.volume();
    let mut hosts: BTreeMap<Key, Host> = BTreeMap::new();
    let first = field.leaves.is_empty();
    let mut top: Vec<Cube> = Vec::new();
    if first {
        let y = field.base.constant_state().ok_or(RefineError::Host(field.domain.lo))?;
        let (branch, _, _) = host_level(bundle, &y, p.lambda, p.lambda_prime)?;
        let d = field.domain;
        let side = (0..3).map(|k| d.hi[k] - d.lo[k]).fold(0.0, f64::max);
        let bound = Cube::new([0, 1, 2].map(|k| d.lo[k] + 0.5 * side), 0.5 * side)?;
        let cover = vitali_cover(&|z| d.contains(z), bound, 0.5 * p.eps, 1e-3, 40)?;
        top = cover.cubes;
        let radius = top.iter().map(|c| c.radius).fold(0.0, f64::max);
        hosts.insert(key(branch, &y, radius), Host { branch, state: y, radius, count: top.len() as f64 });
    } else {
        if field.base.constant_state().is_none() {
            return Err(RefineError::Host(field.domain.lo));
        }
        let mut seen = HashMap::new();
        for lf in &field.leaves {
            if let Atom::Patch(pt) = &lf.atom {
                collect_hosts(pt, 1.0, p.lambda, &mut hosts, &mut seen);
            }
        }
    }

    // Independent builds, merged in key order.
    let mut list: Vec<(&Key, &Host)> = hosts.iter().collect();
    list.sort_by(|a, b| a.0.cmp(b.0));
    let results: Vec<Result<(Patch, f64, f64), RefineError>> = list
        .par_iter()
        .map(|(_, h)| {
            let mut h = Host { branch: h.branch, state: h.state, radius: h.radius, count: h.count };
            // Only the first stage may shrink its cubes.
            let tries = if first { settings.max_halvings } else { 0 };
            let mut last = None;
            for _ in 0..=tries {
                match build_patch(bundle, p, &h, &rule) {
                    Ok(x) => return Ok(x),
                    Err(RefineError::Oscillate(e @ (OscillateError::CellLength | OscillateError::Slack { .. } | OscillateError::Certificate(_)))) => {
                        last = Some(e);
                        h.radius *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(RefineError::Oscillate(last.expect("at least one try")))
        })
        .collect();
    let mut built: BTreeMap<Key, Arc<Patch>> = BTreeMap::new();
    let mut classes = Vec::new();
    let mut l1_drift = 0.0;
    let mut host_measure = [0.0; 5];
    let mut k_gain = [0.0; 5];
    for ((k, h), r) in list.iter().zip(results) {
        let (patch, level, grad) = r?;
        let cert = patch.certificate.clone().expect("built patches are certified");
        // At the first stage the cubes may have shrunk: re-tile the host cubes.
        let count = h.count * (h.radius / patch.scale).powi(3);
        let vol = count * 8.0 * patch.scale.powi(3);
        host_measure[h.branch] += vol;
        k_gain[h.branch] += vol * cert.region_fraction[h.branch];
        l1_drift += count * patch.scale.powi(3) * grad;
        let mut fractions = BTreeMap::new();
        for j in 0..5 {
            fractions.insert(format!("S{}", j + 1), cert.region_fraction[j]);
        }
        fractions.insert("other".into(), 1.0 - cert.total_fraction);
        classes.push(CubeClass {
            branch: h.branch,
            level,
            radius: patch.scale,
            count,
            fractions,
            k_fraction: cert.total_fraction,
            certificate: cert,
        });
        built.insert(**k, Arc::new(patch));
    }

    let new_field = if first {
        let patch = built.values().next().expect("one host").clone();
        let mut leaves = Vec::new();
        for c in &top {
            let n = (c.radius / patch.scale).round() as usize;
            let sub = if n <= 1 { vec![*c] } else { split(*c, n) };
            leaves.extend(sub.into_iter().map(|cube| Leaf { cube, atom: Atom::Patch(patch.clone()) }));
        }
        SpaceTimeField::with_leaves(field.domain, field.base.clone(), leaves)?
    } else {
        let mut memo = HashMap::new();
        field.map_patches(&mut |_, pt| attach_children(pt, p.lambda, &built, &mut memo))
    };

    let post = check_subsolution(&new_field, bundle, p.mu_prime, quad, settings.probes, settings.seed ^ 0x5eed);
    let max_trace = built
        .values()
        .map(|pt| trace_sup(&Atom::Patch(pt.clone()), Cube { center: [0.0; 3], radius: pt.scale }))
        .fold(0.0, f64::max);
    let linf_drift = classes.iter().map(|c| c.certificate.sup_bound).fold(0.0, f64::max);
    let linf_sampled = classes.iter().map(|c| c.certificate.sup_sampled).fold(0.0, f64::max);
    let g: f64 = host_measure.iter().sum();
    let g0 = (domain_measure - g).max(0.0);
    let c_meas = l1_drift / (g0 + (p.eps + p.mu - p.lambda) * domain_measure);
    let residual_l1 = new_field.integral_state(&rule, &|s| energy.residual(s).norm())?;
    let branch_fractions = new_field.branch_fractions_at(p.mu);
    let k_fraction = branch_fractions.iter().sum();

    let mut bounds = vec![
        Bound::below("radius < eps", classes.iter().map(|c| c.radius).fold(0.0, f64::max), p.eps),
        Bound::below("membership failures in Sigma(mu')", post.failures as f64, 0.5),
        Bound::below("|u - div v|", post.max_div_defect, DIV_TOL * (1.0 + 1e-12)),
        Bound::below("Dirichlet trace", max_trace, DIV_TOL * (1.0 + 1e-12)),
        Bound::below("l sup|phi| + sup|d_t phi|", linf_drift, p.eps),
    ];
    let eb = p.branch_bound(bundle);
    for c in &classes {
        bounds.push(Bound::above(format!("K-fraction on class b{} r{:e}", c.branch + 1, c.radius), c.k_fraction, 1.0 - p.eps));
        let worst = (0..5).map(|j| c.certificate.region_fraction[j]).fold(f64::INFINITY, f64::min);
        bounds.push(Bound::above(format!("min S-fraction on class b{} r{:e}", c.branch + 1, c.radius), worst, eb));
    }
    let ratio = p.lambda / p.mu;
    for k in 0..5 {
        bounds.push(Bound::above(format!("S{} mass", k + 1), k_gain[k], ratio * host_measure[k]));
    }
    let pass = bounds.iter().all(|b| b.pass);
    let report = RefineReport {
        params: *p,
        classes,
        precondition: pre,
        postcondition: post,
        host_measure,
        g0_measure: g0,
        domain_measure,
        linf_drift,
        linf_sampled,
        l1_drift,
        c_meas,
        max_trace,
        k_fraction,
        branch_fractions,
        residual_l1,
        bounds,
        pass,
    };
    if !pass {
        let failed = report.bounds.iter().filter(|b| !b.pass).map(|b| b.name.clone()).collect();
        return Err(RefineError::Postcondition { failed, report: Box::new(report) });
    }
    Ok(RefineOutcome { field: new_field, report })
}

/// The n³ equal subcubes of a cube.
fn split(c: Cube, n: usize) -> Vec<Cube> {
    let r = c.radius / n as f64;
    let lo = c.lo();
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let m = [i, j, k];
                out.push(Cube { center: [0, 1, 2].map(|a| lo[a] + (2 * m[a] + 1) as f64 * r), radius: r });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::pentagon_bundle;

    #[test]
    fn epsilon_prime_examples() {
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let p = StageParams::new(0.5, 0.7, 0.9, 0.95, 0.1, &b).unwrap();
        assert_eq!(p.eps_prime, 2f64.powi(-12));
        let p = StageParams::new(0.0, 0.5, 0.9, 0.95, 0.1, &b).unwrap();
        assert_eq!(p.eps_prime, 0.0625);
        let p = StageParams::new(0.0, 0.5, 0.9, 0.95, 1e-5, &b).unwrap();
        assert_eq!(p.eps_prime, 2f64.powi(-17));
        assert!(StageParams::new(0.3, 0.5, 0.9, 0.95, 0.1, &pentagon_bundle(0.2, 0.6, 0.5)).is_err());
    }

    #[test]
    fn split_tiles_the_cube() {
        let c = Cube::new([0.25; 3], 0.25).unwrap();
        let s = split(c, 2);
        assert_eq!(s.len(), 8);
        assert!((s.iter().map(|x| x.volume()).sum::<f64>() - c.volume()).abs() < 1e-15);
        assert_eq!(s[0].center, [0.125; 3]);
    }

    fn first_stage(b: &ConfigBundle) -> (RefineOutcome, StageParams) {
        let p = StageParams::new(0.0, 0.7, 0.9, 0.95, 0.1, b).unwrap();
        let f = SpaceTimeField::zero(crate::fields::DomainBox::unit());
        let e = Energy::quadratic(1.0);
        (refine_step(&f, &p, b, &e, &RefineSettings::default()).unwrap(), p)
    }

    #[test]
    fn first_stage_certifies() {
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let (out, p) = first_stage(&b);
        let r = &out.report;
        assert!(r.pass, "{:?}", r.bounds);
        assert!((p.branch_bound(&b) - 1.62e-4).abs() < 1e-12);
        assert_eq!(r.classes.len(), 1);
        assert!(r.classes[0].radius < 0.1);
        assert!(r.k_fraction > 0.9 && r.g0_measure < 1e-12);
        assert!(r.max_trace <= DIV_TOL && r.postcondition.max_div_defect <= DIV_TOL);
    }

    #[test]
    fn second_stage_refines_region_tiles() {
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let (out, p1) = first_stage(&b);
        let p2 = StageParams::new(0.9, 0.925, 0.95, 0.975, 1.0 / 30.0, &b).unwrap().with_measure_eps(0.0025);
        let e = Energy::quadratic(1.0);
        let out2 = refine_step(&out.field, &p2, &b, &e, &RefineSettings::default()).unwrap();
        let r = &out2.report;
        assert!(r.pass, "{:?}", r.bounds);
        assert!((0..5).all(|k| r.classes.iter().any(|c| c.branch == k)));
        assert!((r.host_measure.iter().sum::<f64>() - out.report.k_fraction).abs() < 1e-9);
        // Cumulative loss: the new K-fraction stays above 1 - eps1 - eps2 losses.
        assert!(r.k_fraction > out.report.k_fraction * (1.0 - 0.0025) - 1e-9);
        assert!(r.k_fraction > 1.0 - p1.measure_eps - 0.0025);
    }

    #[test]
    fn corrupted_input_is_rejected() {
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let p = StageParams::new(0.0, 0.7, 0.9, 0.95, 0.1, &b).unwrap();
        let far = State::from_array([5.0; 8]);
        let f = SpaceTimeField::new(crate::fields::DomainBox::unit(), crate::fields::BaseField::Affine(crate::fields::AffineState { u0: [0.0; 2], a: far.a, b: far.b }));
        let e = Energy::quadratic(1.0);
        assert!(matches!(refine_step(&f, &p, &b, &e, &RefineSettings::default()), Err(RefineError::Precondition(_))));
    }
}
