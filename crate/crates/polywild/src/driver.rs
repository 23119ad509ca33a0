//! The staged iteration: schedules, seeds, refinement runs and the reports built on them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::antidiv::antidiv_rect;
use crate::config::{separation_delta, ConfigBundle, ConfigError};
use crate::fields::{Atom, BaseField, DomainBox, FieldError, Probe, SeedField, SpaceTimeField, SpatialBump};
use crate::quadrature::{GaussRule, Quadrature};
use crate::refine::{check_subsolution, refine_step, Bound, RefineError, RefineReport, RefineSettings, StageParams, DIV_TOL};
use crate::{Energy, Mat, State};

use std::collections::HashMap;
use std::sync::Arc;

/// Levels, closeness budgets and measure-loss budgets of a run.
///
/// Index n of `lambda` is the level λ_n (λ_0 = 0 is the seed level), index n of
/// `lambda_prime` is λ′_n (λ′_0 = λ̄), index n of `eps` is ε_n = ρ/3ⁿ, and `loss[n]` is the
/// relative measure loss allowed at stage n (index 0 unused).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub rho: f64,
    pub bar_lambda: f64,
    pub gap: f64,
    pub stages: usize,
    pub lambda: Vec<f64>,
    pub lambda_prime: Vec<f64>,
    pub eps: Vec<f64>,
    pub loss: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error("rho must be positive, got {0}")]
    Rho(f64),
    #[error("seed level must lie in (0,1), got {0}")]
    BarLambda(f64),
    #[error("lambda_1 = max(bar_lambda, delta1, nu1) + gap = {0} is not below 1")]
    Infeasible(f64),
    #[error("seed phi must vanish on the boundary of the domain")]
    Trace,
    #[error("seed scale {requested} exceeds the certified eps0 = {eps0}")]
    SeedScale { requested: f64, eps0: f64 },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: RefineError,
        partial: Box<RunReport>,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// λ_n = 1 - (1 - λ_1) 2^-(n-1) with λ_1 = max(λ̄, δ₁, ν₁) + gap.
pub fn make_schedule(rho: f64, bar_lambda: f64, bundle: &ConfigBundle, stages: usize, gap: f64) -> Result<Schedule, DriverError> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(DriverError::Rho(rho));
    }
    if !(bar_lambda > 0.0 && bar_lambda < 1.0) {
        return Err(DriverError::BarLambda(bar_lambda));
    }
    let l1 = bar_lambda.max(bundle.delta1).max(bundle.nu1) + gap;
    if l1 >= 1.0 || gap <= 0.0 {
        return Err(DriverError::Infeasible(l1));
    }
    let mut lambda = vec![0.0];
    for n in 1..=stages + 1 {
        lambda.push(1.0 - (1.0 - l1) * 2f64.powi(-(n as i32 - 1)));
    }
    let mut lambda_prime = vec![bar_lambda];
    for n in 1..=stages {
        lambda_prime.push(0.5 * (lambda[n] + lambda[n + 1]));
    }
    let eps: Vec<f64> = (0..=stages).map(|n| rho / 3f64.powi(n as i32)).collect();
    // The losses of all stages together stay below 0.9 ε_N, the tightest K-fraction target.
    let loss: Vec<f64> = (0..=stages).map(|n| if n == 0 { 0.0 } else { 0.9 * eps[stages] * 2f64.powi(-(n as i32)) }).collect();
    Ok(Schedule { rho, bar_lambda, gap, stages, lambda, lambda_prime, eps, loss })
}

impl Schedule {
    /// Σ_{n=1}^{N} ε_n.
    pub fn eps_sum(&self) -> f64 {
        self.eps.iter().skip(1).sum()
    }

    /// Parameters of stage s (0-based): from (λ_s, λ′_s) to (λ_{s+1}, λ′_{s+1}) at ε_{s+1}.
    pub fn stage_params(&self, s: usize, bundle: &ConfigBundle) -> Result<StageParams, RefineError> {
        let mu_prime = if s + 1 < self.lambda_prime.len() {
            self.lambda_prime[s + 1]
        } else {
            0.5 * (self.lambda[s + 1] + 1.0)
        };
        Ok(StageParams::new(self.lambda[s], self.lambda_prime[s], self.lambda[s + 1], mu_prime, self.eps[s + 1], bundle)?
            .with_measure_eps(self.loss[s + 1]))
    }
}

/// A seed subsolution u = s φ(x) t, v = s h(x) t and its certified scale limit.
#[derive(Clone, Debug)]
pub struct Seed {
    pub field: SpaceTimeField,
    pub scale: f64,
    pub eps0: f64,
}

/// Builds the seed for ε = eps_scalar and time horizon T = domain height.
///
/// eps0 is the largest power of two (at most 2^20, or ∞ for φ ≡ 0) at which locate puts the
/// seed state in S₁(0) on the subgrid for both signs.
pub fn seed_subsolution(phi: SpatialBump, eps_scalar: f64, domain: DomainBox, bundle: &ConfigBundle, quad: &Quadrature) -> Result<Seed, DriverError> {
    let rect = domain.rect();
    for (a, b) in [(rect.lo, phi.rect.lo), (phi.rect.hi, rect.hi)] {
        if a[0] > b[0] || a[1] > b[1] {
            return Err(DriverError::Trace);
        }
    }
    let t_len = domain.hi[2] - domain.lo[2];
    let h = Arc::new(antidiv_rect(phi.boxed(), rect));
    let make = |s: f64| BaseField::Seed(SeedField { scale: s, phi, h: h.clone() });
    let zero = phi.amp == [0.0; 2];
    let eps0 = if zero {
        f64::INFINITY
    } else {
        let pts: Vec<[f64; 3]> =
            quad.subgrid().into_iter().map(|z| [0, 1, 2].map(|k| domain.lo[k] + 0.5 * (z[k] + 1.0) * (domain.hi[k] - domain.lo[k]))).collect();
        let mut found = 0.0;
        for k in (-60..=20).rev() {
            let e = 2f64.powi(k);
            let ok = [e, -e].iter().all(|&s| {
                let base = make(s / t_len);
                pts.iter().all(|z| bundle.locate_at_level(&base.sample(*z).state(), 0, 0.0).is_some())
            });
            if ok {
                found = e;
                break;
            }
        }
        found
    };
    if eps_scalar.abs() > eps0 {
        return Err(DriverError::SeedScale { requested: eps_scalar, eps0 });
    }
    let scale = eps_scalar / t_len;
    let base = if zero || scale == 0.0 { BaseField::Zero } else { make(scale) };
    Ok(Seed { field: SpaceTimeField::new(domain, base), scale, eps0 })
}

/// Measured quantities of one completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub params: StageParams,
    /// (c)-norm of the stage increment against ε_{s+1}.
    pub cauchy_linf: Bound,
    /// ‖Du_{s+1} - Du_s‖_{L¹} and the measured constant against ε_s + ε_{s+1} + (λ_{s+1} - λ_s).
    pub cauchy_l1_du: f64,
    pub cauchy_l1_constant: f64,
    pub k_fraction: Bound,
    pub s_fractions: [f64; 5],
    pub residual_l1: f64,
    pub refine: RefineReport,
}

/// Everything a run records; serialized as the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schedule: Schedule,
    pub seed_scale: f64,
    /// None when every seed scale is admissible (φ ≡ 0).
    pub seed_eps0: Option<f64>,
    pub seed_check: crate::refine::SampleCheck,
    pub stages: Vec<StageRecord>,
    /// Σ of the recorded (c)-norms against ρ/2.
    pub drift_sum: Bound,
    pub analysis: Option<Analysis>,
    pub tolerances: Vec<(String, f64)>,
    pub pass: bool,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Applies all stages of the schedule to the seed.
pub fn run(seed: &Seed, schedule: &Schedule, bundle: &ConfigBundle, energy: &Energy, settings: &RefineSettings) -> Result<(Vec<SpaceTimeField>, RunReport), DriverError> {
    let seed_check = check_subsolution(&seed.field, bundle, schedule.lambda_prime[0], &settings.quad, settings.probes, settings.seed);
    let mut report = RunReport {
        schedule: schedule.clone(),
        seed_scale: seed.scale,
        seed_eps0: seed.eps0.is_finite().then_some(seed.eps0),
        seed_check,
        stages: Vec::new(),
        drift_sum: Bound::below("sum of (c)-norms < rho/2", 0.0, 0.5 * schedule.rho),
        analysis: None,
        tolerances: vec![
            ("div and trace".into(), DIV_TOL),
            ("inversion".into(), crate::refine::INVERSION_TOL),
            ("weak defect slack".into(), WEAK_TOL),
            ("separation slack".into(), SEPARATION_TOL),
            ("energy slack (relative)".into(), ENERGY_TOL),
        ],
        pass: true,
    };
    let mut fields = vec![seed.field.clone()];
    let omega = seed.field.domain.volume();
    for s in 0..schedule.stages {
        let prev = fields.last().expect("seed");
        let out = schedule
            .stage_params(s, bundle)
            .and_then(|p| refine_step(prev, &p, bundle, energy, &RefineSettings { seed: settings.seed.wrapping_add(s as u64), ..*settings }));
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                report.pass = false;
                return Err(DriverError::Stage { stage: s, source: e, partial: Box::new(report) });
            }
        };
        let r = out.report;
        let p = r.params;
        let bracket = schedule.eps[s] * (s > 0) as u8 as f64 + schedule.eps[s + 1] + (p.mu - p.lambda);
        let rec = StageRecord {
            stage: s,
            params: p,
            cauchy_linf: Bound::below("(c)-norm < eps", r.linf_drift, p.eps),
            cauchy_l1_du: r.l1_drift,
            cauchy_l1_constant: r.l1_drift / (bracket * omega),
            k_fraction: Bound::above("K-fraction > 1 - eps", r.k_fraction, 1.0 - p.eps),
            s_fractions: r.branch_fractions,
            residual_l1: r.residual_l1,
            refine: r,
        };
        report.pass &= rec.cauchy_linf.pass && rec.k_fraction.pass && rec.refine.pass;
        report.drift_sum.lhs += rec.cauchy_linf.lhs;
        report.stages.push(rec);
        fields.push(out.field);
    }
    report.drift_sum.pass = report.drift_sum.lhs < report.drift_sum.rhs;
    report.pass &= report.drift_sum.pass;
    Ok((fields, report))
}

/// Slack of the weak-form bound.
pub const WEAK_TOL: f64 = 1e-6;
/// Slack of the δ-separation test.
pub const SEPARATION_TOL: f64 = 1e-9;
/// Relative slack of the energy inequality.
pub const ENERGY_TOL: f64 = 1e-9;

/// Residual table, Lemma-type fraction bounds and Cauchy partial sums of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceVerdict {
    pub residual_l1: Vec<f64>,
    /// (1 - λ_{s+1}) + ε_{s+1} per stage.
    pub residual_scale: Vec<f64>,
    pub fitted_constant: f64,
    pub residual_decreasing: bool,
    /// Per stage-1 cube class and branch: measured final fraction against the bound.
    pub fraction_bounds: Vec<Bound>,
    pub cauchy_partial_sums: Vec<f64>,
    pub cauchy_ratios: Vec<f64>,
    pub pass: bool,
}

/// Checks the run against the convergence mechanism; needs at least two stages for the
/// fraction bounds.
pub fn verify_convergence(report: &RunReport, fields: &[SpaceTimeField], bundle: &ConfigBundle) -> ConvergenceVerdict {
    let sch = &report.schedule;
    let omega = fields[0].domain.volume();
    let residual_l1: Vec<f64> = report.stages.iter().map(|s| s.residual_l1).collect();
    let residual_scale: Vec<f64> = (0..report.stages.len()).map(|s| (1.0 - sch.lambda[s + 1]) + sch.eps[s + 1]).collect();
    let fitted_constant = residual_l1.iter().zip(&residual_scale).map(|(r, s)| r / (s * omega)).fold(0.0, f64::max);
    let residual_decreasing = residual_l1.windows(2).all(|w| w[1] < w[0]);
    let mut fraction_bounds = Vec::new();
    let n = report.stages.len();
    if n >= 2 {
        let lam = &sch.lambda;
        let bound = 0.25 * (lam[2] / lam[n]) * (lam[2] - lam[1]) * (lam[2] - bundle.nu1).powi(4) * bundle.nu0;
        let last = &fields[n];
        let mut seen: Vec<*const crate::fields::Patch> = Vec::new();
        for lf in &last.leaves {
            let Atom::Patch(p) = &lf.atom else { continue };
            if seen.contains(&Arc::as_ptr(p)) {
                continue;
            }
            seen.push(Arc::as_ptr(p));
            let fr = p.branch_fractions_at(lam[n]);
            for (k, f) in fr.iter().enumerate() {
                fraction_bounds.push(Bound::above(format!("stage-1 cube r{:e}, S{} at level {}", lf.cube.radius, k + 1, lam[n]), *f, bound));
            }
        }
    }
    let mut cauchy_partial_sums = Vec::new();
    let mut acc = 0.0;
    for s in 1..=report.stages.len() {
        acc += sch.eps[s - 1] * (s > 1) as u8 as f64 + sch.eps[s] + (sch.lambda[s] - sch.lambda[s - 1]);
        cauchy_partial_sums.push(acc);
    }
    let cauchy_ratios = report.stages.windows(2).map(|w| w[1].cauchy_l1_du / w[0].cauchy_l1_du).collect();
    let pass = fraction_bounds.iter().all(|b| b.pass) && (n < 2 || !fraction_bounds.is_empty());
    ConvergenceVerdict {
        residual_l1,
        residual_scale,
        fitted_constant,
        residual_decreasing,
        fraction_bounds,
        cauchy_partial_sums,
        cauchy_ratios,
        pass,
    }
}

/// Oscillation flags of one sample point over the tested scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WildRow {
    pub point: [f64; 3],
    pub flags: Vec<bool>,
    /// δ - tol if every flag holds, else 0.
    pub omega_lower: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WildnessTable {
    pub delta: f64,
    pub tol: f64,
    pub scales: Vec<f64>,
    pub samples_per_box: usize,
    pub rows: Vec<WildRow>,
    /// No row has a flag at some scale without the flag at every larger scale.
    pub monotone: bool,
}

/// For each point and scale r: do sampled Du values in the r-box around the point hit two
/// branch families whose Du values lie at least δ - tol apart?
pub fn essential_oscillation(
    field: &SpaceTimeField,
    points: &[Probe],
    scales: &[f64],
    bundle: &ConfigBundle,
    delta: f64,
    samples_per_box: usize,
    seed: u64,
    tol_scale: f64,
) -> WildnessTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = SEPARATION_TOL * tol_scale;
    let mut rows = Vec::new();
    for p in points {
        // A box contains every smaller box around the same point, so hits accumulate from the
        // finest scale up; scales are given in decreasing order.
        let mut hits: Vec<(usize, Mat)> = Vec::new();
        let mut flags = vec![false; scales.len()];
        let mut found = false;
        for (k, &r) in scales.iter().enumerate().rev() {
            for _ in 0..samples_per_box {
                let q = field.probe_near(p, r, &mut rng);
                let st = field.sample_probe(&q).state();
                if let Some(m) = bundle.locate(&st, 1.0) {
                    found = found || hits.iter().any(|(b, y)| *b != m.branch && (st.a - *y).norm() >= delta - tol);
                    hits.push((m.branch, st.a));
                }
            }
            flags[k] = found;
        }
        let omega_lower = if !flags.is_empty() && flags.iter().all(|f| *f) { delta - tol } else { 0.0 };
        rows.push(WildRow { point: p.world, flags, omega_lower });
    }
    let monotone = rows.iter().all(|r| {
        // Scales are given in decreasing order.
        r.flags.windows(2).all(|w| w[0] || !w[1])
    });
    WildnessTable { delta, tol, scales: scales.to_vec(), samples_per_box, rows, monotone }
}

/// δ from the bundle, the wildness separation constant.
pub fn wildness_delta(bundle: &ConfigBundle) -> Result<f64, DriverError> {
    Ok(separation_delta(bundle)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub stage: usize,
    pub t: f64,
    /// E(u(·,t)) and E(u(·,0)).
    pub energy: f64,
    pub energy0: f64,
    /// (ν/2) ∫ |Du(·,t)|².
    pub dirichlet: f64,
    pub pass: bool,
}

/// E(u_n(·,t)) - E(u_n(·,0)) ≥ (ν/2)‖Du_n(·,t)‖² for every field and time.
pub fn energy_report(fields: &[SpaceTimeField], energy: &Energy, times: &[f64], order: usize, tol_scale: f64) -> Result<Vec<EnergyRow>, DriverError> {
    let rule = GaussRule::new(order);
    let nu = energy.nu;
    let mut rows = Vec::new();
    for (n, f) in fields.iter().enumerate() {
        let t0 = f.domain.lo[2];
        let e0 = f.slice_integral_state(&rule, t0, &|s: &State| energy.eval_f(&s.a))?;
        for &t in times {
            let e = f.slice_integral_state(&rule, t, &|s: &State| energy.eval_f(&s.a))?;
            let d = f.slice_integral_state(&rule, t, &|s: &State| 0.5 * nu * s.a.norm_sq())?;
            let pass = e - e0 >= d - ENERGY_TOL * tol_scale * d.abs().max(1e-300);
            rows.push(EnergyRow { stage: n, t, energy: e, energy0: e0, dirichlet: d, pass });
        }
    }
    Ok(rows)
}

/// A polynomial test field φ_i = amp_i · b(x) x1^p1 x2^p2 (t - t0)^pt with b the product of
/// x_k(1 - x_k) in unit coordinates of the spatial domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyTest {
    pub px: [u32; 2],
    pub pt: u32,
    pub amp: [f64; 2],
}

impl PolyTest {
    /// Dφ at z on `domain`, as a matrix with rows i and columns ∂_j.
    pub fn grad(&self, domain: &DomainBox, z: [f64; 3]) -> Mat {
        let h = [domain.hi[0] - domain.lo[0], domain.hi[1] - domain.lo[1]];
        let s = [(z[0] - domain.lo[0]) / h[0], (z[1] - domain.lo[1]) / h[1]];
        let tt = (z[2] - domain.lo[2]).powi(self.pt as i32);
        // g_k(s) = s^(p+1)(1-s), g'_k = (p+1)s^p - (p+2)s^(p+1).
        let g = |k: usize| s[k].powi(self.px[k] as i32 + 1) * (1.0 - s[k]);
        let dg = |k: usize| {
            let p = self.px[k] as f64;
            (p + 1.0) * s[k].powi(self.px[k] as i32) - (p + 2.0) * s[k].powi(self.px[k] as i32 + 1)
        };
        let mut m = Mat::zero();
        for i in 0..2 {
            m.set(i, 0, self.amp[i] * dg(0) / h[0] * g(1) * tt);
            m.set(i, 1, self.amp[i] * g(0) * dg(1) / h[1] * tt);
        }
        m
    }

    /// Sampled sup |Dφ| on a 65² × 9 grid.
    pub fn sup_grad(&self, domain: &DomainBox) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..=64 {
            for j in 0..=64 {
                for k in 0..=8 {
                    let z = [
                        domain.lo[0] + (domain.hi[0] - domain.lo[0]) * i as f64 / 64.0,
                        domain.lo[1] + (domain.hi[1] - domain.lo[1]) * j as f64 / 64.0,
                        domain.lo[2] + (domain.hi[2] - domain.lo[2]) * k as f64 / 8.0,
                    ];
                    m = m.max(self.grad(domain, z).norm());
                }
            }
        }
        m
    }
}

/// Ten test fields of low degree.
pub fn default_tests() -> Vec<PolyTest> {
    let mut v = Vec::new();
    for (k, (px, pt)) in [([0, 0], 0), ([1, 0], 0), ([0, 1], 1), ([1, 1], 1), ([2, 0], 2), ([0, 2], 0), ([2, 1], 1), ([1, 2], 2), ([3, 0], 1), ([0, 3], 3)]
        .into_iter()
        .enumerate()
    {
        let amp = if k % 2 == 0 { [1.0, 0.5] } else { [-0.5, 1.0] };
        v.push(PolyTest { px, pt, amp });
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakRow {
    pub stage: usize,
    pub test: usize,
    /// |∫∫ (DF(Du) - ∂t v) : Dφ|.
    pub defect: f64,
    pub residual_l1: f64,
    pub sup_grad: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Weak-form defects of one field against the test fields; `residual_l1` is the recorded
/// ∫∫ |DF(Du) - ∂t v| of the field.
pub fn weak_residual(
    field: &SpaceTimeField,
    stage: usize,
    residual_l1: f64,
    energy: &Energy,
    tests: &[PolyTest],
    order: usize,
    tol_scale: f64,
) -> Result<Vec<WeakRow>, DriverError> {
    let rule = GaussRule::new(order);
    let d = field.domain;
    let f = |s: &State| energy.residual(s).e;
    let weights: Vec<Box<dyn Fn([f64; 3]) -> [f64; 4] + '_>> = tests.iter().map(|t| Box::new(move |z: [f64; 3]| t.grad(&d, z).e) as Box<dyn Fn([f64; 3]) -> [f64; 4]>).collect();
    let refs: Vec<&dyn Fn([f64; 3]) -> [f64; 4]> = weights.iter().map(|w| w.as_ref()).collect();
    let defects = field.weighted_integrals_state::<4>(&rule, &f, &refs)?;
    let mut rows = Vec::new();
    for (i, (t, defect)) in tests.iter().zip(defects).enumerate() {
        let defect = defect.abs();
        let sup_grad = t.sup_grad(&d);
        let bound = residual_l1 * sup_grad + WEAK_TOL * tol_scale;
        rows.push(WeakRow { stage, test: i, defect, residual_l1, sup_grad, bound, pass: defect <= bound });
    }
    Ok(rows)
}

/// The analysis part of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub convergence: ConvergenceVerdict,
    pub wildness: WildnessTable,
    pub energy: Vec<EnergyRow>,
    pub weak: Vec<WeakRow>,
    /// Weak defects (max over tests) per stage strictly decrease.
    pub weak_decreasing: bool,
    pub pass: bool,
}

/// Knobs of the analysis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub points: usize,
    pub samples_per_box: usize,
    pub times: usize,
    pub order: usize,
    pub seed: u64,
    /// Multiplies the separation, energy and weak-form slacks.
    pub tol_scale: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self { points: 100, samples_per_box: 64, times: 10, order: 3, seed: 7, tol_scale: 1.0 }
    }
}

/// Scales from the top cube radius down to the generation-2 tile radius, halving.
pub fn default_scales(fields: &[SpaceTimeField]) -> Vec<f64> {
    let Some(last) = fields.last() else { return Vec::new() };
    let Some(lf) = last.leaves.first() else { return Vec::new() };
    let top = lf.cube.radius;
    let mut fine = top;
    if let Atom::Patch(p) = &lf.atom {
        let radii: Vec<f64> = p.osc.regions.iter().enumerate().filter(|(r, _)| p.children[*r].is_some()).map(|(r, _)| p.tile_scale(r)).collect();
        if let Some(m) = radii.iter().cloned().reduce(f64::min) {
            fine = m;
        }
    }
    let mut v = vec![top];
    while *v.last().expect("nonempty") * 0.5 >= fine {
        v.push(v.last().expect("nonempty") * 0.5);
    }
    v
}

/// Runs all post-run checks and stores them in the report.
pub fn analyse(report: &mut RunReport, fields: &[SpaceTimeField], bundle: &ConfigBundle, energy: &Energy, st: &AnalysisSettings) -> Result<(), DriverError> {
    let convergence = verify_convergence(report, fields, bundle);
    let last = fields.last().expect("fields");
    let mut rng = ChaCha8Rng::seed_from_u64(st.seed);
    let points: Vec<Probe> = (0..st.points).map(|_| last.random_probe(&mut rng)).collect();
    let delta = wildness_delta(bundle)?;
    let scales = default_scales(fields);
    let wildness = essential_oscillation(last, &points, &scales, bundle, delta, st.samples_per_box, st.seed ^ 0xabc, st.tol_scale);
    let d = last.domain;
    // Off the dyadic grid: on cube faces every perturbation vanishes.
    let times: Vec<f64> = (1..=st.times).map(|k| d.lo[2] + (d.hi[2] - d.lo[2]) * (k as f64 - 1.0 / 3.0) / st.times as f64).collect();
    let energy_rows = energy_report(fields, energy, &times, st.order, st.tol_scale)?;
    let tests = default_tests();
    let mut weak = Vec::new();
    let mut per_stage = HashMap::new();
    for (n, f) in fields.iter().enumerate().skip(1) {
        let rows = weak_residual(f, n, report.stages[n - 1].residual_l1, energy, &tests, st.order, st.tol_scale)?;
        per_stage.insert(n, rows.iter().map(|r| r.defect).fold(0.0, f64::max));
        weak.extend(rows);
    }
    let weak_decreasing = (2..fields.len()).all(|n| per_stage[&n] < per_stage[&(n - 1)]);
    let pass = convergence.pass
        && wildness.rows.iter().all(|r| r.flags.iter().all(|f| *f))
        && energy_rows.iter().all(|r| r.pass)
        && weak.iter().all(|r| r.pass);
    report.analysis = Some(Analysis { convergence, wildness, energy: energy_rows, weak, weak_decreasing, pass });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::pentagon_bundle;

    #[test]
    fn schedule_arithmetic() {
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let s = make_schedule(0.3, 0.5, &b, 3, 0.05).unwrap();
        assert!((s.lambda[1] - 0.65).abs() < 1e-15);
        assert!((s.eps[1] - 0.1).abs() < 1e-15 && (s.eps[2] - 0.1 / 3.0).abs() < 1e-15);
        assert!((s.eps_sum() - 0.3 * (1.0 - 3f64.powi(-3)) / 2.0).abs() < 1e-12);
        for n in 1..=3 {
            assert!(s.lambda[n] < s.lambda_prime[n] && s.lambda_prime[n] < s.lambda[n + 1]);
        }
        assert!(s.loss.iter().sum::<f64>() < s.eps[3]);
        let z = make_schedule(0.3, 0.5, &b, 0, 0.05).unwrap();
        assert_eq!(z.lambda_prime, vec![0.5]);
        assert!(make_schedule(0.3, 0.97, &b, 2, 0.05).is_err());
        assert!(make_schedule(-1.0, 0.5, &b, 2, 0.05).is_err());
    }

    #[test]
    fn zero_seed_and_linear_scaling() {
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let d = DomainBox::unit();
        let q = Quadrature::default();
        let zero = SpatialBump { rect: d.rect(), amp: [0.0; 2] };
        let s = seed_subsolution(zero, 0.3, d, &b, &q).unwrap();
        assert!(s.eps0.is_infinite());
        assert!(s.field.base.constant_state() == Some(State::zero()));
        let bump = SpatialBump { rect: d.rect(), amp: [1.0, 0.0] };
        let s = seed_subsolution(bump, 0.0, d, &b, &q).unwrap();
        assert!(s.eps0 > 0.0 && s.eps0.is_finite());
        let a = seed_subsolution(bump, s.eps0, d, &b, &q).unwrap();
        let h = seed_subsolution(bump, 0.5 * s.eps0, d, &b, &q).unwrap();
        let z = [0.3, 0.6, 0.7];
        let na = a.field.sample(z).unwrap().state();
        let nh = h.field.sample(z).unwrap().state();
        assert!(((na.a.norm() + na.b.norm()) - 2.0 * (nh.a.norm() + nh.b.norm())).abs() < 1e-12);
        assert!(seed_subsolution(bump, 4.0 * s.eps0, d, &b, &q).is_err());
    }

    #[test]
    fn test_field_gradient_matches_differences() {
        let d = DomainBox::unit();
        for t in default_tests() {
            let z = [0.3, 0.7, 0.4];
            let g = t.grad(&d, z);
            let val = |z: [f64; 3]| -> [f64; 2] {
                let b = z[0].powi(t.px[0] as i32 + 1) * (1.0 - z[0]) * z[1].powi(t.px[1] as i32 + 1) * (1.0 - z[1]) * z[2].powi(t.pt as i32);
                [t.amp[0] * b, t.amp[1] * b]
            };
            let h = 1e-6;
            for j in 0..2 {
                let mut zp = z;
                let mut zm = z;
                zp[j] += h;
                zm[j] -= h;
                for i in 0..2 {
                    let fd = (val(zp)[i] - val(zm)[i]) / (2.0 * h);
                    assert!((fd - g.at(i, j)).abs() < 1e-8);
                }
            }
        }
    }
}
