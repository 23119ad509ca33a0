//! Acceptance criteria, one pass/fail line each. Tolerances are pinned below.
//!
//! The process always exits 0 so that a criterion that is out of reach is reported rather than
//! hidden behind an aborted run; the summary line counts the passes.

use std::time::Instant;

use nalgebra::{Matrix5, Vector5};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polywild::antidiv::{antidiv_rect, Rect};
use polywild::config::pentagon_bundle;
use polywild::driver::{analyse, make_schedule, run, seed_subsolution, AnalysisSettings, RunReport, Seed};
use polywild::fields::{DomainBox, SpaceTimeField, SpatialBump};
use polywild::oscillate::{build_oscillation, request_for};
use polywild::quadrature::Quadrature;
use polywild::refine::{refine_step, RefineSettings, StageParams};
use polywild::{chain_coefficients, ConfigBundle, Energy};

const DIV_TOL: f64 = 1e-8;
const CHAIN_TOL: f64 = 1e-12;
const SUM_TOL: f64 = 1e-12;
/// Finite-difference step for the sampled divergence.
const FD_STEP: f64 = 1e-3;

struct Line {
    pass: bool,
    text: String,
}

fn report(n: usize, name: &str, pass: bool, detail: String, t: Instant) -> Line {
    let text = format!("criterion {n:>2} [{}] {name}: {detail} ({:.1} s)", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    println!("{text}");
    Line { pass, text }
}

/// Random cubic with both components of degree ≤ 3.
fn cubic(rng: &mut impl Rng) -> impl Fn([f64; 2]) -> [f64; 2] + Copy {
    let c: [[f64; 10]; 2] = [0; 2].map(|_| [0; 10].map(|_| rng.gen_range(-1.0..1.0)));
    move |p: [f64; 2]| {
        let (x, y) = (p[0], p[1]);
        let m = [1.0, x, y, x * x, x * y, y * y, x * x * x, x * x * y, x * y * y, y * y * y];
        [0, 1].map(|i| c[i].iter().zip(m).map(|(a, b)| a * b).sum())
    }
}

fn criterion_1() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut div_err: f64 = 0.0;
    let mut bdry: f64 = 0.0;
    for _ in 0..20 {
        let lo = [rng.gen_range(-2.0..1.0), rng.gen_range(-2.0..1.0)];
        let hi = [lo[0] + rng.gen_range(0.3..2.0), lo[1] + rng.gen_range(0.3..2.0)];
        let rect = Rect::new(lo, hi);
        let u = cubic(&mut rng);
        let op = antidiv_rect(u, rect);
        for _ in 0..25 {
            let z = [0, 1].map(|i| lo[i] + (hi[i] - lo[i]) * rng.gen_range(0.05..0.95));
            let d = op.div_fd(z, FD_STEP * (hi[0] - lo[0]).min(hi[1] - lo[1]));
            let uz = u(z);
            div_err = div_err.max((d[0] - uz[0]).abs()).max((d[1] - uz[1]).abs());
        }
        // Odd about the centre times the bubble: mean zero with zero trace.
        let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let bubble = move |p: [f64; 2]| (p[0] - lo[0]) * (hi[0] - p[0]) * (p[1] - lo[1]) * (hi[1] - p[1]);
        let w = move |p: [f64; 2]| [(p[0] - c[0]) * bubble(p), (p[1] - c[1]) * bubble(p)];
        let opw = antidiv_rect(w, rect);
        for k in 0..=16 {
            let s = k as f64 / 16.0;
            let edge = [lo[0] + s * (hi[0] - lo[0]), lo[1] + s * (hi[1] - lo[1])];
            for z in [[edge[0], lo[1]], [edge[0], hi[1]], [lo[0], edge[1]], [hi[0], edge[1]]] {
                bdry = bdry.max(opw.eval(z).norm());
            }
        }
    }
    let pass = div_err <= DIV_TOL && bdry <= DIV_TOL && t.elapsed().as_secs_f64() < 10.0;
    report(1, "antidivergence identity", pass, format!("max |div R u - u| = {div_err:.2e}, max boundary |R w| = {bdry:.2e}, tol {DIV_TOL:e}"), t)
}

/// P = M⁻¹ T X for the cyclic chain P_{k+1} = t_k X_k + (1 - t_k) P_k.
fn chain_by_solve(t: &[f64; 5]) -> Option<Matrix5<f64>> {
    let mut m = Matrix5::zeros();
    let mut rhs = Matrix5::zeros();
    for k in 0..5 {
        let r = (k + 1) % 5;
        m[(r, r)] += 1.0;
        m[(r, k)] -= 1.0 - t[k];
        rhs[(r, k)] = t[k];
    }
    m.lu().solve(&rhs)
}

fn criterion_2() -> Line {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut err: f64 = 0.0;
    for _ in 0..1000 {
        let t = [0; 5].map(|_| rng.gen_range(0.01..0.99));
        let nu = chain_coefficients(&t).expect("interior t");
        let direct = chain_by_solve(&t).expect("nonsingular");
        for i in 0..5 {
            err = err.max((Vector5::from(nu[i]) - direct.row(i).transpose()).amax());
        }
    }
    let h = Ratio::new(1i64, 2);
    let nu = chain_coefficients(&[h; 5]).expect("halves");
    let base = [16, 8, 4, 2, 1].map(|n| Ratio::new(n as i64, 31));
    let halves = (0..5).all(|i| (0..5).all(|m| nu[(i + 1) % 5][(i + 5 - m) % 5] == base[m]));
    let pass = err <= CHAIN_TOL && halves && t0.elapsed().as_secs_f64() < 5.0;
    report(2, "chain algebra", pass, format!("max deviation from direct solve {err:.2e} (tol {CHAIN_TOL:e}), halves case exact: {halves}"), t0)
}

fn criterion_3() -> Line {
    let t = Instant::now();
    let b = pentagon_bundle(0.1, 0.6, 0.6);
    let (mu, eps) = (0.9, 0.1);
    let r = request_for(b.center(), 0, 0.0, mu, 0.95, eps, eps, 0.0625);
    let detail;
    let pass = match build_oscillation(&r, &b) {
        Ok(res) => {
            let c = &res.certificate;
            let entry = (mu - b.nu1).powi(4) * b.nu0;
            let margins = (0..5).map(|k| c.region_fraction[k] - c.region_bound[k]).fold(f64::INFINITY, f64::min);
            detail = format!(
                "div psi {:.1e}, slice mean {:.1e}, sup {:.4} < {eps}, region total {:.4}, min region margin {:.2e}, entry bound {:.2e} (min nu {:.2e})",
                c.max_div_psi, c.max_slice_mean, c.sup_bound, c.total_fraction, margins, entry, c.min_nu_tilde
            );
            c.pass
                && c.max_div_psi <= DIV_TOL
                && c.max_slice_mean <= DIV_TOL
                && c.sup_bound < eps
                && c.total_fraction > 1.0 - eps
                && margins > 0.0
                && (entry - 8.1e-4).abs() < 1e-15
                && c.min_nu_tilde > entry
        }
        Err(e) => {
            detail = format!("build failed: {e}");
            false
        }
    };
    report(3, "oscillation contract", pass && t.elapsed().as_secs_f64() < 120.0, detail, t)
}

fn criterion_4() -> Line {
    let t = Instant::now();
    let b = pentagon_bundle(0.2, 0.6, 0.5);
    let p = StageParams::new(0.0, 0.7, 0.9, 0.95, 0.1, &b).expect("admissible");
    let f = SpaceTimeField::zero(DomainBox::unit());
    let detail;
    let pass = match refine_step(&f, &p, &b, &Energy::quadratic(1.0), &RefineSettings::default()) {
        Ok(out) => {
            let r = &out.report;
            let radius = r.classes.iter().map(|c| c.radius).fold(0.0, f64::max);
            let region = r.classes.iter().map(|c| c.certificate.total_fraction).fold(1.0, f64::min);
            let bound = p.branch_bound(&b);
            let s_min = r.classes.iter().flat_map(|c| (1..=5).map(move |k| c.fractions[&format!("S{k}")])).fold(1.0, f64::min);
            detail = format!(
                "max radius {radius:.4}, min region fraction {region:.4}, min S fraction {s_min:.3e} >= {bound:.3e}, trace {:.1e}, div {:.1e}",
                r.max_trace, r.postcondition.max_div_defect
            );
            r.pass
                && radius < 0.1
                && region > 0.9
                && (bound - 1.62e-4).abs() < 1e-12
                && s_min >= bound
                && r.max_trace <= DIV_TOL
                && r.postcondition.max_div_defect <= DIV_TOL
        }
        Err(e) => {
            detail = format!("refine failed: {e}");
            false
        }
    };
    report(4, "single refinement step", pass && t.elapsed().as_secs_f64() < 600.0, detail, t)
}

fn criterion_5(b: &ConfigBundle) -> Line {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut below = true;
    for rho in [0.3, 0.01, 1.0, 2.5] {
        for n in 1..=12 {
            let s = make_schedule(rho, 0.5, b, n, 0.05).expect("feasible");
            worst = worst.max((s.eps_sum() - rho * (1.0 - 3f64.powi(-(n as i32))) / 2.0).abs());
            below &= s.eps_sum() < rho;
        }
    }
    report(5, "schedule arithmetic", worst <= SUM_TOL && below, format!("max deviation {worst:.2e} (tol {SUM_TOL:e}), all sums < rho: {below}"), t)
}

fn zero_seed(b: &ConfigBundle) -> Seed {
    let d = DomainBox::unit();
    seed_subsolution(SpatialBump { rect: d.rect(), amp: [0.0; 2] }, 0.0, d, b, &Quadrature::default()).expect("zero seed")
}

fn full_run(b: &ConfigBundle, e: &Energy, stages: usize) -> Result<(Vec<SpaceTimeField>, RunReport), String> {
    let sch = make_schedule(0.3, 0.5, b, stages, 0.05).map_err(|e| e.to_string())?;
    run(&zero_seed(b), &sch, b, e, &RefineSettings::default()).map_err(|e| e.to_string())
}

fn criteria_6_to_9(b: &ConfigBundle, e: &Energy) -> Vec<Line> {
    let t = Instant::now();
    let (fields, mut rep) = match full_run(b, e, 3) {
        Ok(x) => x,
        Err(msg) => return (6..=9).map(|n| report(n, "three-stage run", false, format!("run failed: {msg}"), t)).collect(),
    };
    let secs = t.elapsed().as_secs_f64();
    let analysed = analyse(&mut rep, &fields, b, e, &AnalysisSettings::default());
    let Some(a) = rep.analysis.as_ref().filter(|_| analysed.is_ok()) else {
        return (6..=9).map(|n| report(n, "analysis", false, format!("analysis failed: {analysed:?}"), t)).collect();
    };
    let mut out = Vec::new();

    let cv = &a.convergence;
    let linf = rep.stages.iter().all(|s| s.cauchy_linf.pass);
    let kf = rep.stages.iter().all(|s| s.k_fraction.pass);
    let fit = cv.residual_l1.iter().zip(&cv.residual_scale).all(|(r, s)| *r <= cv.fitted_constant * s * fields[0].domain.volume() * (1.0 + 1e-12));
    let lemma = !cv.fraction_bounds.is_empty() && cv.fraction_bounds.iter().all(|x| x.pass && x.margin() > 0.0);
    let min_margin = cv.fraction_bounds.iter().map(|x| x.margin()).fold(f64::INFINITY, f64::min);
    let residuals: Vec<String> = cv.residual_l1.iter().map(|r| format!("{r:.3e}")).collect();
    out.push(report(
        6,
        "three-stage run",
        linf && kf && cv.residual_decreasing && fit && lemma && secs < 3600.0,
        format!(
            "(c)-norms ok {linf}, K-fractions ok {kf}, residuals [{}] strictly decreasing {}, C_meas {:.3e}, min fraction margin {min_margin:.2e} over {} bounds, run {secs:.0} s",
            residuals.join(", "),
            cv.residual_decreasing,
            cv.fitted_constant,
            cv.fraction_bounds.len()
        ),
        t,
    ));

    let w = &a.wildness;
    let hit = w.rows.iter().filter(|r| r.flags.iter().all(|f| *f)).count();
    out.push(report(
        7,
        "wildness mechanism",
        w.delta > 0.0 && w.rows.len() == 100 && hit == w.rows.len() && w.monotone,
        format!("delta {:.4}, {hit}/{} points flagged at all {} scales down to {:.4}, monotone {}", w.delta, w.rows.len(), w.scales.len(), w.scales.last().copied().unwrap_or(0.0), w.monotone),
        t,
    ));

    let rows: Vec<_> = a.energy.iter().filter(|r| r.dirichlet > 0.0).collect();
    let eok = rows.iter().filter(|r| r.pass).count();
    let times: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.t.to_bits()).collect();
    out.push(report(
        8,
        "energy inequality",
        !rows.is_empty() && eok == rows.len() && times.len() >= 10,
        format!("{eok}/{} (stage, time) rows pass at {} distinct times with nonzero gradient", rows.len(), times.len()),
        t,
    ));

    let wok = a.weak.iter().filter(|r| r.pass).count();
    let per_stage: Vec<String> = (1..fields.len())
        .map(|n| format!("{:.3e}", a.weak.iter().filter(|r| r.stage == n).map(|r| r.defect).fold(0.0, f64::max)))
        .collect();
    out.push(report(
        9,
        "weak-form defect",
        wok == a.weak.len() && a.weak_decreasing,
        format!("{wok}/{} rows within the bound, max defect per stage [{}], strictly decreasing {}", a.weak.len(), per_stage.join(", "), a.weak_decreasing),
        t,
    ));
    out
}

fn criterion_10(b: &ConfigBundle, e: &Energy) -> Line {
    let t = Instant::now();
    let one = || full_run(b, e, 2).map(|(_, r)| r.to_json());
    let (x, y) = (one(), one());
    let (pass, detail) = match (x, y) {
        (Ok(x), Ok(y)) => (x == y, format!("two-stage reports of {} bytes identical: {}", x.len(), x == y)),
        (Err(m), _) | (_, Err(m)) => (false, format!("run failed: {m}")),
    };
    report(10, "determinism", pass, detail, t)
}

fn main() {
    let b = pentagon_bundle(0.2, 0.6, 0.5);
    let e = Energy::quadratic(1.0);
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(&b)];
    lines.extend(criteria_6_to_9(&b, &e));
    lines.push(criterion_10(&b, &e));
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
    for l in lines.iter().filter(|l| !l.pass) {
        println!("  failing: {}", l.text);
    }
}
