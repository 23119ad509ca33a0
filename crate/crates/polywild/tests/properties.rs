//! Property tests for the structural invariants of each module.

use proptest::prelude::*;

use polywild::antidiv::{antidiv_rect, Rect};
use polywild::config::{barycentric_expand, pentagon_bundle, point_on_segment};
use polywild::driver::make_schedule;
use polywild::energy::{AffineForm, GTerm};
use polywild::fields::{vitali_cover, Cube};
use polywild::{chain_coefficients, Energy, Mat};

fn mat() -> impl Strategy<Value = Mat> {
    prop::array::uniform4(-10.0f64..10.0).prop_map(|a| Mat::new(a[0], a[1], a[2], a[3]))
}

fn energy() -> Energy {
    let form = AffineForm { ca: [0.3, -0.2, 0.1, 0.4], cd: 0.5, c0: 0.1 };
    Energy::with_terms(1.5, vec![GTerm::SquaredLinear { coeff: 0.7, form }, GTerm::EvenPower { coeff: 0.05, power: 2 }]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn df_matches_finite_differences(a in mat()) {
        let e = energy();
        let df = e.eval_df(&a);
        let h = 1e-5;
        for r in 0..2 {
            for c in 0..2 {
                let (mut p, mut m) = (a, a);
                p.set(r, c, a.at(r, c) + h);
                m.set(r, c, a.at(r, c) - h);
                let fd = (e.eval_f(&p) - e.eval_f(&m)) / (2.0 * h);
                prop_assert!((fd - df.at(r, c)).abs() <= 1e-5 * df.at(r, c).abs().max(1.0));
            }
        }
    }

    #[test]
    fn residual_vanishes_on_the_graph(a in mat()) {
        let e = energy();
        let x = polywild::State::new(a, e.eval_df(&a));
        prop_assert!(e.residual(&x).norm() <= 1e-12 * (1.0 + a.norm_sq()));
    }

    #[test]
    fn chain_rows_are_probability_vectors(t in prop::array::uniform5(0.01f64..0.99)) {
        let nu = chain_coefficients(&t).unwrap();
        for row in nu {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|w| *w > 0.0 && *w < 1.0));
        }
    }

    #[test]
    fn expansion_reconstructs_and_bounds(i in 0usize..5, lambda in 0.0f64..0.85, mu in 0.62f64..0.99) {
        prop_assume!(lambda < mu);
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let e = barycentric_expand(lambda, mu, b.center(), i, b.nu1, b.delta1).unwrap();
        prop_assert!(e.reconstruction_defect() <= 1e-9);
        prop_assert!(e.min_entry() > (mu - b.nu1).powi(4) * b.nu0);
    }

    // Above the chain level 0.5 the open segments are disjoint; at 0.5 branch k meets π_{k+1}.
    #[test]
    fn locate_inverts_point_on_segment(i in 0usize..5, lambda in prop_oneof![Just(0.0), 0.55f64..0.95]) {
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let y = point_on_segment(b.center(), i, lambda);
        let m = b.locate_at_level(&y, i, lambda).expect("on the segment");
        prop_assert!(m.residual <= 1e-7);
        prop_assert!(m.q.iter().all(|x| x.abs() <= 1e-6));
        if lambda > 0.0 {
            let m = b.locate(&y, 1.0).expect("member");
            prop_assert_eq!(m.branch, i);
            prop_assert!((m.lambda - lambda).abs() <= 1e-6);
        }
    }

    #[test]
    fn antidivergence_identity_and_linearity(
        c in prop::array::uniform8(-1.0f64..1.0),
        lo in prop::array::uniform2(-1.0f64..0.0),
        size in prop::array::uniform2(0.5f64..2.0),
        x in prop::array::uniform2(0.1f64..0.9),
        alpha in -2.0f64..2.0,
    ) {
        let rect = Rect::new(lo, [lo[0] + size[0], lo[1] + size[1]]);
        let u = move |p: [f64; 2]| [c[0] + c[1] * p[0] + c[2] * p[1] * p[1] + c[3] * p[0] * p[0] * p[1], c[4] + c[5] * p[1] + c[6] * p[0] * p[1] + c[7] * p[0].powi(3)];
        let w = |p: [f64; 2]| [p[0] * p[1], 1.0 - p[1]];
        let z = [lo[0] + x[0] * size[0], lo[1] + x[1] * size[1]];
        let op = antidiv_rect(u, rect);
        let d = op.div_fd(z, 1e-3);
        let uz = u(z);
        prop_assert!((d[0] - uz[0]).abs() <= 1e-8 && (d[1] - uz[1]).abs() <= 1e-8);
        let sum = antidiv_rect(move |p| { let (a, b) = (u(p), w(p)); [alpha * a[0] + b[0], alpha * a[1] + b[1]] }, rect).eval(z);
        let parts = op.eval(z) * alpha + antidiv_rect(w, rect).eval(z);
        prop_assert!((sum - parts).norm() <= 1e-12 * (1.0 + sum.norm()));
    }

    #[test]
    fn vitali_cubes_are_disjoint_and_small(r in 0.3f64..0.9, eps in 0.05f64..0.4) {
        let region = move |z: [f64; 3]| z.iter().map(|x| x * x).sum::<f64>() < r * r;
        let cover = vitali_cover(&region, Cube::new([0.0; 3], 1.0).unwrap(), eps, 0.3, 6).unwrap();
        for (k, a) in cover.cubes.iter().enumerate() {
            prop_assert!(a.radius < eps);
            for b in &cover.cubes[k + 1..] {
                prop_assert!(!a.overlaps(b));
            }
        }
    }

    #[test]
    fn schedule_sums_stay_below_rho(rho in 0.01f64..3.0, n in 1usize..8) {
        let b = pentagon_bundle(0.2, 0.6, 0.5);
        let s = make_schedule(rho, 0.5, &b, n, 0.05).unwrap();
        let want = rho * (1.0 - 3f64.powi(-(n as i32))) / 2.0;
        prop_assert!((s.eps_sum() - want).abs() <= 1e-12);
        prop_assert!(s.eps_sum() < rho);
        prop_assert!(s.lambda.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.lambda[1] > 0.6 && *s.lambda.last().unwrap() < 1.0);
    }
}
