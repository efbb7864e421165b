//! Acceptance suite: one PASS/FAIL line per criterion, plus regression
//! baselines for quantities whose constants are not universal.
//!
//! Run with `cargo test -p varlab-core --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varlab::approx::{build_lipschitz_approximant, find_row, height_bands, validate_lip_estimates, LipOptions};
use varlab::excess::{
    cylindrical_excess, good_set, maximal_table, reports_to_csv, spherical_excess, CylinderSpec, DyadicFamily,
};
use varlab::grassmann::{best_fit_plane, ProjectionPlane};
use varlab::models::{
    bump_graph, catenoid_cylindrical_excess, catenoid_excess_exact, extrapolate, generate_catenoid, generate_graph,
    generate_plane, lp_growth, transverse_planes, AngularResolution, CatenoidSpec, DConstant, GraphSpec, PlaneSpec,
    Sheet,
};
use varlab::numerics::{loglog_fit, refinement_study};
use varlab::qvalued::{g_metric, DiskGrid, QPoint};
use varlab::regularity::{decay_profile, predecay_step, PredecayOptions, Verdict};
use varlab::testfn::{BumpField, RadialBump};
use varlab::varifold::{DiscreteVarifold, Region};

struct Report {
    failures: Vec<String>,
    drift_alarms: usize,
}

impl Report {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        println!("{} [{id}] {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures.push(id.to_string());
        }
    }

    /// Quantities whose constant is not universal: compared to a recorded
    /// value, reported but never failing.
    fn baseline(&mut self, name: &str, value: f64, reference: f64) {
        let drift = (value - reference).abs() / reference.abs();
        let alarm = drift > 0.1;
        if alarm {
            self.drift_alarms += 1;
        }
        println!(
            "BASELINE {name} = {value:.6e} (recorded {reference:.6e}, drift {:.2}%){}",
            100.0 * drift,
            if alarm { " DRIFT" } else { "" }
        );
    }
}

fn sci(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c1_catenoid_d1(rep: &mut Report) {
    let t = Instant::now();
    let d1 = extrapolate(DConstant::D1).unwrap();
    let [_, i5, i6] = d1.iterates;
    let raw5 = DConstant::D1.ratio(1e5).unwrap();
    let raw6 = DConstant::D1.ratio(1e6).unwrap();
    let agree = rel(i5, i6);
    rep.check(
        "1a",
        agree < 5e-3 && d1.converged,
        format!(
            "d1 limit through 1e5 vs 1e6: {i5:.7} vs {i6:.7}, rel {agree:.2e} < 5e-3 (raw ratios {raw5:.5} vs {raw6:.5}, rel {:.2e})",
            rel(raw5, raw6)
        ),
    );

    let r = 100.0;
    let h = r / 2000.0;
    let v = generate_catenoid(&CatenoidSpec::new(2, 1.0, r + 1.0), h, AngularResolution::Fixed(64)).unwrap();
    let measured = cylindrical_excess(&v, &CylinderSpec::standard(2, 1, vec![0.0; 2], r)).unwrap().value;
    let exact = catenoid_cylindrical_excess(2, r).unwrap();
    let literal = catenoid_excess_exact(r).unwrap();
    let secs = t.elapsed().as_secs_f64();
    rep.check(
        "1b",
        rel(measured, exact) < 0.01 && secs < 30.0,
        format!(
            "discrete excess at R = 100, h = {h}: {measured:.6e} vs {exact:.6e}, rel {:.2e} < 1e-2 (closed form {literal:.6e}); {secs:.1}s < 30s",
            rel(measured, exact)
        ),
    );
}

fn c2_catenoid_d2(rep: &mut Report) {
    let t = Instant::now();
    let d2 = extrapolate(DConstant::D2).unwrap();
    let [_, i5, i6] = d2.iterates;
    let raw5 = DConstant::D2.ratio(1e5).unwrap();
    let raw6 = DConstant::D2.ratio(1e6).unwrap();
    rep.check(
        "2a",
        rel(i5, i6) < 5e-4 && d2.converged,
        format!(
            "d2 limit through 1e5 vs 1e6: {i5:.6} vs {i6:.6}, rel {:.2e} < 5e-4 (raw ratios {raw5:.5} vs {raw6:.5})",
            rel(i5, i6)
        ),
    );

    // catenoid with neck 1/R, sampled at scale R and shrunk
    let big_r = 100.0;
    let r = 0.5;
    let v = generate_catenoid(&CatenoidSpec::new(2, 1.0, 1.2 * big_r), 0.05, AngularResolution::Fixed(64))
        .unwrap()
        .rescale(&[0.0; 3], big_r);
    let hb = height_bands(&v, r, 2).unwrap();
    let analytic = (big_r * r).acosh() / big_r;
    let factor = hb.halfwidth / analytic;
    let secs = t.elapsed().as_secs_f64();
    rep.check(
        "2b",
        (0.5..=2.0).contains(&factor) && secs < 60.0,
        format!(
            "band halfwidth in C_{r} of the catenoid with neck 1/{big_r}: {:.5e} vs analytic {analytic:.5e}, factor {factor:.4} in [1/2, 2]; {secs:.1}s < 60s",
            hb.halfwidth
        ),
    );
}

fn c3_missed_mass(rep: &mut Report) {
    for beta in [0.1, 0.25, 0.4] {
        let c = DConstant::D3 { beta };
        let d = extrapolate(c).unwrap();
        let [i4, i5, i6] = d.iterates;
        let raw4 = c.ratio(1e4).unwrap();
        let raw5 = c.ratio(1e5).unwrap();
        rep.check(
            &format!("3a beta={beta}"),
            rel(i4, i5) < 0.02,
            format!(
                "d3 limit through 1e4 vs 1e5: {i4:.5} vs {i5:.5}, rel {:.2e} < 2e-2; estimate {i6:.5} vs pi^2 (raw ratios {raw4:.4} vs {raw5:.4})",
                rel(i4, i5)
            ),
        );
    }
    let radii = [1e2, 1e3, 1e4, 1e5, 1e6];
    let factors: Vec<f64> = radii.iter().map(|&r| lp_growth(0.25, 4.0, r).unwrap().factor).collect();
    let increasing = factors.windows(2).all(|w| w[1] > w[0]);
    let growth = factors[4] / factors[0];
    rep.check(
        "3b",
        increasing && growth > 2.0,
        format!("L^4 gradient over sqrt(E) at beta = 0.25 for R = 1e2..1e6: {factors:.4?}, increasing, grows x{growth:.2} > 2"),
    );
}

fn sheets(q: usize, eps: f64) -> Vec<Sheet> {
    let all = [
        Sheet::affine(1, vec![eps, 0.0], vec![0.0]),
        Sheet::affine(1, vec![-eps, 0.0], vec![0.0]),
        Sheet::affine(1, vec![0.0, eps], vec![0.3]),
    ];
    all[..q].to_vec()
}

fn c4_lipschitz_round_trip(rep: &mut Report) {
    let h = 1.0 / 128.0;
    for q in 1..=3 {
        for eps in [0.01, 0.05] {
            let t = Instant::now();
            let g = generate_graph(&GraphSpec::new(2, 1, 4.0, sheets(q, eps)).with_fine_radius(1.1), h).unwrap();
            let a = build_lipschitz_approximant(&g.varifold, 0.02, q, &LipOptions::default()).unwrap();
            let mut worst: f64 = 0.0;
            let mut sums_ok = true;
            let good = a.good_values();
            for (i, val) in &good {
                let x = a.f.grid().position(*i);
                worst = worst.max(g_metric(val, &g.truth(&x)).unwrap());
                sums_ok &= a.multiplicities[*i].iter().sum::<usize>() == q;
            }
            let tol = 0.75 * a.gap;
            let oracle = |x: &[f64], y: &[f64]| g.density_at(x, y, tol);
            let rows = validate_lip_estimates(&g.varifold, &a, Some(&oracle)).unwrap();
            let dm = find_row(&rows, "density_match").unwrap();
            let secs = t.elapsed().as_secs_f64();
            rep.check(
                &format!("4 Q={q} eps={eps}"),
                !good.is_empty() && worst <= 4.0 * h && sums_ok && dm.lhs == 0.0 && secs < 60.0,
                format!(
                    "{} good nodes, max G error {worst:.3e} <= 4h = {:.3e}, multiplicities sum to Q: {sums_ok}, density mismatches {}/{}; {secs:.1}s < 60s",
                    good.len(),
                    4.0 * h,
                    dm.lhs,
                    dm.rhs_law
                ),
            );
            if q == 2 && eps == 0.05 {
                rep.baseline("lipschitz ratio (Q=2, eps=0.05)", find_row(&rows, "lipschitz").unwrap().ratio, 9.480);
            }
        }
    }
}

fn checkerboard_centers() -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in -3i32..=3 {
        for j in -3i32..=3 {
            let c = vec![i as f64 * 0.25, j as f64 * 0.25];
            if (i + j) % 2 == 0 && c[0] * c[0] + c[1] * c[1] <= 0.5625 + 1e-12 {
                out.push(c);
            }
        }
    }
    out
}

fn c5_measure_estimate(rep: &mut Report) {
    let h = 1.0 / 128.0;
    let lambda = 0.02;
    let centers = checkerboard_centers();
    let mut e4 = Vec::new();
    let mut bad = Vec::new();
    for k in 1..=10 {
        let spec = bump_graph(2, 4.0, centers[..k].to_vec(), 0.008, 0.04).with_fine_radius(1.1);
        let v = generate_graph(&spec, h).unwrap().varifold;
        e4.push(cylindrical_excess(&v, &CylinderSpec::standard(2, 1, vec![0.0; 2], 4.0)).unwrap().value);
        bad.push(good_set(&v, lambda).unwrap().complement_measure());
    }
    let span = e4[9] / e4[0];
    let fit = loglog_fit(&e4, &bad);
    let slope = fit.map_or(f64::NAN, |f| f.slope);
    rep.check(
        "5",
        span >= 10.0 - 1e-9 && (slope - 1.0).abs() <= 0.15,
        format!("|B1 \\ K| against E4 over {span:.1}x: log-log slope {slope:.4} in 1 +- 0.15"),
    );
    rep.baseline("measure estimate |B1 \\ K| lambda / E4", bad[9] * lambda / e4[9], 97.07);
}

fn saddle(eps: f64, extent: f64) -> GraphSpec {
    GraphSpec::single(
        2,
        extent,
        move |x: &[f64]| eps * (x[0] * x[0] - x[1] * x[1]),
        move |x: &[f64]| vec![2.0 * eps * x[0], -2.0 * eps * x[1]],
    )
}

fn c6_excess_decay(rep: &mut Report) {
    for eps in [0.02, 0.05] {
        let v = generate_graph(&saddle(eps, 1.1), 1.0 / 256.0).unwrap().varifold;
        let p = decay_profile(&v, &[0.0; 3], 1.0, 5, 1).unwrap();
        let k = p.fitted_exponent.unwrap_or(f64::NAN);
        rep.check(
            &format!("6a eps={eps}"),
            (k - 2.0).abs() <= 0.1 && p.included.iter().filter(|&&i| i).count() == 6,
            format!("fitted exponent over 5 dyadic levels {k:.4} in 2 +- 0.1 (rms residual {:.2e})", p.fit_residual),
        );
    }

    let opts = PredecayOptions::default();
    let v = generate_graph(&saddle(0.01, 5.75), 1.0 / 32.0).unwrap().varifold;
    let r = predecay_step(&v, 1, &opts).unwrap();
    rep.check(
        "6b",
        r.verdict == Verdict::Passed,
        format!(
            "decay step on eps = 0.01 saddle: E(B5) = {:.3e}, eta = {}, {:.3e} <= {:.3e}, verdict {}",
            r.hypotheses.excess_b5,
            r.eta_used,
            r.lhs,
            r.rhs,
            r.verdict.as_str()
        ),
    );

    // the step only sees V through its dilations
    let w = generate_graph(&saddle(0.005, 11.5), 1.0 / 16.0).unwrap().varifold;
    let scaled = predecay_step(&w.rescale(&[0.0; 3], 2.0), 1, &opts).unwrap();
    let e10 = spherical_excess(&w, &[0.0; 3], 10.0).unwrap().value;
    let lhs = spherical_excess(&w, &[0.0; 3], 10.0 * scaled.eta_used).unwrap().value;
    let dev = rel(scaled.hypotheses.excess_b5, e10).max(rel(scaled.lhs, lhs));
    rep.check(
        "6c",
        dev < 1e-10,
        format!("decay step on a 2x dilation matches direct excess at radii 10 and 10 eta: rel deviation {dev:.1e} < 1e-10"),
    );

    let cone = transverse_planes(2, 1, 0.2, 5.75, 1.0 / 32.0).unwrap();
    let r = predecay_step(&cone, 2, &opts).unwrap();
    let broken = r.hypotheses.broken();
    rep.check(
        "6d",
        !r.inequality_holds && r.verdict == Verdict::NotApplicable && broken.contains(&"low_density"),
        format!(
            "transverse-plane cone: {:.3e} > {:.3e} at eta = {}, verdict {}, broken hypotheses {broken:?}",
            r.lhs,
            r.rhs,
            r.eta_used,
            r.verdict.as_str()
        ),
    );
}

fn validator_residuals(v: &DiscreteVarifold, x0: &[f64]) -> [f64; 3] {
    let phi = RadialBump::new(x0.to_vec(), 1.0);
    [
        v.first_variation(&BumpField::new(phi.clone(), vec![0.3, 0.5, 0.8])).unwrap(),
        v.harmonicity_residual(0, &phi).unwrap(),
        v.monotonicity_residual_smooth(x0, 0.25, 1.0, 0.25).unwrap(),
    ]
}

fn c7_validators(rep: &mut Report) {
    let hs = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let names = ["first_variation", "harmonicity", "monotonicity"];
    let models: [(&str, Vec<f64>); 2] = [("tilted plane", vec![0.0; 3]), ("catenoid", vec![1.0, 0.0, 0.0])];
    for (model, x0) in &models {
        let res: Vec<[f64; 3]> = hs
            .iter()
            .map(|&h| {
                let v = if *model == "catenoid" {
                    generate_catenoid(&CatenoidSpec::new(2, 1.0, 3.0), h, AngularResolution::Adaptive).unwrap()
                } else {
                    let tilt = ProjectionPlane::rotated_coordinate(2, 1, 0, 2, 0.3);
                    generate_plane(&PlaneSpec::flat(2, 1, 2.0).with_tilt(tilt), h).unwrap()
                };
                validator_residuals(&v, x0)
            })
            .collect();
        for (k, name) in names.iter().enumerate() {
            let r: Vec<f64> = res.iter().map(|x| x[k]).collect();
            let s = refinement_study(&hs, &r, 1.5, 1e-12);
            rep.check(
                &format!("7 {model} {name}"),
                s.passed,
                format!("|residual| at h = 1/16, 1/32, 1/64: {}, ratios {:.2?} >= 1.5 (or below 1e-12)", sci(&r), s.ratios),
            );
        }
    }
}

fn c8_properties(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let q = rng.gen_range(1..=5);
        let mut pt = || QPoint::new(q, 2, (0..2 * q).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (a, b, c) = (pt(), pt(), pt());
        let lhs = g_metric(&a, &c).unwrap();
        let rhs = g_metric(&a, &b).unwrap() + g_metric(&b, &c).unwrap();
        worst = worst.max(lhs - rhs);
    }
    rep.check("8a", worst <= 1e-12, format!("G triangle inequality on 1000 random triples, worst slack {worst:.2e}"));

    let centers = checkerboard_centers();
    let v = generate_graph(&bump_graph(2, 4.0, centers[..5].to_vec(), 0.02, 0.1).with_fine_radius(1.1), 1.0 / 64.0)
        .unwrap()
        .varifold;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let r = rng.gen_range(0.3..1.5);
        let s = r * rng.gen_range(0.2..1.0);
        let z: Vec<f64> = y.iter().map(|c| c + rng.gen_range(-1.0..1.0) * (r - s) / 2f64.sqrt()).collect();
        let small = cylindrical_excess(&v, &CylinderSpec::standard(2, 1, z, s)).unwrap();
        let big = cylindrical_excess(&v, &CylinderSpec::standard(2, 1, y, r)).unwrap();
        // (s/r)^m E(C_s) <= E(C_r), with equality of the raw sums when nothing lies between
        let scaled = small.value * (s / r).powi(2);
        worst = worst.max((scaled - big.value) / big.value.max(1e-300));
        if small.raw_sum > big.raw_sum * (1.0 + 1e-12) {
            worst = worst.max(1.0);
        }
    }
    rep.check("8b", worst <= 1e-12, format!("nested cylinders: (s/r)^m E_s - E_r, worst relative {worst:.2e}"));

    let family = DyadicFamily::new(2, v.mesh_scale()).unwrap();
    let table = maximal_table(&v, &family, 1.0).unwrap();
    let grid = DiskGrid::new(2, 1.0 / 32.0, 1.0).unwrap();
    let base = varlab::excess::good_set_from_table(&table, grid, 0.001).unwrap();
    let lambdas = [0.001, 0.003, 0.01, 0.03, 0.1];
    let sets: Vec<Vec<bool>> = lambdas.iter().map(|&l| base.with_threshold(l).mask()).collect();
    let antitone = sets
        .windows(2)
        .all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| !a || *b));
    let counts: Vec<usize> = sets.iter().map(|s| s.iter().filter(|&&b| b).count()).collect();
    rep.check("8c", antitone, format!("K nested in lambda over {lambdas:?}: good counts {counts:?}"));

    let idx = v.select(&Region::ball(vec![0.0; 3], 0.6));
    let mut a = DMatrix::<f64>::zeros(3, 3);
    for &i in &idx {
        let t = v.tangent_rows(i);
        let w = v.mass_of(i);
        for k in 0..2 {
            let row = &t[3 * k..3 * k + 3];
            for p in 0..3 {
                for q in 0..3 {
                    a[(p, q)] += w * row[p] * row[q];
                }
            }
        }
    }
    let best = best_fit_plane(&a, 2).unwrap().plane;
    let score = |p: &ProjectionPlane| (a.clone() * p.projection_matrix()).trace();
    let top = score(&best);
    let mut beaten = 0;
    for _ in 0..200 {
        let rows: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = ProjectionPlane::from_spanning_rows(2, 3, &rows).unwrap();
        if score(&p) > top * (1.0 + 1e-12) {
            beaten += 1;
        }
    }
    rep.check("8d", beaten == 0, format!("best-fit plane against 200 random planes: beaten {beaten} times"));

    let specs: Vec<CylinderSpec> = [0.25, 0.5, 1.0, 2.0]
        .iter()
        .map(|&r| CylinderSpec::standard(2, 1, vec![0.1, -0.2], r))
        .collect();
    let render = || {
        let reps: Vec<_> = specs.iter().map(|c| cylindrical_excess(&v, c).unwrap()).collect();
        reports_to_csv(&reps) + &decay_profile(&v, &[0.0; 3], 1.0, 2, 1).unwrap().to_csv()
    };
    let first = render();
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(render);
    let regenerated = {
        let v2 = generate_graph(&bump_graph(2, 4.0, centers[..5].to_vec(), 0.02, 0.1).with_fine_radius(1.1), 1.0 / 64.0)
            .unwrap()
            .varifold;
        let reps: Vec<_> = specs.iter().map(|c| cylindrical_excess(&v2, c).unwrap()).collect();
        reports_to_csv(&reps) + &decay_profile(&v2, &[0.0; 3], 1.0, 2, 1).unwrap().to_csv()
    };
    rep.check(
        "8e",
        first == serial && first == regenerated,
        format!("CSV identical across reruns, thread counts and regeneration ({} bytes)", first.len()),
    );
}

fn main() -> ExitCode {
    let mut rep = Report {
        failures: Vec::new(),
        drift_alarms: 0,
    };
    let criteria: [(&str, fn(&mut Report)); 8] = [
        ("catenoid d1 law", c1_catenoid_d1),
        ("catenoid d2 height law", c2_catenoid_d2),
        ("missed-mass d3 law", c3_missed_mass),
        ("Lipschitz approximation round trip", c4_lipschitz_round_trip),
        ("measure-estimate scaling", c5_measure_estimate),
        ("excess decay", c6_excess_decay),
        ("stationarity validators", c7_validators),
        ("property suites", c8_properties),
    ];
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        println!("-- criterion {}: {name}", k + 1);
        run(&mut rep);
        println!("   ({:.1}s)", t.elapsed().as_secs_f64());
    }
    println!(
        "acceptance: {} failing, {} baseline drift alarm(s); universal constants are tracked as baselines, not reproduced",
        rep.failures.len(),
        rep.drift_alarms
    );
    if rep.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing: {}", rep.failures.join(", "));
        ExitCode::FAILURE
    }
}
