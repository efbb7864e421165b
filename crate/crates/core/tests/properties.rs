use proptest::prelude::*;
use varlab::approx::single_linkage;
use varlab::excess::{cylindrical_excess, spherical_excess, CylinderSpec};
use varlab::models::{generate_graph, generate_plane, GraphSpec, PlaneSpec, Sheet};
use varlab::numerics::loglog_fit;
use varlab::qvalued::{eta_average, g_metric, DiskGrid, QPoint};
use varlab::regularity::HarmonicBasis;

fn qpoint(q: usize, n: usize) -> impl Strategy<Value = QPoint> {
    prop::collection::vec(-2.0f64..2.0, q * n).prop_map(move |v| QPoint::new(q, n, v).unwrap())
}

fn triple() -> impl Strategy<Value = (QPoint, QPoint, QPoint)> {
    (1usize..=7, 1usize..=3).prop_flat_map(|(q, n)| (qpoint(q, n), qpoint(q, n), qpoint(q, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn g_metric_is_a_metric((a, b, c) in triple()) {
        let ab = g_metric(&a, &b).unwrap();
        prop_assert!(g_metric(&a, &a).unwrap() <= 1e-12);
        prop_assert!((ab - g_metric(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(g_metric(&a, &c).unwrap() <= ab + g_metric(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn g_metric_ignores_labels((a, b, _) in triple(), seed in any::<u64>()) {
        let q = a.q();
        let mut perm: Vec<usize> = (0..q).collect();
        let mut s = seed;
        for i in (1..q).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pa = a.permuted(&perm);
        prop_assert!((g_metric(&pa, &b).unwrap() - g_metric(&a, &b).unwrap()).abs() <= 1e-12);
        let (ea, ep) = (eta_average(&a), eta_average(&pa));
        for (x, y) in ea.iter().zip(&ep) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_linkage_joins_close_points(pts in prop::collection::vec(-1.0f64..1.0, 2..60), gap in 0.01f64..0.3) {
        let labels = single_linkage(&pts, 1, gap);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                if (pts[i] - pts[j]).abs() <= gap {
                    prop_assert_eq!(labels[i], labels[j]);
                }
            }
        }
        // distinct clusters are separated by more than the gap
        let mut sorted: Vec<(f64, usize)> = pts.iter().copied().zip(labels.iter().copied()).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in sorted.windows(2) {
            if w[0].1 != w[1].1 {
                prop_assert!(w[1].0 - w[0].0 > gap);
            }
        }
    }

    #[test]
    fn disk_grid_cells_meet_the_disk(m in 1usize..=3, k in 2u32..=5, r in 0.5f64..2.0) {
        let h = 1.0 / (1u32 << k) as f64;
        let g = DiskGrid::new(m, h, r).unwrap();
        let mut total = 0.0;
        for i in 0..g.len() {
            let x = g.position(i);
            let half_diag = 0.5 * h * (m as f64).sqrt();
            prop_assert!(x.iter().map(|c| c * c).sum::<f64>().sqrt() <= r + half_diag + 1e-12);
            prop_assert!(g.fraction(i) > 0.0 && g.fraction(i) <= 1.0);
            total += g.cell_measure(i);
        }
        prop_assert!((total - g.total_measure()).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn harmonic_basis_elements_are_harmonic(m in 1usize..=3, degree in 0usize..=4, x in prop::collection::vec(-0.5f64..0.5, 3)) {
        let b = HarmonicBasis::new(m, degree);
        let x = &x[..m];
        let e = 1e-3;
        for k in 0..b.len() {
            let f = |p: &[f64]| b.eval(p)[k];
            let mut lap = -2.0 * m as f64 * f(x);
            for i in 0..m {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += e;
                xm[i] -= e;
                lap += f(&xp) + f(&xm);
            }
            prop_assert!((lap / (e * e)).abs() < 1e-5);
        }
    }

    #[test]
    fn loglog_fit_recovers_power_laws(slope in -3.0f64..3.0, c in 0.1f64..10.0) {
        let xs: Vec<f64> = (0..8).map(|k| 2f64.powi(-k)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| c * x.powf(slope)).collect();
        let fit = loglog_fit(&xs, &ys).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn excess_is_bounded_and_vanishes_on_planes(a1 in -0.3f64..0.3, a2 in -0.3f64..0.3, r in 0.3f64..1.0) {
        let spec = GraphSpec::new(2, 1, 1.5, vec![Sheet::affine(1, vec![a1, a2], vec![0.0])]);
        let v = generate_graph(&spec, 1.0 / 16.0).unwrap().varifold;
        let cyl = cylindrical_excess(&v, &CylinderSpec::standard(2, 1, vec![0.0; 2], r)).unwrap();
        // |P_T − P_π|² ≤ 2m pointwise
        prop_assert!(cyl.value >= 0.0 && cyl.value <= 4.0 * cyl.mass_ratio + 1e-12);
        // tilt t: excess density 2 sin²θ per unit mass
        let t2 = a1 * a1 + a2 * a2;
        let expect = 2.0 * t2 / (1.0 + t2) * cyl.mass_ratio;
        prop_assert!((cyl.value - expect).abs() <= 1e-9 * expect.max(1.0));
        // a single plane is its own best fit
        prop_assert!(spherical_excess(&v, &[0.0; 3], r).unwrap().value <= 1e-12);
    }

    #[test]
    fn spherical_excess_is_dilation_invariant(k in 1i32..=3, r in 0.5f64..1.0) {
        let spec = GraphSpec::single(2, 2.0, |x: &[f64]| 0.05 * (x[0] * x[0] - x[1] * x[1]), |x: &[f64]| vec![0.1 * x[0], -0.1 * x[1]]);
        let v = generate_graph(&spec, 1.0 / 16.0).unwrap().varifold;
        let s = 2f64.powi(k);
        let w = v.rescale(&[0.0; 3], 1.0 / s);
        let a = spherical_excess(&v, &[0.0; 3], r).unwrap().value;
        let b = spherical_excess(&w, &[0.0; 3], r * s).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
    }

    #[test]
    fn plane_mass_is_multiplicity_times_area(q in 1u32..=3, r in 0.5f64..1.5) {
        let v = generate_plane(&PlaneSpec::flat(2, 1, 2.0).with_multiplicity(q), 1.0 / 32.0).unwrap();
        let theta = v.density_ratio(&[0.0; 3], r).unwrap();
        prop_assert!((theta - q as f64).abs() < 0.05 * q as f64);
    }
}
