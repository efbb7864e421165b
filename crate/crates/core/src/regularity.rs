//! Harmonic approximation of Q-valued grid functions and the excess-decay
//! experiment.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::excess::spherical_excess;
use crate::numerics::{condition_number, least_squares, loglog_fit, omega};
use crate::qvalued::{dirichlet_energy, QGridFunction};
use crate::varifold::{DiscreteVarifold, Region};

/// Largest accepted condition number of the normal matrix.
pub const MAX_NORMAL_CONDITION: f64 = 1e12;

/// Harmonic polynomials on R^m of degree ≤ `degree`, as monomial
/// coefficient rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicBasis {
    m: usize,
    degree: usize,
    monomials: Vec<Vec<u32>>,
    /// `len × monomials.len()`.
    coeffs: Vec<Vec<f64>>,
}

fn monomials_of_degree(m: usize, k: u32) -> Vec<Vec<u32>> {
    if m == 1 {
        return vec![vec![k]];
    }
    let mut out = Vec::new();
    for first in (0..=k).rev() {
        for mut rest in monomials_of_degree(m - 1, k - first) {
            let mut e = vec![first];
            e.append(&mut rest);
            out.push(e);
        }
    }
    out
}

impl HarmonicBasis {
    /// Kernel of the Laplacian on each space of homogeneous polynomials.
    pub fn new(m: usize, degree: usize) -> Self {
        let mut monomials = Vec::new();
        let mut coeffs: Vec<Vec<f64>> = Vec::new();
        for k in 0..=degree as u32 {
            let hom = monomials_of_degree(m, k);
            let offset = monomials.len();
            monomials.extend(hom.iter().cloned());
            if k < 2 {
                for j in 0..hom.len() {
                    coeffs.push(sparse_row(offset + j));
                }
                continue;
            }
            let lower = monomials_of_degree(m, k - 2);
            let lap = DMatrix::from_fn(lower.len(), hom.len(), |r, c| {
                let mut t = 0.0;
                for i in 0..m {
                    if hom[c][i] >= 2 {
                        let mut e = hom[c].clone();
                        e[i] -= 2;
                        if e == lower[r] {
                            t += (hom[c][i] * (hom[c][i] - 1)) as f64;
                        }
                    }
                }
                t
            });
            let eig = SymmetricEigen::new(lap.transpose() * &lap);
            let kernel = hom.len() - lower.len();
            let mut order: Vec<usize> = (0..hom.len()).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
            for &col in order.iter().take(kernel) {
                let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
                if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
                    if first < 0.0 {
                        v.iter_mut().for_each(|x| *x = -*x);
                    }
                }
                let mut row = vec![0.0; offset];
                row.extend(v);
                coeffs.push(row);
            }
        }
        let total = monomials.len();
        for row in &mut coeffs {
            row.resize(total, 0.0);
        }
        Self {
            m,
            degree,
            monomials,
            coeffs,
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    fn monomial_values(&self, x: &[f64]) -> Vec<f64> {
        self.monomials
            .iter()
            .map(|e| e.iter().zip(x).map(|(&p, &xi)| xi.powi(p as i32)).product())
            .collect()
    }

    /// Basis values at `x`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mv = self.monomial_values(x);
        self.coeffs
            .iter()
            .map(|row| row.iter().zip(&mv).map(|(c, v)| c * v).sum())
            .collect()
    }

    /// Gradient of `Σ_b c_b φ_b` at `x`.
    pub fn gradient(&self, c: &[f64], x: &[f64]) -> Vec<f64> {
        let mut poly = vec![0.0; self.monomials.len()];
        for (cb, row) in c.iter().zip(&self.coeffs) {
            for (p, r) in poly.iter_mut().zip(row) {
                *p += cb * r;
            }
        }
        let mut g = vec![0.0; self.m];
        for (e, &a) in self.monomials.iter().zip(&poly) {
            if a == 0.0 {
                continue;
            }
            for i in 0..self.m {
                if e[i] == 0 {
                    continue;
                }
                let mut t = a * e[i] as f64;
                for (j, (&p, &xj)) in e.iter().zip(x).enumerate() {
                    let p = if j == i { p - 1 } else { p };
                    t *= xj.powi(p as i32);
                }
                g[i] += t;
            }
        }
        g
    }
}

fn sparse_row(j: usize) -> Vec<f64> {
    let mut r = vec![0.0; j + 1];
    r[j] = 1.0;
    r
}

/// Result of [`harmonic_fit`].
#[derive(Debug, Clone)]
pub struct HarmonicFit {
    /// Single-valued fit on the same grid (`Q = 1`).
    pub u: QGridFunction,
    pub basis: HarmonicBasis,
    /// Basis coefficients, one vector per target component.
    pub coefficients: Vec<Vec<f64>>,
    pub degree_requested: usize,
    pub degree_used: usize,
    pub condition: f64,
    /// `∫ G(f, Q⟦u⟧)²`.
    pub residual: f64,
    /// `∫ |∇u|²` from the analytic gradient.
    pub dirichlet_u: f64,
    pub dirichlet_f: f64,
}

impl HarmonicFit {
    pub fn degree_reduced(&self) -> bool {
        self.degree_used < self.degree_requested
    }
}

/// Weighted least-squares fit of `η∘f` by harmonic polynomials.
pub fn harmonic_fit(f: &QGridFunction, degree_cap: usize) -> Result<HarmonicFit> {
    let dir = dirichlet_energy(f);
    if dir > 1.0 + 1e-12 {
        return Err(Error::Precondition(format!(
            "Dir(f) = {dir:.6} exceeds 1; rescale the function first"
        )));
    }
    let grid = f.grid();
    let (m, n, q) = (f.m(), f.n(), f.q());
    let positions: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.position(i)).collect();
    let sw: Vec<f64> = (0..grid.len()).map(|i| grid.cell_measure(i).sqrt()).collect();
    let eta = f.eta();
    let mut degree = degree_cap;
    loop {
        let basis = HarmonicBasis::new(m, degree);
        let rows: Vec<Vec<f64>> = positions.par_iter().map(|x| basis.eval(x)).collect();
        let a = DMatrix::from_fn(grid.len(), basis.len(), |i, j| sw[i] * rows[i][j]);
        let cond = condition_number(&a).powi(2);
        if cond > MAX_NORMAL_CONDITION && degree > 0 {
            degree -= 1;
            continue;
        }
        let mut coefficients = Vec::with_capacity(n);
        for c in 0..n {
            let y = DVector::from_iterator(grid.len(), (0..grid.len()).map(|i| sw[i] * eta[i * n + c]));
            coefficients.push(least_squares(&a, &y).iter().copied().collect::<Vec<f64>>());
        }
        let mut values = Vec::with_capacity(grid.len() * n);
        for row in &rows {
            for coef in &coefficients {
                values.push(row.iter().zip(coef).map(|(r, c)| r * c).sum::<f64>());
            }
        }
        let mut residual = 0.0;
        let mut dirichlet_u = 0.0;
        for (i, x) in positions.iter().enumerate() {
            let fv = f.node_values(i);
            let uv = &values[i * n..(i + 1) * n];
            let mut g2 = 0.0;
            for s in 0..q {
                for c in 0..n {
                    g2 += (fv[s * n + c] - uv[c]).powi(2);
                }
            }
            residual += grid.cell_measure(i) * g2;
            for coef in &coefficients {
                dirichlet_u += grid.cell_measure(i) * basis.gradient(coef, x).iter().map(|g| g * g).sum::<f64>();
            }
        }
        let u = QGridFunction::from_values(grid.clone(), 1, n, values)?;
        return Ok(HarmonicFit {
            u,
            basis,
            coefficients,
            degree_requested: degree_cap,
            degree_used: degree,
            condition: cond,
            residual,
            dirichlet_u,
            dirichlet_f: dir,
        });
    }
}

// ---------------------------------------------------------------- decay

/// Spherical excess at dyadic radii with a log-log slope fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayProfile {
    pub radii: Vec<f64>,
    pub excess: Vec<f64>,
    pub included: Vec<bool>,
    /// Excess values at or below this are excluded from the fit.
    pub floor: f64,
    pub fitted_exponent: Option<f64>,
    pub fit_residual: f64,
    /// Every excess is zero.
    pub flat: bool,
}

impl DecayProfile {
    /// CSV `r,excess,excess_over_r2,included_in_fit`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,excess,excess_over_r2,included_in_fit\n");
        for ((r, e), inc) in self.radii.iter().zip(&self.excess).zip(&self.included) {
            let _ = writeln!(s, "{r:.12e},{e:.12e},{:.12e},{inc}", e / (r * r));
        }
        s
    }
}

/// `E(V, B_{r₀2^{−k}}(x))` for `k = 0..=levels`; values at or below the
/// floor `E(r₀)(h/r₀)²` are excluded from the fit.
pub fn decay_profile(v: &DiscreteVarifold, x: &[f64], r0: f64, levels: usize, q: usize) -> Result<DecayProfile> {
    let h = v.mesh_scale();
    let r_min = r0 / (1u64 << levels) as f64;
    if r_min < 8.0 * h {
        return Err(Error::Resolution {
            radius: r_min,
            limit: 8.0 * h,
        });
    }
    let density = v.density_ratio(x, r_min)?;
    if (density - q as f64).abs() >= 0.5 {
        return Err(Error::Precondition(format!(
            "density ratio {density:.4} at the center does not round to Q = {q}"
        )));
    }
    let radii: Vec<f64> = (0..=levels).map(|k| r0 / (1u64 << k) as f64).collect();
    let excess: Vec<f64> = radii
        .par_iter()
        .map(|&r| spherical_excess(v, x, r).map(|e| e.value))
        .collect::<Result<_>>()?;
    let floor = excess[0] * (h / r0).powi(2);
    let flat = excess.iter().all(|&e| e == 0.0);
    let included: Vec<bool> = excess.iter().map(|&e| e > floor && e > 0.0).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = radii
        .iter()
        .zip(&excess)
        .zip(&included)
        .filter(|(_, &inc)| inc)
        .map(|((r, e), _)| (*r, *e))
        .unzip();
    let fit = if flat || xs.len() < 2 { None } else { loglog_fit(&xs, &ys) };
    Ok(DecayProfile {
        radii,
        excess,
        included,
        floor,
        fitted_exponent: fit.map(|f| f.slope),
        fit_residual: fit.map_or(0.0, |f| f.rms_residual),
        flat,
    })
}

/// Thresholds for one decay step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredecayOptions {
    pub delta: f64,
    pub eta_grid: Vec<f64>,
    /// `ε` in the three hypotheses.
    pub epsilon: f64,
    /// Local density radius in mesh units.
    pub density_scale: f64,
    /// Most samples evaluated for the low-density hypothesis.
    pub density_samples: usize,
}

impl Default for PredecayOptions {
    fn default() -> Self {
        Self {
            delta: 0.25,
            eta_grid: vec![0.05, 0.1, 0.2],
            epsilon: 0.05,
            density_scale: 16.0,
            density_samples: 20_000,
        }
    }
}

/// Measured hypotheses of the decay step.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub excess_b5: f64,
    pub excess_small: bool,
    /// Estimated `H^m({Θ < Q} ∩ B₅)`.
    pub low_density_mass: f64,
    pub low_density_ok: bool,
    pub mass_ratio_b1: f64,
    pub mass_ratio_b5: f64,
    pub pinching_ok: bool,
}

impl HypothesisReport {
    pub fn all_hold(&self) -> bool {
        self.excess_small && self.low_density_ok && self.pinching_ok
    }

    /// Names of the hypotheses that fail.
    pub fn broken(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.excess_small {
            out.push("excess_small");
        }
        if !self.low_density_ok {
            out.push("low_density");
        }
        if !self.pinching_ok {
            out.push("mass_pinching");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Passed,
    Failed,
    /// Some hypothesis fails; the inequality is still measured.
    NotApplicable,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Passed => "passed",
            Verdict::Failed => "failed",
            Verdict::NotApplicable => "not_applicable",
        }
    }
}

/// `E(V, B_{5η}) ≤ η^{2−2δ} E(V, B₅)` at one `η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayCandidate {
    pub eta: f64,
    pub lhs: f64,
    pub rhs: f64,
}

impl DecayCandidate {
    /// `lhs / rhs`, zero when both vanish.
    pub fn ratio(&self) -> f64 {
        if self.lhs == 0.0 {
            0.0
        } else if self.rhs == 0.0 {
            f64::INFINITY
        } else {
            self.lhs / self.rhs
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredecayReport {
    pub eta_used: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub inequality_holds: bool,
    pub verdict: Verdict,
    pub hypotheses: HypothesisReport,
    pub candidates: Vec<DecayCandidate>,
}

impl PredecayReport {
    pub fn csv_header() -> &'static str {
        "eta,lhs,rhs,ratio,inequality_holds,verdict,excess_b5,excess_small,low_density_mass,low_density_ok,mass_ratio_b1,mass_ratio_b5,pinching_ok"
    }

    pub fn to_csv(&self) -> String {
        let hy = &self.hypotheses;
        let mut s = String::from(Self::csv_header());
        s.push('\n');
        for c in &self.candidates {
            let _ = writeln!(
                s,
                "{:.6e},{:.12e},{:.12e},{:.12e},{},{},{:.12e},{},{:.12e},{},{:.12e},{:.12e},{}",
                c.eta,
                c.lhs,
                c.rhs,
                c.ratio(),
                c.lhs <= c.rhs,
                if c.eta == self.eta_used { self.verdict.as_str() } else { "-" },
                hy.excess_b5,
                hy.excess_small,
                hy.low_density_mass,
                hy.low_density_ok,
                hy.mass_ratio_b1,
                hy.mass_ratio_b5,
                hy.pinching_ok
            );
        }
        s
    }
}

/// One decay step about the origin at unit scale (`B₅`), choosing the
/// best-ratio `η` from the grid.
pub fn predecay_step(v: &DiscreteVarifold, q: usize, opts: &PredecayOptions) -> Result<PredecayReport> {
    if !(opts.delta > 0.0 && opts.delta < 1.0) {
        return Err(invalid(format!("δ ∈ (0,1) required, got {}", opts.delta)));
    }
    let (m, d) = (v.m(), v.dim());
    let h = v.mesh_scale();
    let origin = vec![0.0; d];
    let excess_b5 = spherical_excess(v, &origin, 5.0)?.value;

    // low-density mass over an evenly strided subset of B₅
    let idx = v.select(&Region::ball(origin.clone(), 5.0));
    let stride = idx.len().div_ceil(opts.density_samples.max(1)).max(1);
    let probe: Vec<usize> = idx.iter().copied().step_by(stride).collect();
    let rho = opts.density_scale * h;
    let low: Vec<bool> = probe
        .par_iter()
        .map(|&i| {
            v.density_ratio(v.position(i), rho)
                .map(|t| t.round() < q as f64)
                .unwrap_or(true)
        })
        .collect();
    let probe_mass: f64 = probe.iter().map(|&i| v.mass_of(i)).sum();
    let low_mass: f64 = probe.iter().zip(&low).filter(|(_, &l)| l).map(|(&i, _)| v.mass_of(i)).sum();
    let total_mass: f64 = idx.iter().map(|&i| v.mass_of(i)).sum();
    let low_density_mass = if probe_mass > 0.0 { low_mass / probe_mass * total_mass + 0.0 } else { 0.0 };

    let mass_ratio_b1 = v.mass(&Region::ball(origin.clone(), 1.0)) / omega(m);
    let mass_ratio_b5 = total_mass / (omega(m) * 5f64.powi(m as i32));
    let eps = opts.epsilon;
    let qf = q as f64;
    // monotonicity between B₁ and B₅ holds only up to the boundary cells of B₁
    let slack = 2.0 * m as f64 * h * qf;
    let hypotheses = HypothesisReport {
        excess_b5,
        excess_small: excess_b5 < eps,
        low_density_mass,
        low_density_ok: low_density_mass < eps,
        mass_ratio_b1,
        mass_ratio_b5,
        pinching_ok: qf - eps <= mass_ratio_b1 && mass_ratio_b1 <= mass_ratio_b5 + slack && mass_ratio_b5 < qf + eps,
    };

    let mut candidates = Vec::new();
    for &eta in &opts.eta_grid {
        if 5.0 * eta < 4.0 * h {
            continue;
        }
        let lhs = spherical_excess(v, &origin, 5.0 * eta)?.value;
        candidates.push(DecayCandidate {
            eta,
            lhs,
            rhs: eta.powf(2.0 - 2.0 * opts.delta) * excess_b5,
        });
    }
    let best = candidates
        .iter()
        .copied()
        .min_by(|a, b| a.ratio().total_cmp(&b.ratio()).then(a.eta.total_cmp(&b.eta)))
        .ok_or_else(|| invalid("no η in the grid is resolvable at this mesh scale"))?;
    let inequality_holds = best.lhs <= best.rhs;
    let verdict = if !hypotheses.all_hold() {
        Verdict::NotApplicable
    } else if inequality_holds {
        Verdict::Passed
    } else {
        Verdict::Failed
    };
    Ok(PredecayReport {
        eta_used: best.eta,
        lhs: best.lhs,
        rhs: best.rhs,
        inequality_holds,
        verdict,
        hypotheses,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate_graph, generate_plane, transverse_planes, GraphSpec, PlaneSpec};
    use crate::qvalued::{weak_laplacian_pairing, DiskGrid, QPoint};
    use crate::testfn::RadialBump;

    #[test]
    fn basis_dimensions_and_harmonicity() {
        // dim H_k(R^m) = C(k+m−1, m−1) − C(k+m−3, m−1)
        assert_eq!(HarmonicBasis::new(2, 4).len(), 9);
        assert_eq!(HarmonicBasis::new(3, 2).len(), 9);
        let b = HarmonicBasis::new(2, 3);
        // finite-difference Laplacian of each basis function vanishes
        let x = [0.3, -0.2];
        let e = 1e-3;
        for k in 0..b.len() {
            let f = |p: [f64; 2]| b.eval(&p)[k];
            let lap = (f([x[0] + e, x[1]]) + f([x[0] - e, x[1]]) + f([x[0], x[1] + e]) + f([x[0], x[1] - e])
                - 4.0 * f(x))
                / (e * e);
            assert!(lap.abs() < 1e-6, "{k}: {lap}");
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let b = HarmonicBasis::new(3, 3);
        let c: Vec<f64> = (0..b.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = [0.2, 0.1, -0.3];
        let g = b.gradient(&c, &x);
        let val = |p: &[f64]| b.eval(p).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            assert!(((val(&xp) - val(&xm)) / 2e-6 - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn exact_harmonic_polynomial_is_recovered() {
        let grid = DiskGrid::new(2, 1.0 / 32.0, 1.0).unwrap();
        let u1 = |x: &[f64]| 0.1 * (x[0] * x[0] - x[1] * x[1]) + 0.05 * (x[0].powi(3) - 3.0 * x[0] * x[1] * x[1]);
        let f = QGridFunction::from_fn(grid, 2, 1, |x| QPoint::constant(2, &[u1(x)])).unwrap();
        let fit = harmonic_fit(&f, 4).unwrap();
        assert!(fit.residual < 1e-10, "{}", fit.residual);
        assert!(fit.dirichlet_u <= fit.dirichlet_f / 2.0 * (1.0 + 0.05));
        let phi = RadialBump::new(vec![0.1, 0.0], 0.6);
        let pairing = weak_laplacian_pairing(&fit.u, &phi).unwrap();
        assert!(pairing[0].abs() < 1e-3);
    }

    #[test]
    fn dirichlet_precondition() {
        let grid = DiskGrid::new(2, 1.0 / 16.0, 1.0).unwrap();
        let f = QGridFunction::from_fn(grid, 1, 1, |x| QPoint::constant(1, &[3.0 * x[0]])).unwrap();
        assert!(matches!(harmonic_fit(&f, 2), Err(Error::Precondition(_))));
    }

    #[test]
    fn flat_profile_and_plane_predecay() {
        let v = generate_plane(&PlaneSpec::flat(2, 1, 6.5), 1.0 / 16.0).unwrap();
        let p = decay_profile(&v, &[0.0; 3], 1.0, 1, 1).unwrap();
        assert!(p.flat);
        assert!(p.fitted_exponent.is_none());
        assert_eq!(p.radii.len(), p.excess.len());
        let r = predecay_step(&v, 1, &PredecayOptions::default()).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 0.0);
        assert_eq!(r.verdict, Verdict::Passed);
    }

    #[test]
    fn saddle_graph_decays_quadratically() {
        let eps = 0.05;
        let spec = GraphSpec::single(
            2,
            1.1,
            move |x: &[f64]| eps * (x[0] * x[0] - x[1] * x[1]),
            move |x: &[f64]| vec![2.0 * eps * x[0], -2.0 * eps * x[1]],
        );
        let v = generate_graph(&spec, 1.0 / 64.0).unwrap().varifold;
        let p = decay_profile(&v, &[0.0; 3], 1.0, 3, 1).unwrap();
        let k = p.fitted_exponent.unwrap();
        assert!((k - 2.0).abs() < 0.1, "{k}");
        // oracle 4ε²r² for small ε
        assert!((p.excess[0] - 4.0 * eps * eps).abs() / (4.0 * eps * eps) < 0.05);
    }

    #[test]
    fn cone_fails_with_broken_hypothesis() {
        let v = transverse_planes(2, 1, 0.15, 5.5, 1.0 / 16.0).unwrap();
        let r = predecay_step(&v, 2, &PredecayOptions::default()).unwrap();
        assert!(!r.inequality_holds);
        assert_eq!(r.verdict, Verdict::NotApplicable);
        assert!(r.hypotheses.broken().contains(&"low_density"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + r.candidates.len());
    }
}
