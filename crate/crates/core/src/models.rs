//! Analytic model varifolds (planes, graphs, catenoids) and the explicit
//! catenoid asymptotics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grassmann::{orthonormalize_rows, ProjectionPlane};
use crate::numerics::{gauss_legendre, golden_min, integrate, least_squares, omega};
use crate::qvalued::QPoint;
use crate::varifold::DiscreteVarifold;

// ---------------------------------------------------------------- planes

/// A (possibly tilted, offset, multiple) m-plane sampled over the cube
/// `[-extent, extent]^m` of π₀-coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSpec {
    pub m: usize,
    pub n: usize,
    pub extent: f64,
    pub multiplicity: u32,
    pub tilt: ProjectionPlane,
    pub offset: Vec<f64>,
}

impl PlaneSpec {
    pub fn flat(m: usize, n: usize, extent: f64) -> Self {
        Self {
            m,
            n,
            extent,
            multiplicity: 1,
            tilt: ProjectionPlane::coordinate(m, n),
            offset: vec![0.0; m + n],
        }
    }

    pub fn with_multiplicity(mut self, q: u32) -> Self {
        self.multiplicity = q;
        self
    }

    pub fn with_tilt(mut self, tilt: ProjectionPlane) -> Self {
        self.tilt = tilt;
        self
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        self.offset = offset;
        self
    }
}

/// Cell-centered lattice points of the cube `[-extent, extent]^m` (rounded
/// outward to whole cells), optionally refined by `fine` inside a disk.
fn lattice_cells(m: usize, extent: f64, h: f64, fine: Option<(f64, usize)>) -> Vec<(Vec<f64>, f64)> {
    let coarse = fine.map_or(h, |(_, f)| h * f as f64);
    let half = (extent / coarse).ceil().max(1.0) as i64;
    let mut out = Vec::new();
    let mut k = vec![-half; m];
    loop {
        let lo: Vec<f64> = k.iter().map(|&v| v as f64 * coarse).collect();
        let refine = fine.is_some_and(|(r, _)| {
            let near: f64 = lo
                .iter()
                .map(|&a| {
                    let b = a + coarse;
                    let d = if a > 0.0 {
                        a
                    } else if b < 0.0 {
                        -b
                    } else {
                        0.0
                    };
                    d * d
                })
                .sum();
            near <= r * r
        });
        if refine {
            let f = fine.unwrap().1;
            let mut j = vec![0usize; m];
            loop {
                let c: Vec<f64> = lo
                    .iter()
                    .zip(&j)
                    .map(|(a, &jj)| a + (jj as f64 + 0.5) * h)
                    .collect();
                out.push((c, h.powi(m as i32)));
                let mut ax = m;
                let mut done = true;
                while ax > 0 {
                    ax -= 1;
                    j[ax] += 1;
                    if j[ax] < f {
                        done = false;
                        break;
                    }
                    j[ax] = 0;
                }
                if done {
                    break;
                }
            }
        } else {
            let c: Vec<f64> = lo.iter().map(|a| a + 0.5 * coarse).collect();
            out.push((c, coarse.powi(m as i32)));
        }
        let mut ax = m;
        let mut done = true;
        while ax > 0 {
            ax -= 1;
            k[ax] += 1;
            if k[ax] < half {
                done = false;
                break;
            }
            k[ax] = -half;
        }
        if done {
            break;
        }
    }
    out
}

/// Samples the plane as a graph over the π₀ lattice with exact cell areas.
pub fn generate_plane(spec: &PlaneSpec, h: f64) -> Result<DiscreteVarifold> {
    let (m, n) = (spec.m, spec.n);
    let d = m + n;
    if !(h > 0.0) {
        return Err(invalid("mesh scale must be positive"));
    }
    if spec.tilt.rank() != m || spec.tilt.dim() != d || spec.offset.len() != d {
        return Err(Error::DimensionMismatch {
            what: "plane spec",
            expected: d,
            found: spec.tilt.dim(),
        });
    }
    // B[k][j] = (b_k)_j for j < m; the plane is a graph over π₀ iff B is invertible
    let b = DMatrix::from_fn(m, m, |k, j| spec.tilt.basis_row(k)[j]);
    let det = b.determinant();
    if det.abs() < 1e-12 {
        return Err(invalid("plane is not a graph over the coordinate plane"));
    }
    let bt_inv = b.transpose().try_inverse().ok_or_else(|| invalid("singular tilt"))?;
    let jac = 1.0 / det.abs();
    let cells = lattice_cells(m, spec.extent, h, None);
    let mut pos = Vec::with_capacity(cells.len() * d);
    let mut tan = Vec::with_capacity(cells.len() * m * d);
    let mut w = Vec::with_capacity(cells.len());
    for (u, area) in &cells {
        let rhs = DVector::from_iterator(m, u.iter().zip(&spec.offset).map(|(a, o)| a - o));
        let c = &bt_inv * rhs;
        for j in 0..d {
            let mut z = spec.offset[j];
            for k in 0..m {
                z += c[k] * spec.tilt.basis_row(k)[j];
            }
            pos.push(if j < m { u[j] } else { z });
        }
        tan.extend_from_slice(spec.tilt.basis());
        w.push(area * jac);
    }
    let mult = vec![spec.multiplicity; w.len()];
    DiscreteVarifold::new(m, n, h, pos, tan, w, mult)
}

// ---------------------------------------------------------------- graphs

type VecFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// One sheet `x ↦ u(x) ∈ Rⁿ` of a Q-valued graph, with its Jacobian
/// (`n × m`, row-major) and multiplicity.
#[derive(Clone)]
pub struct Sheet {
    pub multiplicity: u32,
    pub value: VecFn,
    pub jacobian: VecFn,
}

impl Sheet {
    pub fn new<F, G>(multiplicity: u32, value: F, jacobian: G) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            multiplicity,
            value: Arc::new(value),
            jacobian: Arc::new(jacobian),
        }
    }

    /// Affine sheet `x ↦ A x + b`.
    pub fn affine(multiplicity: u32, a: Vec<f64>, b: Vec<f64>) -> Self {
        let n = b.len();
        let m = a.len() / n.max(1);
        let a2 = a.clone();
        Self::new(
            multiplicity,
            move |x| {
                (0..n)
                    .map(|i| b[i] + (0..m).map(|j| a[i * m + j] * x[j]).sum::<f64>())
                    .collect()
            },
            move |_| a2.clone(),
        )
    }
}

/// A Q-valued graph over the cube `[-extent, extent]^m`.
#[derive(Clone)]
pub struct GraphSpec {
    pub m: usize,
    pub n: usize,
    pub extent: f64,
    /// Sample at `h` inside this disk and at `4h` outside it.
    pub fine_radius: Option<f64>,
    pub sheets: Vec<Sheet>,
}

impl GraphSpec {
    pub fn new(m: usize, n: usize, extent: f64, sheets: Vec<Sheet>) -> Self {
        Self {
            m,
            n,
            extent,
            fine_radius: None,
            sheets,
        }
    }

    /// Single scalar sheet with gradient.
    pub fn single<F, G>(m: usize, extent: f64, u: F, grad: G) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self::new(m, 1, extent, vec![Sheet::new(1, move |x| vec![u(x)], grad)])
    }

    pub fn with_fine_radius(mut self, r: f64) -> Self {
        self.fine_radius = Some(r);
        self
    }

    pub fn q(&self) -> usize {
        self.sheets.iter().map(|s| s.multiplicity as usize).sum()
    }
}

/// A sampled graph together with its generating sheets.
#[derive(Clone)]
pub struct GraphVarifold {
    pub varifold: DiscreteVarifold,
    pub spec: GraphSpec,
}

impl GraphVarifold {
    /// `Σ_i Q_i ⟦u_i(x)⟧`.
    pub fn truth(&self, x: &[f64]) -> QPoint {
        let pts: Vec<(usize, Vec<f64>)> = self
            .spec
            .sheets
            .iter()
            .map(|s| (s.multiplicity as usize, (s.value)(x)))
            .collect();
        QPoint::from_weighted(&pts).expect("sheets share a target dimension")
    }

    /// Density `Θ((x, y))`: summed multiplicity of sheets through `(x, y)`
    /// (values within `tol` count as coincident).
    pub fn density_at(&self, x: &[f64], y: &[f64], tol: f64) -> u32 {
        self.spec
            .sheets
            .iter()
            .filter(|s| {
                let v = (s.value)(x);
                v.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= tol
            })
            .map(|s| s.multiplicity)
            .sum()
    }
}

/// Samples every sheet over the (optionally refined) lattice; weights are
/// cell areas times the graph's area factor `√det(I + DuᵀDu)`.
pub fn generate_graph(spec: &GraphSpec, h: f64) -> Result<GraphVarifold> {
    let (m, n) = (spec.m, spec.n);
    let d = m + n;
    if !(h > 0.0) {
        return Err(invalid("mesh scale must be positive"));
    }
    if spec.sheets.is_empty() {
        return Err(invalid("graph needs at least one sheet"));
    }
    let cells = lattice_cells(m, spec.extent, h, spec.fine_radius.map(|r| (r, 4)));
    let per_sheet: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<u32>)> = spec
        .sheets
        .iter()
        .map(|sheet| {
            let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = cells
                .par_iter()
                .map(|(x, area)| {
                    let u = (sheet.value)(x);
                    let du = (sheet.jacobian)(x);
                    let mut p = x.clone();
                    p.extend_from_slice(&u);
                    let mut t = vec![0.0; m * d];
                    for k in 0..m {
                        t[k * d + k] = 1.0;
                        for i in 0..n {
                            t[k * d + m + i] = du[i * m + k];
                        }
                    }
                    let g = DMatrix::from_fn(m, m, |a, b| {
                        (0..d).map(|j| t[a * d + j] * t[b * d + j]).sum::<f64>()
                    });
                    let j = g.determinant().sqrt();
                    orthonormalize_rows(m, d, &mut t);
                    (p, t, area * j)
                })
                .collect();
            let mut pos = Vec::with_capacity(rows.len() * d);
            let mut tan = Vec::with_capacity(rows.len() * m * d);
            let mut w = Vec::with_capacity(rows.len());
            for (p, t, wt) in rows {
                pos.extend(p);
                tan.extend(t);
                w.push(wt);
            }
            let q = vec![sheet.multiplicity; w.len()];
            (pos, tan, w, q)
        })
        .collect();
    let mut pos = Vec::new();
    let mut tan = Vec::new();
    let mut w = Vec::new();
    let mut q = Vec::new();
    for (p, t, ww, qq) in per_sheet {
        pos.extend(p);
        tan.extend(t);
        w.extend(ww);
        q.extend(qq);
    }
    Ok(GraphVarifold {
        varifold: DiscreteVarifold::new(m, n, h, pos, tan, w, q)?,
        spec: spec.clone(),
    })
}

/// Scalar graph `u(x) = a Σ_k ψ(|x − c_k| / r)` with the C³ bump
/// `ψ(t) = (1 − t²)^4` on `t < 1`.
pub fn bump_graph(m: usize, extent: f64, centers: Vec<Vec<f64>>, amplitude: f64, radius: f64) -> GraphSpec {
    let c1 = centers.clone();
    let value = move |x: &[f64]| -> f64 {
        c1.iter()
            .map(|c| {
                let t2 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (radius * radius);
                if t2 < 1.0 {
                    amplitude * (1.0 - t2).powi(4)
                } else {
                    0.0
                }
            })
            .sum()
    };
    let grad = move |x: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for c in &centers {
            let t2 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (radius * radius);
            if t2 < 1.0 {
                let k = -8.0 * amplitude * (1.0 - t2).powi(3) / (radius * radius);
                for (gi, (xi, ci)) in g.iter_mut().zip(x.iter().zip(c)) {
                    *gi += k * (xi - ci);
                }
            }
        }
        g
    };
    GraphSpec::single(m, extent, value, grad)
}

/// Union of two planes through the origin, tilted by `±θ` in the
/// `(x₁, x_{m+1})` coordinate plane; the stationary cone with Θ(0) = 2.
pub fn transverse_planes(m: usize, n: usize, theta: f64, extent: f64, h: f64) -> Result<DiscreteVarifold> {
    let a = generate_plane(
        &PlaneSpec::flat(m, n, extent).with_tilt(ProjectionPlane::rotated_coordinate(m, n, 0, m, theta)),
        h,
    )?;
    let b = generate_plane(
        &PlaneSpec::flat(m, n, extent).with_tilt(ProjectionPlane::rotated_coordinate(m, n, 0, m, -theta)),
        h,
    )?;
    a.union(&b)
}

// ---------------------------------------------------------------- catenoids

/// Rotationally symmetric catenoid in R^{m+1} with neck radius `scale`,
/// truncated at `|x'| ≤ r_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatenoidSpec {
    pub m: usize,
    pub scale: f64,
    pub r_max: f64,
}

impl CatenoidSpec {
    pub fn new(m: usize, scale: f64, r_max: f64) -> Self {
        Self { m, scale, r_max }
    }

    fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(invalid("catenoids need m ≥ 2"));
        }
        if !(self.r_max > self.scale && self.scale > 0.0) {
            return Err(invalid("catenoid needs r_max > scale > 0"));
        }
        Ok(())
    }
}

/// Angular sampling of the rotation orbits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AngularResolution {
    /// About `h` spacing along each orbit.
    Adaptive,
    /// Fixed count per circle.
    Fixed(usize),
}

/// Unit-scale profile data at arclength `s` from the waist:
/// `(ρ, ρ', z, z', A)` with `A(s) = ∫₀^s ρ^{m−1}`.
#[derive(Debug, Clone, Copy)]
struct ProfilePoint {
    rho: f64,
    drho: f64,
    z: f64,
    dz: f64,
    area: f64,
}

fn profile_m2(s: f64) -> ProfilePoint {
    let root = (1.0 + s * s).sqrt();
    ProfilePoint {
        rho: root,
        drho: s / root,
        z: s.asinh(),
        dz: 1.0 / root,
        area: 0.5 * (s * root + s.asinh()),
    }
}

/// Integrates `ρ'' = (m−1)ρ^{1−2m}`, `z' = ρ^{1−m}`, `A' = ρ^{m−1}` from the
/// waist with RK4, returning the profile at each requested `s ≥ 0` (sorted).
fn profile_ode(m: usize, targets: &[f64]) -> Vec<ProfilePoint> {
    let mf = m as f64;
    let rhs = |y: [f64; 4]| -> [f64; 4] {
        let (rho, v) = (y[0], y[1]);
        [v, (mf - 1.0) * rho.powf(1.0 - 2.0 * mf), rho.powf(1.0 - mf), rho.powf(mf - 1.0)]
    };
    let step = |y: [f64; 4], dt: f64| -> [f64; 4] {
        let k1 = rhs(y);
        let add = |a: [f64; 4], b: [f64; 4], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2], a[3] + c * b[3]];
        let k2 = rhs(add(y, k1, dt / 2.0));
        let k3 = rhs(add(y, k2, dt / 2.0));
        let k4 = rhs(add(y, k3, dt));
        let mut out = y;
        for i in 0..4 {
            out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    };
    const MAX_DT: f64 = 5e-4;
    let mut y = [1.0, 0.0, 0.0, 0.0];
    let mut s = 0.0;
    let mut out = Vec::with_capacity(targets.len());
    for &t in targets {
        let gap = t - s;
        if gap > 0.0 {
            let k = (gap / MAX_DT).ceil() as usize;
            let dt = gap / k as f64;
            for _ in 0..k {
                y = step(y, dt);
            }
            s = t;
        }
        let dz = y[0].powf(1.0 - mf);
        let norm = (y[1] * y[1] + dz * dz).sqrt();
        out.push(ProfilePoint {
            rho: y[0],
            drho: y[1] / norm,
            z: y[2],
            dz: dz / norm,
            area: y[3],
        });
    }
    out
}

/// Height `f(ρ) = ∫₁^ρ (t^{2(m−1)} − 1)^{−1/2} dt` of the unit catenoid
/// profile, via `t = 1 + u²` to remove the endpoint singularity.
pub fn catenoid_height(m: usize, rho: f64) -> Result<f64> {
    if m < 2 {
        return Err(invalid("catenoids need m ≥ 2"));
    }
    if rho < 1.0 {
        return Err(invalid("profile height needs ρ ≥ 1"));
    }
    if m == 2 {
        return Ok(rho.acosh());
    }
    let p = 2.0 * (m as f64 - 1.0);
    let integrand = move |u: f64| {
        if u == 0.0 {
            return 2.0 / p.sqrt();
        }
        // t^p − 1 = expm1(p·ln t) keeps precision near the waist
        2.0 * u / (p * (u * u).ln_1p()).exp_m1().sqrt()
    };
    Ok(integrate(integrand, 0.0, (rho - 1.0).sqrt(), 1e-13))
}

/// Arclength of the unit profile from the waist out to radius `rho`.
fn arclength_to(m: usize, rho: f64) -> f64 {
    if m == 2 {
        return (rho * rho - 1.0).sqrt();
    }
    // s(ρ) = ∫₁^ρ dt/√(1 − t^{2−2m}), again with t = 1 + u²
    let p = 2.0 * (m as f64 - 1.0);
    integrate(
        move |u: f64| {
            if u == 0.0 {
                return 2.0 / p.sqrt();
            }
            let lt = p * (u * u).ln_1p();
            2.0 * u * (lt.exp() / lt.exp_m1()).sqrt()
        },
        0.0,
        (rho - 1.0).sqrt(),
        1e-13,
    )
}

/// Cells of the unit sphere S^p ⊂ R^{p+1}: `(u, tangent rows, weight)`.
fn sphere_cells(p: usize, radius: f64, h: f64, ang: AngularResolution) -> Vec<(Vec<f64>, Vec<Vec<f64>>, f64)> {
    if p == 1 {
        let count = match ang {
            AngularResolution::Adaptive => ((2.0 * PI * radius / h).ceil() as usize).max(3),
            AngularResolution::Fixed(k) => k.max(3),
        };
        let dt = 2.0 * PI / count as f64;
        return (0..count)
            .map(|j| {
                let th = (j as f64 + 0.5) * dt;
                let (s, c) = th.sin_cos();
                (vec![c, s], vec![vec![-s, c]], dt)
            })
            .collect();
    }
    let count = match ang {
        AngularResolution::Adaptive => ((PI * radius / h).ceil() as usize).max(2),
        AngularResolution::Fixed(k) => k.div_ceil(2).max(2),
    };
    let (gx, gw) = gauss_legendre(8);
    let dphi = PI / count as f64;
    let mut out = Vec::new();
    for j in 0..count {
        let (a, b) = (j as f64 * dphi, (j + 1) as f64 * dphi);
        let w_phi: f64 = gx
            .iter()
            .zip(&gw)
            .map(|(x, w)| w * (0.5 * (a + b) + 0.5 * (b - a) * x).sin().powi(p as i32 - 1))
            .sum::<f64>()
            * 0.5
            * (b - a);
        let phi = 0.5 * (a + b);
        let (s, c) = phi.sin_cos();
        for (v, tv, wv) in sphere_cells(p - 1, radius * s, h, ang) {
            let mut u = vec![c];
            u.extend(v.iter().map(|x| s * x));
            let mut tangents = Vec::with_capacity(p);
            let mut dphi_u = vec![-s];
            dphi_u.extend(v.iter().map(|x| c * x));
            tangents.push(dphi_u);
            for t in tv {
                let mut row = vec![0.0];
                row.extend(t);
                tangents.push(row);
            }
            out.push((u, tangents, w_phi * wv));
        }
    }
    out
}

/// Samples both sheets of the catenoid, uniformly in profile arclength and
/// in angle, with exact rotational area elements as weights.
pub fn generate_catenoid(spec: &CatenoidSpec, h: f64, ang: AngularResolution) -> Result<DiscreteVarifold> {
    spec.validate()?;
    let m = spec.m;
    let a = spec.scale;
    if !(h > 0.0) || h > a / 4.0 {
        return Err(invalid(format!(
            "mesh scale {h} too coarse for neck radius {a} (need h ≤ scale/4)"
        )));
    }
    let s_max = arclength_to(m, spec.r_max / a);
    let hu = h / a;
    // even cell count over [−S, S] so no sample sits on the waist
    let half = (s_max / hu).ceil().max(1.0) as usize;
    let ds = s_max / half as f64;
    let mut targets = Vec::with_capacity(2 * half + 1);
    for k in 0..=2 * half {
        targets.push(k as f64 * ds / 2.0);
    }
    let prof: Vec<ProfilePoint> = if m == 2 {
        targets.iter().map(|&s| profile_m2(s)).collect()
    } else {
        profile_ode(m, &targets)
    };
    let d = m + 1;
    let am = a.powi(m as i32);
    let mut pos = Vec::new();
    let mut tan = Vec::new();
    let mut w = Vec::new();
    // rings from the bottom of the lower sheet to the top of the upper sheet
    for ring in 0..2 * half {
        let (cell, sign) = if ring < half {
            (half - 1 - ring, -1.0)
        } else {
            (ring - half, 1.0)
        };
        let lo = prof[2 * cell];
        let mid = prof[2 * cell + 1];
        let hi = prof[2 * cell + 2];
        let cell_area = (hi.area - lo.area) * am;
        let rho = a * mid.rho;
        let z = sign * a * mid.z;
        // along increasing s: lower sheet descends as s grows in magnitude
        let (dr, dz) = (mid.drho, mid.dz);
        for (u, tangents, wu) in sphere_cells(m - 1, rho, h, ang) {
            for k in 0..m {
                pos.push(rho * u[k]);
            }
            pos.push(z);
            for k in 0..m {
                tan.push(dr * u[k]);
            }
            tan.push(sign * dz);
            for t in &tangents {
                tan.extend_from_slice(t);
                tan.push(0.0);
            }
            w.push(cell_area * wu);
        }
    }
    debug_assert_eq!(pos.len() / d, w.len());
    let mult = vec![1; w.len()];
    DiscreteVarifold::new(m, 1, h, pos, tan, w, mult)
}

/// The literal closed form of the catenoid tilt excess in `C_R`,
/// `E_R = (4/(πR²))·[R√(R²−1) − R² + arccosh R + 1]`, whose integrand
/// measures tilt by `|ν − e₃|²` and normalizes by `π²R²`.
pub fn catenoid_excess_exact(r: f64) -> Result<f64> {
    if !(r > 1.0) {
        return Err(invalid(format!("catenoid excess needs R > 1, got {r}")));
    }
    Ok(4.0 / (PI * r * r) * catenoid_excess_integral(r))
}

/// `R√(R²−1) − R² + arccosh R + 1`, with the first two terms combined as
/// `−R/(R + √(R²−1))` to avoid cancellation.
fn catenoid_excess_integral(r: f64) -> f64 {
    let root = (r * r - 1.0).sqrt();
    -r / (r + root) + r.acosh() + 1.0
}

/// Same integral by adaptive quadrature of `2ρ²/√(ρ²−1) − 2ρ`, with
/// `ρ = cosh t` to remove the endpoint singularity.
pub fn catenoid_excess_quadrature(r: f64) -> Result<f64> {
    if !(r > 1.0) {
        return Err(invalid(format!("catenoid excess needs R > 1, got {r}")));
    }
    // integrand·dρ = (2cosh²t − 2cosh t·sinh t) dt
    let v = integrate(|t: f64| 2.0 * t.cosh() * (t.cosh() - t.sinh()), 0.0, r.acosh(), 1e-14);
    Ok(2.0 / (PI * PI * r * r) * 2.0 * PI * v)
}

/// Tilt excess `(1/(ω_m R^m))∫_{C_R}|p_T − p_{π₀}|²` of the unit m-catenoid,
/// equal to `4m·f(R)/R^m` with `f` the profile height.
pub fn catenoid_cylindrical_excess(m: usize, r: f64) -> Result<f64> {
    if !(r > 1.0) {
        return Err(invalid(format!("catenoid excess needs R > 1, got {r}")));
    }
    Ok(4.0 * m as f64 * catenoid_height(m, r)? / r.powi(m as i32))
}

/// `‖V‖(C_R)` of the unit 2-catenoid: `2π[ρ√(ρ²−1) + arccosh ρ]₁^R`.
pub fn catenoid_mass(r: f64) -> Result<f64> {
    if !(r >= 1.0) {
        return Err(invalid("catenoid mass needs R ≥ 1"));
    }
    Ok(2.0 * PI * (r * (r * r - 1.0).sqrt() + r.acosh()))
}

/// Scale-invariant height `2f(R)/R` over `E^{1/m}` for the unit m-catenoid
/// (definition-consistent excess).
pub fn catenoid_height_ratio(m: usize, r: f64) -> Result<f64> {
    let e = catenoid_cylindrical_excess(m, r)?;
    Ok(2.0 * catenoid_height(m, r)? / r / e.powf(1.0 / m as f64))
}

// ---------------------------------------------------------------- d-constants

/// The four catenoid limit ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DConstant {
    /// `E_R / (log R / R²)`.
    D1,
    /// `(2 arccosh R / R) / √(E_R |log E_R|)`.
    D2,
    /// `(‖V‖(C_{R_β})/R²) / (E_R^{1−2β}/|log E_R|)`.
    D3 { beta: f64 },
    /// `L^p` norm of `Df` outside `B_{R_β}`, over `R^{−2(1+β(p−2))/p} log(R)^{β(p−2)/p}`.
    D4 { beta: f64, p: f64 },
}

impl DConstant {
    pub fn label(&self) -> String {
        match self {
            DConstant::D1 => "d1".into(),
            DConstant::D2 => "d2".into(),
            DConstant::D3 { beta } => format!("d3(beta={beta})"),
            DConstant::D4 { beta, p } => format!("d4(beta={beta},p={p})"),
        }
    }

    fn validate(&self) -> Result<()> {
        let check_beta = |b: f64| {
            if b > 0.0 && b < 0.5 {
                Ok(())
            } else {
                Err(invalid(format!("β ∈ (0, 1/2) required, got {b}")))
            }
        };
        match *self {
            DConstant::D3 { beta } => check_beta(beta),
            DConstant::D4 { beta, p } => {
                check_beta(beta)?;
                if p > 2.0 {
                    Ok(())
                } else {
                    Err(invalid(format!("p > 2 required, got {p}")))
                }
            }
            _ => Ok(()),
        }
    }

    /// The ratio at radius `R`.
    pub fn ratio(&self, r: f64) -> Result<f64> {
        self.validate()?;
        let e = catenoid_excess_exact(r)?;
        let l = r.ln();
        Ok(match *self {
            DConstant::D1 => e / (l / (r * r)),
            DConstant::D2 => (2.0 * r.acosh() / r) / (e * e.ln().abs()).sqrt(),
            DConstant::D3 { beta } => {
                let mm = missed_mass_unit(e, beta);
                (mm.mass / (r * r)) / (e.powf(1.0 - 2.0 * beta) / e.ln().abs())
            }
            DConstant::D4 { beta, p } => {
                let g = lp_growth(beta, p, r)?;
                g.lhs / (r.powf(-2.0 * (1.0 + beta * (p - 2.0)) / p) * l.powf(beta * (p - 2.0) / p))
            }
        })
    }

    /// Correction terms in `L = log R` fitted alongside the constant.
    fn gauges(&self, r: f64) -> Vec<f64> {
        let l = r.ln();
        let ll = l.ln();
        let e = catenoid_excess_exact(r).unwrap_or(0.0);
        match *self {
            DConstant::D1 => vec![1.0 / l, 1.0 / (l * l), 1.0 / (l * l * l)],
            DConstant::D2 => vec![1.0 / l, ll / l, 1.0 / (l * l), ll / (l * l), ll * ll / (l * l)],
            DConstant::D3 { beta } => {
                let e2b = e.powf(2.0 * beta);
                vec![1.0 / l, ll / l, 1.0 / (l * l), ll / (l * l), ll * ll / (l * l), e2b * e.ln().abs(), e2b]
            }
            DConstant::D4 { beta, .. } => {
                let p = match *self {
                    DConstant::D4 { p, .. } => p,
                    _ => unreachable!(),
                };
                vec![
                    1.0 / l,
                    1.0 / (l * l),
                    1.0 / (l * l * l),
                    e.powf(2.0 * beta),
                    e.powf(4.0 * beta),
                    (r * e.powf(beta)).powf(2.0 - p),
                ]
            }
        }
    }

    /// The limit implied by the closed forms, for cross-checking only.
    pub fn analytic_limit(&self) -> f64 {
        match *self {
            DConstant::D1 => 4.0 / PI,
            DConstant::D2 => (PI / 2.0).sqrt(),
            DConstant::D3 { .. } => PI * PI,
            DConstant::D4 { beta, p } => {
                (4.0 / (PI * (p - 2.0)) * (4.0 / PI).powf(beta * (p - 2.0))).powf(1.0 / p)
            }
        }
    }
}

/// Radii `10^{2 + j/4}` up to `10^top`.
pub fn quarter_decades(top: u32) -> Vec<f64> {
    (0..=4 * (top as i32 - 2)).map(|j| 10f64.powf(2.0 + j as f64 / 4.0)).collect()
}

/// Extrapolated limit of a ratio sequence with convergence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DEstimate {
    pub constant: DConstant,
    /// `(R, ratio)` on quarter decades from 10² to 10⁶.
    pub sequence: Vec<(f64, f64)>,
    /// Fitted limits using data up to 10⁴, 10⁵ and 10⁶.
    pub iterates: [f64; 3],
    pub estimate: f64,
    /// `|iterate(10⁶) − iterate(10⁵)|`.
    pub error: f64,
    pub converged: bool,
}

fn fit_limit(c: &DConstant, seq: &[(f64, f64)]) -> f64 {
    let k = c.gauges(seq[0].0).len() + 1;
    let a = DMatrix::from_fn(seq.len(), k, |i, j| if j == 0 { 1.0 } else { c.gauges(seq[i].0)[j - 1] });
    let y = DVector::from_iterator(seq.len(), seq.iter().map(|p| p.1));
    least_squares(&a, &y)[0]
}

/// Generalized Richardson extrapolation: least-squares fit of the ratio
/// against a constant plus the known correction gauges in `log R`.
pub fn extrapolate(c: DConstant) -> Result<DEstimate> {
    c.validate()?;
    let radii = quarter_decades(6);
    let sequence: Vec<(f64, f64)> = radii
        .par_iter()
        .map(|&r| c.ratio(r).map(|v| (r, v)))
        .collect::<Result<_>>()?;
    let upto = |top: u32| -> f64 {
        let n = 4 * (top as usize - 2) + 1;
        fit_limit(&c, &sequence[..n])
    };
    let iterates = [upto(4), upto(5), upto(6)];
    let e1 = (iterates[1] - iterates[0]).abs();
    let e2 = (iterates[2] - iterates[1]).abs();
    let estimate = iterates[2];
    let converged = estimate.is_finite() && estimate > 0.0 && (e2 <= e1 || e2 <= 1e-3 * estimate.abs());
    Ok(DEstimate {
        constant: c,
        sequence,
        iterates,
        estimate,
        error: e2,
        converged,
    })
}

impl DEstimate {
    /// CSV `R, ratio, extrapolated, err_estimate`; the last two columns use
    /// the fit through the data up to each decade (empty in between).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("R,ratio,extrapolated,err_estimate\n");
        let mut prev: Option<f64> = None;
        let k = self.constant.gauges(100.0).len() + 1;
        for (i, (r, v)) in self.sequence.iter().enumerate() {
            let decade = i % 4 == 0 && i + 1 > k;
            if decade {
                let ext = fit_limit(&self.constant, &self.sequence[..=i]);
                let err = prev.map(|p| format!("{:.12e}", (ext - p).abs())).unwrap_or_default();
                let _ = writeln!(s, "{r:.6e},{v:.12e},{ext:.12e},{err}");
                prev = Some(ext);
            } else {
                let _ = writeln!(s, "{r:.6e},{v:.12e},,");
            }
        }
        s
    }
}

/// The four constants at the given `β` (for d₃, d₄) and `p` (for d₄).
#[derive(Debug, Clone, PartialEq)]
pub struct DConstants {
    pub d1: DEstimate,
    pub d2: DEstimate,
    pub d3: DEstimate,
    pub d4: DEstimate,
}

pub fn catenoid_d_constants(beta: f64, p: f64) -> Result<DConstants> {
    Ok(DConstants {
        d1: extrapolate(DConstant::D1)?,
        d2: extrapolate(DConstant::D2)?,
        d3: extrapolate(DConstant::D3 { beta })?,
        d4: extrapolate(DConstant::D4 { beta, p })?,
    })
}

// ---------------------------------------------------------------- missed mass

/// Mass of the catenoid neck missed by an `E^β`-Lipschitz two-valued graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissedMass {
    /// `R_β` with `1/√(R_β² − 1) = E_R^β`.
    pub r_beta: f64,
    pub excess: f64,
    /// `‖V‖(C_{R_β})` at the spec's scale.
    pub mass: f64,
    /// `(mass/R²) / (E^{1−2β}/|log E|)`, scale invariant.
    pub ratio: f64,
}

fn missed_mass_unit(e: f64, beta: f64) -> MissedMass {
    let s = e.powf(-beta);
    let r_beta = (1.0 + s * s).sqrt();
    MissedMass {
        r_beta,
        excess: e,
        mass: 2.0 * PI * (r_beta * s + s.asinh()),
        ratio: f64::NAN,
    }
}

/// Neck mass inside `C_{R_β}` for the 2-catenoid of `spec.scale`, with the
/// excess taken in the cylinder of radius `r`.
pub fn missed_mass(spec: &CatenoidSpec, beta: f64, r: f64) -> Result<MissedMass> {
    if spec.m != 2 {
        return Err(invalid("missed mass is implemented for m = 2"));
    }
    if !(beta > 0.0 && beta < 0.5) {
        return Err(invalid(format!("β ∈ (0, 1/2) required, got {beta}")));
    }
    let a = spec.scale;
    let ru = r / a;
    let e = catenoid_excess_exact(ru)?;
    let mut mm = missed_mass_unit(e, beta);
    if mm.r_beta >= ru {
        return Err(invalid(format!(
            "R_β = {} is not below R = {ru} (in neck units); R must be larger",
            mm.r_beta
        )));
    }
    mm.ratio = (mm.mass / (ru * ru)) / (e.powf(1.0 - 2.0 * beta) / e.ln().abs());
    mm.r_beta *= a;
    mm.mass *= a * a;
    Ok(mm)
}

/// Higher-integrability check for the `E^β`-Lipschitz approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpGrowth {
    pub r: f64,
    /// `((1/R²)∫_{B_R∖B_{R_β}} |Df|^p)^{1/p}` in the closed-form normalization.
    pub lhs: f64,
    pub sqrt_excess: f64,
    /// `lhs / √E_R`; diverges with `R` when `β < 1/2`.
    pub factor: f64,
}

pub fn lp_growth(beta: f64, p: f64, r: f64) -> Result<LpGrowth> {
    if !(beta > 0.0 && beta < 0.5) {
        return Err(invalid(format!("β ∈ (0, 1/2) required, got {beta}")));
    }
    if !(p > 2.0) {
        return Err(invalid(format!("p > 2 required, got {p}")));
    }
    let e = catenoid_excess_exact(r)?;
    let rb = missed_mass_unit(e, beta).r_beta;
    if rb >= r {
        return Err(invalid(format!("R_β = {rb} is not below R = {r}")));
    }
    // ∫ ρ²(ρ²−1)^{−(p+1)/2} dρ with ρ = e^t
    let expo = -(p + 1.0) / 2.0;
    let integral = integrate(
        |t: f64| {
            let rho = t.exp();
            rho * rho * rho * (rho * rho - 1.0).powf(expo)
        },
        rb.ln(),
        r.ln(),
        1e-13,
    );
    let lhs = (2.0 / (PI * PI * r * r) * 2.0 * PI * integral).powf(1.0 / p);
    Ok(LpGrowth {
        r,
        lhs,
        sqrt_excess: e.sqrt(),
        factor: lhs / e.sqrt(),
    })
}

// ---------------------------------------------------------------- Morrey

/// `(q − m)^{−1+1/q} E^{1/q}`.
pub fn morrey_bound(e: f64, m: usize, q: f64) -> Result<f64> {
    check_small_excess(e)?;
    let mf = m as f64;
    if !(q > mf && q < mf + 1.0) {
        return Err(invalid(format!("q ∈ (m, m+1) required, got {q}")));
    }
    Ok((q - mf).powf(-1.0 + 1.0 / q) * e.powf(1.0 / q))
}

fn check_small_excess(e: f64) -> Result<()> {
    if !(e > 0.0 && e < (-1.0f64).exp()) {
        return Err(invalid(format!("excess must lie in (0, 1/e), got {e}")));
    }
    Ok(())
}

/// `|log E|^{1−1/m} E^{1/m}`.
pub fn morrey_law(e: f64, m: usize) -> f64 {
    let mf = m as f64;
    e.ln().abs().powf(1.0 - 1.0 / mf) * e.powf(1.0 / mf)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QOptimum {
    /// `m − 1/log E`.
    pub log_q: f64,
    pub log_q_bound: f64,
    pub numeric_q: f64,
    pub numeric_bound: f64,
}

pub fn q_optimize(e: f64, m: usize) -> Result<QOptimum> {
    check_small_excess(e)?;
    let mf = m as f64;
    let log_q = mf - 1.0 / e.ln();
    let log_q_bound = morrey_bound(e, m, log_q)?;
    let f = |q: f64| (q - mf).powf(-1.0 + 1.0 / q) * e.powf(1.0 / q);
    let (numeric_q, numeric_bound) = golden_min(f, mf + 1e-12, mf + 1.0 - 1e-12, 1e-12);
    Ok(QOptimum {
        log_q,
        log_q_bound,
        numeric_q,
        numeric_bound,
    })
}

/// Unit-ball volume re-exported for model normalizations.
pub fn ball_volume(m: usize) -> f64 {
    omega(m)
}
