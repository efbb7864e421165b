//! Discrete integral varifolds: weighted tangent-plane samples, mass
//! queries and stationarity checks.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grassmann::{gram_defect, ProjectionPlane, ORTHO_TOL};
use crate::numerics::{gauss_legendre, omega};
use crate::testfn::{smootherstep_deriv, TestFunction, VectorField};

/// One sample: a point, its approximate tangent plane, area weight and
/// integer multiplicity.
#[derive(Debug, Clone, PartialEq)]
pub struct VarifoldSample {
    pub position: Vec<f64>,
    pub tangent: ProjectionPlane,
    pub weight: f64,
    pub multiplicity: u32,
}

/// Closed-form membership predicates.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    All,
    Empty,
    /// Open ball `|x − c| < r`.
    Ball { center: Vec<f64>, radius: f64 },
    /// Open cylinder `|P_axis(x − c)| < r`.
    Cylinder {
        center: Vec<f64>,
        radius: f64,
        axis: ProjectionPlane,
    },
    /// Closed slab `|x_coord − center| ≤ halfwidth` in ambient coordinates.
    Slab {
        coord: usize,
        center: f64,
        halfwidth: f64,
    },
    /// `x_coord > threshold` when `upper`, otherwise `x_coord < threshold`.
    HalfSpace {
        coord: usize,
        threshold: f64,
        upper: bool,
    },
    And(Vec<Region>),
    Not(Box<Region>),
}

impl Region {
    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        Region::Ball { center, radius }
    }

    /// Cylinder over the coordinate plane π₀ ⊂ R^{m+n}, centered at `(y, 0)`.
    pub fn cylinder0(m: usize, n: usize, y: &[f64], radius: f64) -> Self {
        let mut center = y.to_vec();
        center.resize(m + n, 0.0);
        Region::Cylinder {
            center,
            radius,
            axis: ProjectionPlane::coordinate(m, n),
        }
    }

    pub fn and(self, other: Region) -> Self {
        match self {
            Region::And(mut v) => {
                v.push(other);
                Region::And(v)
            }
            s => Region::And(vec![s, other]),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::All => true,
            Region::Empty => false,
            Region::Ball { center, radius } => sqdist(x, center) < radius * radius,
            Region::Cylinder { center, radius, axis } => {
                let d = axis.dim();
                let mut r2 = 0.0;
                for k in 0..axis.rank() {
                    let row = axis.basis_row(k);
                    let c: f64 = (0..d).map(|j| row[j] * (x[j] - center[j])).sum();
                    r2 += c * c;
                }
                r2 < radius * radius
            }
            Region::Slab {
                coord,
                center,
                halfwidth,
            } => (x[*coord] - center).abs() <= *halfwidth,
            Region::HalfSpace {
                coord,
                threshold,
                upper,
            } => {
                if *upper {
                    x[*coord] > *threshold
                } else {
                    x[*coord] < *threshold
                }
            }
            Region::And(v) => v.iter().all(|r| r.contains(x)),
            Region::Not(r) => !r.contains(x),
        }
    }

    /// Box in the first `m` coordinates containing the region, if bounded there.
    fn pi0_box(&self, m: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Region::Empty => Some((vec![0.0; m], vec![-1.0; m])),
            Region::Ball { center, radius } => Some((
                center[..m].iter().map(|c| c - radius).collect(),
                center[..m].iter().map(|c| c + radius).collect(),
            )),
            Region::Cylinder { center, radius, axis } => {
                let d = axis.dim();
                // only axis-aligned cylinders over π₀ are bounded in x_1..x_m
                let aligned = axis.rank() == m
                    && (0..m).all(|k| {
                        let row = axis.basis_row(k);
                        (0..d).all(|j| row[j] == if j == k { 1.0 } else { 0.0 })
                    });
                aligned.then(|| {
                    (
                        center[..m].iter().map(|c| c - radius).collect(),
                        center[..m].iter().map(|c| c + radius).collect(),
                    )
                })
            }
            Region::And(v) => {
                let mut out: Option<(Vec<f64>, Vec<f64>)> = None;
                for r in v {
                    if let Some((lo, hi)) = r.pi0_box(m) {
                        out = Some(match out {
                            None => (lo, hi),
                            Some((l, h)) => (
                                l.iter().zip(&lo).map(|(a, b)| a.max(*b)).collect(),
                                h.iter().zip(&hi).map(|(a, b)| a.min(*b)).collect(),
                            ),
                        });
                    }
                }
                out
            }
            _ => None,
        }
    }
}

#[inline]
fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Uniform bucket grid over the first `m` coordinates, CSR layout.
#[derive(Debug)]
struct BucketIndex {
    cell: f64,
    origin: Vec<f64>,
    dims: Vec<usize>,
    start: Vec<u32>,
    items: Vec<u32>,
}

impl BucketIndex {
    fn build(m: usize, d: usize, positions: &[f64], h: f64) -> Self {
        let n = positions.len() / d;
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        for p in positions.chunks(d) {
            for k in 0..m {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if n == 0 {
            lo = vec![0.0; m];
            hi = vec![0.0; m];
        }
        let mut cell = 4.0 * h;
        let cells_for = |c: f64| -> Vec<usize> {
            (0..m)
                .map(|k| (((hi[k] - lo[k]) / c).floor() as usize) + 1)
                .collect()
        };
        let mut dims = cells_for(cell);
        // keep the table at most a few times the sample count
        while dims.iter().product::<usize>() > 4 * n.max(1) + 64 {
            cell *= 1.5;
            dims = cells_for(cell);
        }
        let total: usize = dims.iter().product();
        let key = |p: &[f64]| -> usize {
            let mut idx = 0;
            for k in 0..m {
                let c = (((p[k] - lo[k]) / cell).floor() as usize).min(dims[k] - 1);
                idx = idx * dims[k] + c;
            }
            idx
        };
        let mut count = vec![0u32; total + 1];
        let keys: Vec<usize> = positions.chunks(d).map(key).collect();
        for &k in &keys {
            count[k + 1] += 1;
        }
        for i in 0..total {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut items = vec![0u32; n];
        for (i, &k) in keys.iter().enumerate() {
            items[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        Self {
            cell,
            origin: lo,
            dims,
            start: count,
            items,
        }
    }

    fn candidates(&self, lo: &[f64], hi: &[f64], out: &mut Vec<usize>) {
        let m = self.dims.len();
        let mut a = vec![0usize; m];
        let mut b = vec![0usize; m];
        for k in 0..m {
            if hi[k] < lo[k] {
                return;
            }
            let fa = ((lo[k] - self.origin[k]) / self.cell).floor();
            let fb = ((hi[k] - self.origin[k]) / self.cell).floor();
            if fb < 0.0 || fa > (self.dims[k] - 1) as f64 {
                return;
            }
            a[k] = fa.max(0.0) as usize;
            b[k] = (fb as usize).min(self.dims[k] - 1);
        }
        let mut c = a.clone();
        loop {
            let mut idx = 0;
            for k in 0..m {
                idx = idx * self.dims[k] + c[k];
            }
            let (s, e) = (self.start[idx] as usize, self.start[idx + 1] as usize);
            out.extend(self.items[s..e].iter().map(|&i| i as usize));
            let mut ax = m;
            loop {
                if ax == 0 {
                    return;
                }
                ax -= 1;
                if c[ax] < b[ax] {
                    c[ax] += 1;
                    break;
                }
                c[ax] = a[ax];
            }
        }
    }
}

/// A finite weighted sample of an integral varifold in R^{m+n}.
#[derive(Debug)]
pub struct DiscreteVarifold {
    m: usize,
    n: usize,
    mesh_scale: f64,
    positions: Vec<f64>,
    tangents: Vec<f64>,
    weights: Vec<f64>,
    mult: Vec<u32>,
    index: OnceLock<BucketIndex>,
}

impl Clone for DiscreteVarifold {
    fn clone(&self) -> Self {
        Self {
            m: self.m,
            n: self.n,
            mesh_scale: self.mesh_scale,
            positions: self.positions.clone(),
            tangents: self.tangents.clone(),
            weights: self.weights.clone(),
            mult: self.mult.clone(),
            index: OnceLock::new(),
        }
    }
}

impl PartialEq for DiscreteVarifold {
    fn eq(&self, o: &Self) -> bool {
        self.m == o.m
            && self.n == o.n
            && self.mesh_scale == o.mesh_scale
            && self.positions == o.positions
            && self.tangents == o.tangents
            && self.weights == o.weights
            && self.mult == o.mult
    }
}

/// Both sides of the isoperimetric inequality for one test function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoperimetricReport {
    /// `∫_{φ≥1} φ d‖V‖`.
    pub lhs: f64,
    /// `(∫φ d‖V‖)^{1/m} · ∫|∇_{TV}φ| d‖V‖`.
    pub rhs: f64,
    pub ratio: f64,
    /// Positive left side against a vanishing right side.
    pub violation: bool,
}

impl IsoperimetricReport {
    pub fn within(&self, c0: f64) -> bool {
        !self.violation && self.ratio <= c0
    }
}

impl DiscreteVarifold {
    /// Validates and wraps structure-of-arrays sample data.
    pub fn new(
        m: usize,
        n: usize,
        mesh_scale: f64,
        positions: Vec<f64>,
        tangents: Vec<f64>,
        weights: Vec<f64>,
        mult: Vec<u32>,
    ) -> Result<Self> {
        let d = m + n;
        if m == 0 || n == 0 {
            return Err(invalid("m and n must be positive"));
        }
        if !(mesh_scale > 0.0) {
            return Err(invalid("mesh scale must be positive"));
        }
        let count = weights.len();
        for (what, expected, found) in [
            ("positions", count * d, positions.len()),
            ("tangents", count * m * d, tangents.len()),
            ("multiplicities", count, mult.len()),
        ] {
            if expected != found {
                return Err(Error::DimensionMismatch { what, expected, found });
            }
        }
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(invalid(format!("sample {i}: weight must be positive")));
        }
        if let Some(i) = mult.iter().position(|q| *q == 0) {
            return Err(invalid(format!("sample {i}: multiplicity must be at least 1")));
        }
        Ok(Self {
            m,
            n,
            mesh_scale,
            positions,
            tangents,
            weights,
            mult,
            index: OnceLock::new(),
        })
    }

    pub fn from_samples(m: usize, n: usize, mesh_scale: f64, samples: &[VarifoldSample]) -> Result<Self> {
        let d = m + n;
        let mut pos = Vec::with_capacity(samples.len() * d);
        let mut tan = Vec::with_capacity(samples.len() * m * d);
        let mut w = Vec::with_capacity(samples.len());
        let mut q = Vec::with_capacity(samples.len());
        for s in samples {
            if s.position.len() != d || s.tangent.dim() != d || s.tangent.rank() != m {
                return Err(Error::DimensionMismatch {
                    what: "sample dimensions",
                    expected: d,
                    found: s.position.len(),
                });
            }
            pos.extend_from_slice(&s.position);
            tan.extend_from_slice(s.tangent.basis());
            w.push(s.weight);
            q.push(s.multiplicity);
        }
        Self::new(m, n, mesh_scale, pos, tan, w, q)
    }

    pub fn empty(m: usize, n: usize, mesh_scale: f64) -> Self {
        Self {
            m,
            n,
            mesh_scale,
            positions: Vec::new(),
            tangents: Vec::new(),
            weights: Vec::new(),
            mult: Vec::new(),
            index: OnceLock::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.m + self.n
    }

    pub fn mesh_scale(&self) -> f64 {
        self.mesh_scale
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.positions[i * d..(i + 1) * d]
    }

    /// Orthonormal tangent rows of sample `i` (row-major `m × (m+n)`).
    pub fn tangent_rows(&self, i: usize) -> &[f64] {
        let s = self.m * self.dim();
        &self.tangents[i * s..(i + 1) * s]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn multiplicity(&self, i: usize) -> u32 {
        self.mult[i]
    }

    /// `weight · multiplicity`.
    #[inline]
    pub fn mass_of(&self, i: usize) -> f64 {
        self.weights[i] * self.mult[i] as f64
    }

    pub fn sample(&self, i: usize) -> VarifoldSample {
        VarifoldSample {
            position: self.position(i).to_vec(),
            tangent: ProjectionPlane::from_orthonormal_rows(self.m, self.dim(), self.tangent_rows(i).to_vec())
                .expect("stored tangents are orthonormal"),
            weight: self.weights[i],
            multiplicity: self.mult[i],
        }
    }

    fn index(&self) -> &BucketIndex {
        self.index
            .get_or_init(|| BucketIndex::build(self.m, self.dim(), &self.positions, self.mesh_scale))
    }

    /// Indices of samples inside `region`, ascending.
    pub fn select(&self, region: &Region) -> Vec<usize> {
        let mut cand = Vec::new();
        match region.pi0_box(self.m) {
            Some((lo, hi)) => self.index().candidates(&lo, &hi, &mut cand),
            None => cand.extend(0..self.len()),
        }
        let mut out: Vec<usize> = cand
            .into_iter()
            .filter(|&i| region.contains(self.position(i)))
            .collect();
        out.sort_unstable();
        out
    }

    /// `‖V‖(region)`, summed in ascending sample order.
    pub fn mass(&self, region: &Region) -> f64 {
        self.select(region).iter().map(|&i| self.mass_of(i)).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().zip(&self.mult).map(|(w, q)| w * *q as f64).sum()
    }

    fn check_resolution(&self, r: f64) -> Result<()> {
        let limit = 4.0 * self.mesh_scale;
        if r < limit {
            return Err(Error::Resolution { radius: r, limit });
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "query point",
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// `‖V‖(B_r(x)) / (ω_m r^m)`.
    pub fn density_ratio(&self, x: &[f64], r: f64) -> Result<f64> {
        self.check_point(x)?;
        self.check_resolution(r)?;
        Ok(self.mass(&Region::ball(x.to_vec(), r)) / (omega(self.m) * r.powi(self.m as i32)))
    }

    /// `|y^⊥|²` for `y = position(i) − x`, relative to sample `i`'s tangent.
    #[inline]
    fn normal_sq(&self, i: usize, y: &[f64]) -> f64 {
        let d = self.dim();
        let t = self.tangent_rows(i);
        let mut tang = 0.0;
        for k in 0..self.m {
            let c: f64 = t[k * d..(k + 1) * d].iter().zip(y).map(|(a, b)| a * b).sum();
            tang += c * c;
        }
        (y.iter().map(|v| v * v).sum::<f64>() - tang).max(0.0)
    }

    /// `Θ(x, r) − Θ(x, s) − ω_m⁻¹∫_{B_r∖B_s} |y^⊥|²/|y|^{m+2} d‖V‖`,
    /// zero for stationary varifolds.
    pub fn monotonicity_residual(&self, x: &[f64], s: f64, r: f64) -> Result<f64> {
        self.check_point(x)?;
        if !(s < r) {
            return Err(invalid(format!("need s < r, got s = {s}, r = {r}")));
        }
        self.check_resolution(s)?;
        let m = self.m;
        let wm = omega(m);
        let idx = self.select(&Region::ball(x.to_vec(), r));
        let (mut mr, mut ms, mut defect) = (0.0, 0.0, 0.0);
        let mut y = vec![0.0; self.dim()];
        for &i in &idx {
            for (yk, (p, c)) in y.iter_mut().zip(self.position(i).iter().zip(x)) {
                *yk = p - c;
            }
            let rr = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let w = self.mass_of(i);
            mr += w;
            if rr < s {
                ms += w;
            } else {
                defect += w * self.normal_sq(i, &y) / rr.powi(m as i32 + 2);
            }
        }
        Ok(mr / (wm * r.powi(m as i32)) - ms / (wm * s.powi(m as i32)) - defect / wm)
    }

    /// Smoothed form of [`monotonicity_residual`](Self::monotonicity_residual):
    /// ball indicators replaced by the cutoff `φ(t) = 1 − S((t − 1 + w)/w)`.
    /// The sharp form fluctuates with lattice counts at the sphere, so this
    /// is the one that converges cleanly under refinement.
    pub fn monotonicity_residual_smooth(&self, x: &[f64], s: f64, r: f64, width: f64) -> Result<f64> {
        self.check_point(x)?;
        if !(s < r) {
            return Err(invalid(format!("need s < r, got s = {s}, r = {r}")));
        }
        if !(width > 0.0 && width <= 1.0) {
            return Err(invalid("cutoff width must lie in (0, 1]"));
        }
        self.check_resolution(s)?;
        let m = self.m;
        let wm = omega(m);
        let (gx, gw) = gauss_legendre(12);
        let phi = |t: f64| 1.0 - crate::testfn::smootherstep((t - 1.0 + width) / width);
        let dphi = |t: f64| -smootherstep_deriv((t - 1.0 + width) / width) / width;
        let idx = self.select(&Region::ball(x.to_vec(), r));
        let (mut tr, mut ts, mut defect) = (0.0, 0.0, 0.0);
        let mut y = vec![0.0; self.dim()];
        for &i in &idx {
            for (yk, (p, c)) in y.iter_mut().zip(self.position(i).iter().zip(x)) {
                *yk = p - c;
            }
            let rr = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let w = self.mass_of(i);
            tr += w * phi(rr / r);
            ts += w * phi(rr / s);
            if rr == 0.0 {
                continue;
            }
            let a = (rr / r).max(1.0 - width);
            let b = (rr / s).min(1.0);
            if b <= a {
                continue;
            }
            let (c, hw) = (0.5 * (a + b), 0.5 * (b - a));
            let psi: f64 = gx
                .iter()
                .zip(&gw)
                .map(|(xi, wi)| {
                    let t = c + hw * xi;
                    wi * (-dphi(t)) * t.powi(m as i32)
                })
                .sum::<f64>()
                * hw;
            defect += w * self.normal_sq(i, &y) / rr.powi(m as i32 + 2) * psi;
        }
        Ok(tr / (wm * r.powi(m as i32)) - ts / (wm * s.powi(m as i32)) - defect / wm)
    }

    /// `δV(X) = Σ w·Q·div_T X`, with `div_T X = Σ_k t_k·DX t_k`.
    pub fn first_variation(&self, field: &dyn VectorField) -> Result<f64> {
        let d = self.dim();
        if field.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "vector field",
                expected: d,
                found: field.dim(),
            });
        }
        let m = self.m;
        let terms: Vec<f64> = (0..self.len())
            .into_par_iter()
            .with_min_len(4096)
            .map_init(
                || vec![0.0; d * d],
                |jac, i| {
                    field.jacobian(self.position(i), jac);
                    if jac.iter().all(|v| *v == 0.0) {
                        return 0.0;
                    }
                    let t = self.tangent_rows(i);
                    let mut div = 0.0;
                    for k in 0..m {
                        let tk = &t[k * d..(k + 1) * d];
                        for a in 0..d {
                            let row: f64 = (0..d).map(|b| jac[a * d + b] * tk[b]).sum();
                            div += tk[a] * row;
                        }
                    }
                    self.mass_of(i) * div
                },
            )
            .collect();
        Ok(terms.iter().sum())
    }

    /// `∫ ∇_{TV}x_coord · ∇_{TV}φ d‖V‖` for the ambient coordinate `coord`.
    pub fn harmonicity_residual(&self, coord: usize, phi: &dyn TestFunction) -> Result<f64> {
        let d = self.dim();
        if coord >= d {
            return Err(invalid(format!("coordinate {coord} out of range 0..{d}")));
        }
        if phi.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "test function",
                expected: d,
                found: phi.dim(),
            });
        }
        let (c, rho) = phi.support();
        let idx = self.select(&Region::ball(c.to_vec(), rho));
        let m = self.m;
        let mut g = vec![0.0; d];
        let mut total = 0.0;
        for &i in &idx {
            phi.gradient(self.position(i), &mut g);
            let t = self.tangent_rows(i);
            let mut dot = 0.0;
            for k in 0..m {
                let tk = &t[k * d..(k + 1) * d];
                dot += tk[coord] * tk.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            }
            total += self.mass_of(i) * dot;
        }
        Ok(total)
    }

    /// Evaluates both sides of the isoperimetric inequality for `φ ≥ 0`.
    pub fn isoperimetric_check(&self, phi: &dyn TestFunction) -> Result<IsoperimetricReport> {
        let d = self.dim();
        if phi.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "test function",
                expected: d,
                found: phi.dim(),
            });
        }
        let (c, rho) = phi.support();
        let idx = self.select(&Region::ball(c.to_vec(), rho * (1.0 + 1e-12)));
        let m = self.m;
        let (mut lhs, mut int_phi, mut int_grad) = (0.0, 0.0, 0.0);
        let mut g = vec![0.0; d];
        let mut pg = vec![0.0; d];
        for &i in &idx {
            let x = self.position(i);
            let v = phi.value(x);
            if v < 0.0 {
                return Err(invalid("test function must be non-negative"));
            }
            let w = self.mass_of(i);
            int_phi += w * v;
            if v >= 1.0 {
                lhs += w * v;
            }
            phi.gradient(x, &mut g);
            crate::grassmann::project_into(self.tangent_rows(i), m, d, &g, &mut pg);
            int_grad += w * pg.iter().map(|a| a * a).sum::<f64>().sqrt();
        }
        let rhs = int_phi.powf(1.0 / m as f64) * int_grad;
        let (ratio, violation) = if rhs > 0.0 {
            (lhs / rhs, false)
        } else if lhs > 0.0 {
            (f64::INFINITY, true)
        } else {
            (0.0, false)
        };
        Ok(IsoperimetricReport {
            lhs,
            rhs,
            ratio,
            violation,
        })
    }

    /// Mass of `{|x| < 2, |y_j| ≤ halfwidth}` where `y_j` is the `j`-th
    /// normal coordinate (`0 ≤ j < n`).
    pub fn slab_mass(&self, j: usize, halfwidth: f64) -> Result<f64> {
        if j >= self.n {
            return Err(invalid(format!("normal index {j} out of range 0..{}", self.n)));
        }
        let region = Region::cylinder0(self.m, self.n, &vec![0.0; self.m], 2.0).and(Region::Slab {
            coord: self.m + j,
            center: 0.0,
            halfwidth,
        });
        Ok(self.mass(&region))
    }

    /// `V ⌊ region`; mesh scale is kept.
    pub fn restrict(&self, region: &Region) -> DiscreteVarifold {
        let idx = self.select(region);
        self.subset(&idx)
    }

    pub(crate) fn subset(&self, idx: &[usize]) -> DiscreteVarifold {
        let (d, m) = (self.dim(), self.m);
        let mut out = DiscreteVarifold::empty(m, self.n, self.mesh_scale);
        for &i in idx {
            out.positions.extend_from_slice(self.position(i));
            out.tangents.extend_from_slice(self.tangent_rows(i));
            out.weights.push(self.weights[i]);
            out.mult.push(self.mult[i]);
        }
        debug_assert_eq!(out.positions.len(), idx.len() * d);
        out
    }

    /// Superposition `V + W`.
    pub fn union(&self, other: &DiscreteVarifold) -> Result<DiscreteVarifold> {
        if self.m != other.m || self.n != other.n {
            return Err(Error::DimensionMismatch {
                what: "varifold dimensions",
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let mut out = self.clone();
        out.mesh_scale = self.mesh_scale.max(other.mesh_scale);
        out.positions.extend_from_slice(&other.positions);
        out.tangents.extend_from_slice(&other.tangents);
        out.weights.extend_from_slice(&other.weights);
        out.mult.extend_from_slice(&other.mult);
        Ok(out)
    }

    /// Push-forward under `x ↦ (x − center)/r`.
    pub fn rescale(&self, center: &[f64], r: f64) -> DiscreteVarifold {
        let mut out = self.clone();
        let d = self.dim();
        for (k, p) in out.positions.iter_mut().enumerate() {
            *p = (*p - center[k % d]) / r;
        }
        let f = r.powi(self.m as i32);
        out.weights.iter_mut().for_each(|w| *w /= f);
        out.mesh_scale /= r;
        out
    }

    /// Writes `varf 1 m n N h` then one line per sample with 17 significant digits.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "varf 1 {} {} {} {:.16e}",
            self.m,
            self.n,
            self.len(),
            self.mesh_scale
        )?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            for v in self.position(i).iter().chain(self.tangent_rows(i)) {
                line.push_str(&format!("{v:.16e} "));
            }
            line.push_str(&format!("{:.16e} {}", self.weights[i], self.mult[i]));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads the text form; tangent rows must be orthonormal to 1e-12.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty input".into(),
        })??;
        let tok: Vec<&str> = header.split_whitespace().collect();
        let herr = |msg: &str| Error::Parse {
            line: 1,
            message: msg.to_string(),
        };
        if tok.len() != 6 || tok[0] != "varf" || tok[1] != "1" {
            return Err(herr("expected `varf 1 m n N h`"));
        }
        let m: usize = tok[2].parse().map_err(|_| herr("bad m"))?;
        let n: usize = tok[3].parse().map_err(|_| herr("bad n"))?;
        let count: usize = tok[4].parse().map_err(|_| herr("bad N"))?;
        let h: f64 = tok[5].parse().map_err(|_| herr("bad h"))?;
        let d = m + n;
        let fields = d + m * d + 2;
        let mut pos = Vec::with_capacity(count * d);
        let mut tan = Vec::with_capacity(count * m * d);
        let mut w = Vec::with_capacity(count);
        let mut q = Vec::with_capacity(count);
        let mut read = 0;
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lno = ln + 2;
            let perr = |msg: String| Error::Parse { line: lno, message: msg };
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != fields {
                return Err(perr(format!("expected {fields} fields, found {}", tok.len())));
            }
            let nums: Vec<f64> = tok[..fields - 1]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| perr(e.to_string())))
                .collect::<Result<_>>()?;
            let rows = &nums[d..d + m * d];
            let defect = gram_defect(m, d, rows);
            if defect > ORTHO_TOL {
                return Err(perr(format!("tangent rows not orthonormal (defect {defect:e})")));
            }
            pos.extend_from_slice(&nums[..d]);
            tan.extend_from_slice(rows);
            w.push(nums[d + m * d]);
            q.push(tok[fields - 1].parse::<u32>().map_err(|e| perr(e.to_string()))?);
            read += 1;
        }
        if read != count {
            return Err(Error::Parse {
                line: read + 2,
                message: format!("header announces {count} samples, found {read}"),
            });
        }
        Self::new(m, n, h, pos, tan, w, q).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })
    }
}
