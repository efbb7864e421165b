//! Tilt excess over cylinders and balls, the dyadic non-centered maximal
//! function and the good set `K_λ`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grassmann::{accumulate_projection, best_fit_plane, hs_sq_rows, hs_sq_to_coordinate, ProjectionPlane};
use crate::numerics::omega;
use crate::qvalued::DiskGrid;
use crate::varifold::{DiscreteVarifold, Region};

/// `C_r(x, π′)` measured against the plane `π`.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderSpec {
    /// Center in coordinates of the reference plane.
    pub center: Vec<f64>,
    pub radius: f64,
    pub reference: ProjectionPlane,
    pub comparison: ProjectionPlane,
}

impl CylinderSpec {
    /// Cylinder over π₀ compared against π₀.
    pub fn standard(m: usize, n: usize, center: Vec<f64>, radius: f64) -> Self {
        Self {
            center,
            radius,
            reference: ProjectionPlane::coordinate(m, n),
            comparison: ProjectionPlane::coordinate(m, n),
        }
    }

    pub fn with_comparison(mut self, plane: ProjectionPlane) -> Self {
        self.comparison = plane;
        self
    }

    fn validate(&self, v: &DiscreteVarifold) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(invalid("cylinder radius must be positive"));
        }
        for p in [&self.reference, &self.comparison] {
            if p.rank() != v.m() || p.dim() != v.dim() {
                return Err(Error::DimensionMismatch {
                    what: "cylinder plane",
                    expected: v.dim(),
                    found: p.dim(),
                });
            }
        }
        if self.center.len() != v.m() {
            return Err(Error::DimensionMismatch {
                what: "cylinder center",
                expected: v.m(),
                found: self.center.len(),
            });
        }
        Ok(())
    }

    pub fn region(&self) -> Region {
        let d = self.reference.dim();
        let mut c = vec![0.0; d];
        for (k, ck) in self.center.iter().enumerate() {
            for (cj, b) in c.iter_mut().zip(self.reference.basis_row(k)) {
                *cj += ck * b;
            }
        }
        Region::Cylinder {
            center: c,
            radius: self.radius,
            axis: self.reference.clone(),
        }
    }
}

/// One excess evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcessReport {
    /// Cylinder center (reference-plane coordinates) or ball center.
    pub center: Vec<f64>,
    pub radius: f64,
    pub value: f64,
    /// `Σ w·mult·|P_T − P_π|²` before normalization.
    pub raw_sum: f64,
    /// `‖V‖(region) / (ω_m r^m)`.
    pub mass_ratio: f64,
    pub plane: ProjectionPlane,
    pub sample_count: usize,
    /// False when the region leaves the sampled extent (with `4h` slack).
    pub trusted: bool,
}

impl ExcessReport {
    pub fn csv_header(dim: usize) -> String {
        let mut s = String::new();
        for k in 0..dim {
            s.push_str(&center_label(k, dim));
            s.push(',');
        }
        s.push_str("radius,excess,mass_ratio,trusted");
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        for c in &self.center {
            let _ = write!(s, "{c:.12e},");
        }
        let _ = write!(
            s,
            "{:.12e},{:.12e},{:.12e},{}",
            self.radius, self.value, self.mass_ratio, self.trusted
        );
        s
    }
}

fn center_label(k: usize, dim: usize) -> String {
    if dim <= 3 {
        ["cx", "cy", "cz"][k].to_string()
    } else {
        format!("c{}", k + 1)
    }
}

/// CSV of a homogeneous batch of reports.
pub fn reports_to_csv(reports: &[ExcessReport]) -> String {
    let dim = reports.first().map_or(0, |r| r.center.len());
    let mut s = ExcessReport::csv_header(dim);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn is_coordinate(p: &ProjectionPlane, m: usize) -> bool {
    p.rank() == m && *p == ProjectionPlane::coordinate(m, p.dim() - m)
}

/// `Σ w·mult·|P_T − P_π|²` and `Σ w·mult` over `idx`, in the given order.
fn excess_sums(v: &DiscreteVarifold, idx: &[usize], plane: &ProjectionPlane) -> (f64, f64) {
    let (m, d) = (v.m(), v.dim());
    let coord = is_coordinate(plane, m);
    let mut raw = 0.0;
    let mut mass = 0.0;
    for &i in idx {
        let t = v.tangent_rows(i);
        let e = if coord {
            hs_sq_to_coordinate(t, m, d)
        } else {
            hs_sq_rows(t, m, plane.basis(), d)
        };
        let wm = v.mass_of(i);
        raw += wm * e;
        mass += wm;
    }
    (raw, mass)
}

/// Coordinate-wise bounds of the samples projected onto `plane`.
pub fn projected_bounds(v: &DiscreteVarifold, plane: &ProjectionPlane) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = (plane.rank(), plane.dim());
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for i in 0..v.len() {
        let x = v.position(i);
        for k in 0..m {
            let c: f64 = (0..d).map(|j| plane.basis_row(k)[j] * x[j]).sum();
            lo[k] = lo[k].min(c);
            hi[k] = hi[k].max(c);
        }
    }
    (lo, hi)
}

fn inside_bounds(center: &[f64], r: f64, bounds: &(Vec<f64>, Vec<f64>), slack: f64) -> bool {
    center
        .iter()
        .enumerate()
        .all(|(k, c)| c - r >= bounds.0[k] - slack && c + r <= bounds.1[k] + slack)
}

fn cylinder_report(v: &DiscreteVarifold, c: &CylinderSpec, bounds: &(Vec<f64>, Vec<f64>)) -> ExcessReport {
    let idx = v.select(&c.region());
    let (raw, mass) = excess_sums(v, &idx, &c.comparison);
    let norm = omega(v.m()) * c.radius.powi(v.m() as i32);
    ExcessReport {
        center: c.center.clone(),
        radius: c.radius,
        value: raw / norm,
        raw_sum: raw,
        mass_ratio: mass / norm,
        plane: c.comparison.clone(),
        sample_count: idx.len(),
        trusted: inside_bounds(&c.center, c.radius, bounds, 4.0 * v.mesh_scale()),
    }
}

/// `E(V, C_r(x, π′), π) = (1/(ω_m r^m)) ∫_{C} |P_T − P_π|² d‖V‖`.
pub fn cylindrical_excess(v: &DiscreteVarifold, c: &CylinderSpec) -> Result<ExcessReport> {
    c.validate(v)?;
    let bounds = projected_bounds(v, &c.reference);
    Ok(cylinder_report(v, c, &bounds))
}

/// `inf_π E(V, B_r(x), π)`, attained at the span of the top eigenvectors of
/// the mass-weighted mean tangent projection.
pub fn spherical_excess(v: &DiscreteVarifold, x: &[f64], r: f64) -> Result<ExcessReport> {
    if x.len() != v.dim() {
        return Err(Error::DimensionMismatch {
            what: "ball center",
            expected: v.dim(),
            found: x.len(),
        });
    }
    let limit = 4.0 * v.mesh_scale();
    if r < limit {
        return Err(Error::Resolution { radius: r, limit });
    }
    let (m, d) = (v.m(), v.dim());
    let idx = v.select(&Region::ball(x.to_vec(), r));
    let mut acc = DMatrix::zeros(d, d);
    let mut mass = 0.0;
    for &i in &idx {
        let wm = v.mass_of(i);
        accumulate_projection(v.tangent_rows(i), m, d, wm, &mut acc);
        mass += wm;
    }
    let plane = if mass > 0.0 {
        best_fit_plane(&(acc / mass), m)?.plane
    } else {
        ProjectionPlane::coordinate(m, d - m)
    };
    let (raw, _) = excess_sums(v, &idx, &plane);
    let norm = omega(m) * r.powi(m as i32);
    let bounds = projected_bounds(v, &ProjectionPlane::coordinate(m, d - m));
    Ok(ExcessReport {
        center: x.to_vec(),
        radius: r,
        value: raw / norm,
        raw_sum: raw,
        mass_ratio: mass / norm,
        plane,
        sample_count: idx.len(),
        trusted: inside_bounds(&x[..m], r, &bounds, 4.0 * v.mesh_scale()),
    })
}

// ---------------------------------------------------------------- maximal function

/// Cylinders `C_s(y) ⊆ C_4` with `s = 4·2^{−k}`, `k = 0..=K`, and centers
/// on the lattice `(s/4)·Z^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicFamily {
    m: usize,
    levels: usize,
}

/// Outer radius of the admissible region `C_4`.
pub const OUTER_RADIUS: f64 = 4.0;

impl DyadicFamily {
    /// `K = ⌊log₂(4/(8h))⌋`.
    pub fn new(m: usize, mesh_scale: f64) -> Result<Self> {
        if !(mesh_scale > 0.0) || m == 0 {
            return Err(invalid("family needs m ≥ 1 and a positive mesh scale"));
        }
        let k = (OUTER_RADIUS / (8.0 * mesh_scale)).log2().floor();
        if k < 0.0 {
            return Err(invalid(format!("mesh scale {mesh_scale} too coarse for C_4")));
        }
        Ok(Self::with_levels(m, k as usize))
    }

    pub fn with_levels(m: usize, k_max: usize) -> Self {
        Self { m, levels: k_max + 1 }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn level_count(&self) -> usize {
        self.levels
    }

    pub fn radius(&self, k: usize) -> f64 {
        OUTER_RADIUS / (1u64 << k) as f64
    }

    pub fn spacing(&self, k: usize) -> f64 {
        self.radius(k) / 4.0
    }

    fn admissible(&self, y: &[f64], s: f64) -> bool {
        norm(y) + s <= OUTER_RADIUS * (1.0 + 1e-12)
    }
}

fn norm(y: &[f64]) -> f64 {
    y.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Lattice indices of level-`k` centers whose cylinder may contain `x`.
fn containing_range(x: &[f64], s: f64, delta: f64) -> Vec<(i64, i64)> {
    x.iter()
        .map(|&xi| (((xi - s) / delta).floor() as i64, ((xi + s) / delta).ceil() as i64))
        .collect()
}

fn for_each_index(ranges: &[(i64, i64)], mut f: impl FnMut(&[i64])) {
    let m = ranges.len();
    let mut j: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    if ranges.iter().any(|r| r.0 > r.1) {
        return;
    }
    loop {
        f(&j);
        let mut ax = m;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            j[ax] += 1;
            if j[ax] <= ranges[ax].1 {
                break;
            }
            j[ax] = ranges[ax].0;
        }
    }
}

fn center_of(j: &[i64], delta: f64) -> Vec<f64> {
    j.iter().map(|&a| a as f64 * delta).collect()
}

/// `me(x)` by direct evaluation of every family cylinder containing `x`.
pub fn maximal_excess(v: &DiscreteVarifold, x: &[f64], family: &DyadicFamily) -> Result<f64> {
    let m = v.m();
    if x.len() != m || family.m() != m {
        return Err(Error::DimensionMismatch {
            what: "maximal function point",
            expected: m,
            found: x.len(),
        });
    }
    let n = v.n();
    let mut best: f64 = 0.0;
    for k in 0..family.level_count() {
        let s = family.radius(k);
        let delta = family.spacing(k);
        let mut centers = Vec::new();
        for_each_index(&containing_range(x, s, delta), |j| {
            let y = center_of(j, delta);
            if family.admissible(&y, s) && dist(&y, x) < s {
                centers.push(y);
            }
        });
        for y in centers {
            let idx = v.select(&Region::cylinder0(m, n, &y, s));
            let (raw, _) = excess_sums(v, &idx, &ProjectionPlane::coordinate(m, n));
            best = best.max(raw / (omega(m) * s.powi(m as i32)));
        }
    }
    Ok(best)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Precomputed family excesses for every cylinder meeting `B_roi`.
#[derive(Debug, Clone)]
pub struct MaximalTable {
    family: DyadicFamily,
    levels: Vec<LevelTable>,
    untrusted: usize,
}

#[derive(Debug, Clone)]
struct LevelTable {
    half: i64,
    /// Dense over `[-half, half]^m`, NaN where inadmissible.
    values: Vec<f64>,
}

impl LevelTable {
    fn slot(&self, j: &[i64]) -> Option<usize> {
        let w = 2 * self.half + 1;
        let mut s = 0i64;
        for &a in j {
            if a.abs() > self.half {
                return None;
            }
            s = s * w + (a + self.half);
        }
        Some(s as usize)
    }
}

/// Evaluates every family cylinder that can contain a point of `B_roi`.
pub fn maximal_table(v: &DiscreteVarifold, family: &DyadicFamily, roi: f64) -> Result<MaximalTable> {
    let m = v.m();
    if family.m() != m {
        return Err(Error::DimensionMismatch {
            what: "family dimension",
            expected: m,
            found: family.m(),
        });
    }
    let n = v.n();
    let pi0 = ProjectionPlane::coordinate(m, n);
    let bounds = projected_bounds(v, &pi0);
    let mut tasks: Vec<(usize, usize, Vec<f64>, f64)> = Vec::new();
    let mut levels = Vec::with_capacity(family.level_count());
    for k in 0..family.level_count() {
        let s = family.radius(k);
        let delta = family.spacing(k);
        let half = ((roi + s) / delta).floor() as i64;
        let size = ((2 * half + 1) as usize).pow(m as u32);
        let table = LevelTable {
            half,
            values: vec![f64::NAN; size],
        };
        for_each_index(&vec![(-half, half); m], |j| {
            let y = center_of(j, delta);
            if family.admissible(&y, s) && norm(&y) < roi + s {
                tasks.push((k, table.slot(j).unwrap(), y, s));
            }
        });
        levels.push(table);
    }
    let results: Vec<(f64, bool)> = tasks
        .par_iter()
        .map(|(_, _, y, s)| {
            let idx = v.select(&Region::cylinder0(m, n, y, *s));
            let (raw, _) = excess_sums(v, &idx, &pi0);
            (
                raw / (omega(m) * s.powi(m as i32)),
                inside_bounds(y, *s, &bounds, 4.0 * v.mesh_scale()),
            )
        })
        .collect();
    let mut untrusted = 0;
    for ((k, slot, _, _), (val, ok)) in tasks.iter().zip(results) {
        levels[*k].values[*slot] = val;
        if !ok {
            untrusted += 1;
        }
    }
    Ok(MaximalTable {
        family: family.clone(),
        levels,
        untrusted,
    })
}

impl MaximalTable {
    pub fn family(&self) -> &DyadicFamily {
        &self.family
    }

    /// Number of tabulated cylinders leaving the sampled extent.
    pub fn untrusted_count(&self) -> usize {
        self.untrusted
    }

    /// `me(x)` from the table; `x` must lie in the region of interest.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut best: f64 = 0.0;
        for (k, lt) in self.levels.iter().enumerate() {
            let s = self.family.radius(k);
            let delta = self.family.spacing(k);
            for_each_index(&containing_range(x, s, delta), |j| {
                if let Some(slot) = lt.slot(j) {
                    let val = lt.values[slot];
                    if !val.is_nan() && dist(&center_of(j, delta), x) < s {
                        best = best.max(val);
                    }
                }
            });
        }
        best
    }

    /// Largest tabulated excess.
    pub fn max_value(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.values.iter())
            .filter(|v| !v.is_nan())
            .fold(0.0, |a, &b| a.max(b))
    }

    /// `(level, center, excess)` for every tabulated cylinder.
    pub fn cylinders(&self) -> Vec<(usize, Vec<f64>, f64)> {
        let mut out = Vec::new();
        for (k, lt) in self.levels.iter().enumerate() {
            let delta = self.family.spacing(k);
            let m = self.family.m();
            for_each_index(&vec![(-lt.half, lt.half); m], |j| {
                let val = lt.values[lt.slot(j).unwrap()];
                if !val.is_nan() {
                    out.push((k, center_of(j, delta), val));
                }
            });
        }
        out
    }
}

/// `K_λ = {x ∈ B₁ : me(x) ≤ λ}` on a cell-centered grid.
#[derive(Debug, Clone)]
pub struct GoodSet {
    pub grid: DiskGrid,
    /// `me` at each grid node.
    pub me: Vec<f64>,
    pub lambda: f64,
}

/// Good set on a grid of spacing `mesh_scale` over `B₁`.
pub fn good_set(v: &DiscreteVarifold, lambda: f64) -> Result<GoodSet> {
    let family = DyadicFamily::new(v.m(), v.mesh_scale())?;
    let table = maximal_table(v, &family, 1.0)?;
    let grid = DiskGrid::new(v.m(), v.mesh_scale(), 1.0)?;
    good_set_from_table(&table, grid, lambda)
}

pub fn good_set_from_table(table: &MaximalTable, grid: DiskGrid, lambda: f64) -> Result<GoodSet> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("λ must be positive, got {lambda}")));
    }
    let me: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| table.eval(&grid.position(i)))
        .collect();
    Ok(GoodSet { grid, me, lambda })
}

impl GoodSet {
    /// Same `me`, new threshold.
    pub fn with_threshold(&self, lambda: f64) -> GoodSet {
        GoodSet {
            grid: self.grid.clone(),
            me: self.me.clone(),
            lambda,
        }
    }

    pub fn contains(&self, node: usize) -> bool {
        self.me[node] <= self.lambda
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.me.len()).map(|i| self.contains(i)).collect()
    }

    pub fn good_count(&self) -> usize {
        (0..self.me.len()).filter(|&i| self.contains(i)).count()
    }

    /// `|B₁ ∖ K_λ|` by cell counting.
    pub fn complement_measure(&self) -> f64 {
        (0..self.me.len())
            .filter(|&i| !self.contains(i))
            .map(|i| self.grid.cell_measure(i))
            .sum()
    }

    /// `‖V‖(C₁ ∖ (K_λ × Rⁿ))`, assigning each sample to its grid cell.
    pub fn mass_outside(&self, v: &DiscreteVarifold) -> f64 {
        let m = v.m();
        let h = self.grid.h();
        let idx = v.select(&Region::cylinder0(m, v.n(), &vec![0.0; m], 1.0));
        let mut total = 0.0;
        for i in idx {
            let x = v.position(i);
            let k: Vec<i64> = x[..m].iter().map(|a| (a / h).floor() as i64).collect();
            let good = self.grid.index_of(&k).is_some_and(|node| self.contains(node));
            if !good {
                total += v.mass_of(i);
            }
        }
        total
    }
}
