//! Height bands and the Q-valued Lipschitz approximation of a varifold
//! over its good set, with validators for the accompanying estimates.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::excess::{cylindrical_excess, good_set_from_table, maximal_table, CylinderSpec, DyadicFamily, GoodSet};
use crate::grassmann::hs_sq_to_coordinate;
use crate::numerics::omega;
use crate::qvalued::{
    g_metric, lipschitz_constant_masked, q_energy_masked, weak_laplacian_pairing, DiskGrid, QGridFunction, QPoint,
};
use crate::testfn::TestFunction;
use crate::varifold::{DiscreteVarifold, Region};

// ---------------------------------------------------------------- clustering

/// Single-linkage clusters of points in Rⁿ: two points are linked when
/// their distance is at most `gap`. Labels follow the lexicographic order
/// of each cluster's smallest member.
pub fn single_linkage(points: &[f64], n: usize, gap: f64) -> Vec<usize> {
    let len = points.len() / n.max(1);
    if len == 0 {
        return Vec::new();
    }
    if n == 1 {
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| points[a].total_cmp(&points[b]).then(a.cmp(&b)));
        let mut labels = vec![0; len];
        let mut label = 0;
        for w in 0..len {
            if w > 0 && points[order[w]] - points[order[w - 1]] > gap {
                label += 1;
            }
            labels[order[w]] = label;
        }
        return labels;
    }
    // cells of diameter ≤ gap are internally linked; neighbors are checked
    let cell = gap / (n as f64).sqrt();
    let reach = (n as f64).sqrt().ceil() as i64;
    let key = |i: usize| -> Vec<i64> { points[i * n..(i + 1) * n].iter().map(|v| (v / cell).floor() as i64).collect() };
    let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for i in 0..len {
        cells.entry(key(i)).or_default().push(i);
    }
    let mut keys: Vec<Vec<i64>> = cells.keys().cloned().collect();
    keys.sort();
    let slot: HashMap<&Vec<i64>, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let mut parent: Vec<usize> = (0..keys.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let gap2 = gap * gap;
    let dist2 = |a: usize, b: usize| -> f64 {
        (0..n).map(|c| (points[a * n + c] - points[b * n + c]).powi(2)).sum()
    };
    for (ci, k) in keys.iter().enumerate() {
        let mut off = vec![-reach; n];
        loop {
            let nb: Vec<i64> = k.iter().zip(&off).map(|(a, b)| a + b).collect();
            if nb > *k {
                if let Some(&cj) = slot.get(&nb) {
                    let (ra, rb) = (find(&mut parent, ci), find(&mut parent, cj));
                    if ra != rb {
                        let linked = cells[k]
                            .iter()
                            .any(|&a| cells[&nb].iter().any(|&b| dist2(a, b) <= gap2));
                        if linked {
                            parent[ra.max(rb)] = ra.min(rb);
                        }
                    }
                }
            }
            let mut ax = n;
            let mut done = true;
            while ax > 0 {
                ax -= 1;
                off[ax] += 1;
                if off[ax] <= reach {
                    done = false;
                    break;
                }
                off[ax] = -reach;
            }
            if done {
                break;
            }
        }
    }
    // relabel by smallest member in lexicographic point order
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        points[a * n..(a + 1) * n]
            .iter()
            .zip(&points[b * n..(b + 1) * n])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut relabel: HashMap<usize, usize> = HashMap::new();
    let mut labels = vec![0; len];
    for i in order {
        let root = find(&mut parent, slot[&key(i)]);
        let next = relabel.len();
        labels[i] = *relabel.entry(root).or_insert(next);
    }
    labels
}

/// One cluster of normal coordinates with its mass.
#[derive(Debug, Clone, PartialEq)]
struct Cluster {
    /// Mass-weighted mean.
    mean: Vec<f64>,
    /// Midpoint of the bounding box.
    mid: Vec<f64>,
    /// Largest distance from `mid` to a member.
    radius: f64,
    mass: f64,
}

fn clusters_of(v: &DiscreteVarifold, idx: &[usize], gap: f64) -> Vec<Cluster> {
    let (m, n) = (v.m(), v.n());
    let ys: Vec<f64> = idx.iter().flat_map(|&i| v.position(i)[m..].to_vec()).collect();
    let labels = single_linkage(&ys, n, gap);
    let count = labels.iter().copied().max().map_or(0, |x| x + 1);
    let mut out = Vec::with_capacity(count);
    for c in 0..count {
        let members: Vec<usize> = (0..idx.len()).filter(|&j| labels[j] == c).collect();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        let mut mean = vec![0.0; n];
        let mut mass = 0.0;
        for &j in &members {
            let w = v.mass_of(idx[j]);
            for a in 0..n {
                let y = ys[j * n + a];
                lo[a] = lo[a].min(y);
                hi[a] = hi[a].max(y);
                mean[a] += w * y;
            }
            mass += w;
        }
        mean.iter_mut().for_each(|x| *x /= mass);
        let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let radius = members
            .iter()
            .map(|&j| (0..n).map(|a| (ys[j * n + a] - mid[a]).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        out.push(Cluster { mean, mid, radius, mass });
    }
    out
}

// ---------------------------------------------------------------- height bands

/// Strips `π₀ × B(y_h, halfwidth)` covering the support in `C_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightBands {
    pub centers: Vec<Vec<f64>>,
    pub halfwidth: f64,
    pub coverage_fraction: f64,
    /// Clusters found at the mandated gap, before truncation to `Q`.
    pub cluster_count: usize,
    /// More than `Q` clusters.
    pub violation: bool,
    /// `E₁ = E(V, C₁, π₀)`.
    pub e1: f64,
    pub gap: f64,
    /// `halfwidth / E₁^{1/(2m)}`.
    pub first_law_ratio: f64,
    /// `halfwidth / (|log E₁|^{1−1/m} E₁^{1/m})`.
    pub sharp_law_ratio: f64,
}

/// Clusters the normal coordinates of the samples in `C_r` with gap
/// `max(3·|log E₁|^{1−1/m}E₁^{1/m}, 4h)`.
pub fn height_bands(v: &DiscreteVarifold, r: f64, q: usize) -> Result<HeightBands> {
    let (m, n) = (v.m(), v.n());
    if !(r > 0.0 && r < 1.0) {
        return Err(invalid(format!("inner radius must lie in (0, 1), got {r}")));
    }
    if q == 0 {
        return Err(invalid("Q must be positive"));
    }
    let e1 = cylindrical_excess(v, &CylinderSpec::standard(m, n, vec![0.0; m], 1.0))?.value;
    let mf = m as f64;
    let sharp = if e1 > 0.0 && e1 < 1.0 {
        e1.ln().abs().powf(1.0 - 1.0 / mf) * e1.powf(1.0 / mf)
    } else {
        e1.powf(1.0 / mf)
    };
    let gap = (3.0 * sharp).max(4.0 * v.mesh_scale());
    let idx = v.select(&Region::cylinder0(m, n, &vec![0.0; m], r));
    let mut clusters = clusters_of(v, &idx, gap);
    let cluster_count = clusters.len();
    let total: f64 = clusters.iter().map(|c| c.mass).sum();
    // keep the Q heaviest, ties by order
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&a, &b| clusters[b].mass.total_cmp(&clusters[a].mass).then(a.cmp(&b)));
    order.truncate(q);
    order.sort_unstable();
    clusters = order.into_iter().map(|i| clusters[i].clone()).collect();
    let kept: f64 = clusters.iter().map(|c| c.mass).sum();
    let halfwidth = clusters.iter().map(|c| c.radius).fold(0.0, f64::max);
    Ok(HeightBands {
        centers: clusters.iter().map(|c| c.mid.clone()).collect(),
        halfwidth,
        coverage_fraction: if total > 0.0 { kept / total } else { 1.0 },
        cluster_count,
        violation: cluster_count > q,
        e1,
        gap,
        first_law_ratio: halfwidth / e1.powf(1.0 / (2.0 * mf)),
        sharp_law_ratio: halfwidth / sharp,
    })
}

/// Single-strip height bound at a point of density `Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityHeight {
    /// `sup |y|` over the support in `C_r`.
    pub halfwidth: f64,
    pub e1: f64,
    /// `halfwidth / √E₁`.
    pub ratio: f64,
    /// Measured density ratio at the origin.
    pub density: f64,
}

/// Requires the density ratio at the origin (radius `8h`) to round to `Q`.
pub fn height_at_density_q(v: &DiscreteVarifold, r: f64, q: usize) -> Result<DensityHeight> {
    let (m, n) = (v.m(), v.n());
    let density = v.density_ratio(&vec![0.0; m + n], 8.0 * v.mesh_scale())?;
    if (density - q as f64).abs() >= 0.5 {
        return Err(Error::Precondition(format!(
            "density ratio at the origin is {density:.4}, which does not round to Q = {q}"
        )));
    }
    let e1 = cylindrical_excess(v, &CylinderSpec::standard(m, n, vec![0.0; m], 1.0))?.value;
    let halfwidth = v
        .select(&Region::cylinder0(m, n, &vec![0.0; m], r))
        .into_iter()
        .map(|i| v.position(i)[m..].iter().map(|y| y * y).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok(DensityHeight {
        halfwidth,
        e1,
        ratio: if e1 > 0.0 { halfwidth / e1.sqrt() } else { 0.0 },
        density,
    })
}

// ---------------------------------------------------------------- approximant

/// Construction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipOptions {
    /// Largest admissible `E₄`.
    pub excess_threshold: f64,
    /// Thin-cylinder radius in units of the mesh scale.
    pub thin_factor: f64,
    /// `C₀` in the cluster gap `C₀ λ^{1/(2m)} s₀`.
    pub gap_constant: f64,
    /// Lattice reach of the Lipschitz measurement.
    pub stencil: usize,
}

impl Default for LipOptions {
    fn default() -> Self {
        Self {
            excess_threshold: 0.1,
            thin_factor: 8.0,
            gap_constant: 1.0,
            stencil: 2,
        }
    }
}

/// A node where more than `Q` sheets were found.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub node: Vec<i64>,
    pub clusters: usize,
}

/// `f: B₁ → A_Q(Rⁿ)` built on `K_λ` and extended to the rest of the grid.
#[derive(Debug, Clone)]
pub struct LipApproximant {
    pub f: QGridFunction,
    /// Good-set membership per grid node (after removing violations).
    pub good: Vec<bool>,
    pub good_set: GoodSet,
    pub lambda: f64,
    pub lip_measured: f64,
    pub e4: f64,
    pub thin_radius: f64,
    pub gap: f64,
    pub violations: Vec<Violation>,
    /// Multiplicities of each node's distinct points (good nodes only).
    pub multiplicities: Vec<Vec<usize>>,
}

/// Builds the approximant node by node: clusters of normal coordinates in
/// `C_{s₀}(x)` become the points of `f(x)`, with multiplicities rounded from
/// their local mass ratios.
pub fn build_lipschitz_approximant(v: &DiscreteVarifold, lambda: f64, q: usize, opts: &LipOptions) -> Result<LipApproximant> {
    let (m, n) = (v.m(), v.n());
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid(format!("λ ∈ (0,1) required, got {lambda}")));
    }
    if q == 0 {
        return Err(invalid("Q must be positive"));
    }
    let e4 = cylindrical_excess(v, &CylinderSpec::standard(m, n, vec![0.0; m], 4.0))?.value;
    if e4 > opts.excess_threshold {
        return Err(Error::Precondition(format!(
            "E₄ = {e4:.4e} exceeds the smallness threshold {}",
            opts.excess_threshold
        )));
    }
    let r3 = v.mass(&Region::cylinder0(m, n, &vec![0.0; m], 3.0)) / (omega(m) * 3f64.powi(m as i32));
    if (r3 - q as f64).abs() >= 0.5 {
        return Err(Error::Precondition(format!(
            "mass ratio of C₃ is {r3:.4}, outside (Q − 1/2, Q + 1/2) for Q = {q}"
        )));
    }
    let h = v.mesh_scale();
    let family = DyadicFamily::new(m, h)?;
    let table = maximal_table(v, &family, 1.0)?;
    let grid = DiskGrid::new(m, h, 1.0)?;
    let good_set = good_set_from_table(&table, grid.clone(), lambda)?;
    let s0 = opts.thin_factor * h;
    let gap = opts.gap_constant * lambda.powf(1.0 / (2.0 * m as f64)) * s0;
    let norm = omega(m) * s0.powi(m as i32);
    let tol = 0.5 / q as f64 + 1e-9;

    enum NodeOutcome {
        Skip,
        Value(Vec<(usize, Vec<f64>)>),
        Overflow(usize),
    }
    let outcomes: Vec<Result<NodeOutcome>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if !good_set.contains(i) {
                return Ok(NodeOutcome::Skip);
            }
            let x = grid.position(i);
            let idx = v.select(&Region::cylinder0(m, n, &x, s0));
            let clusters = clusters_of(v, &idx, gap);
            if clusters.len() > q {
                return Ok(NodeOutcome::Overflow(clusters.len()));
            }
            let mut pts = Vec::with_capacity(clusters.len());
            let mut total = 0;
            for c in &clusters {
                let ratio = c.mass / norm;
                let k = ratio.round();
                if (ratio - k).abs() > tol {
                    return Err(Error::RoundingAmbiguity {
                        node: grid.coord(i).to_vec(),
                        ratio,
                    });
                }
                let k = k as usize;
                if k > 0 {
                    total += k;
                    pts.push((k, c.mean.clone()));
                }
            }
            if total != q {
                return Err(Error::MultiplicityMismatch {
                    node: grid.coord(i).to_vec(),
                    total,
                    expected: q,
                });
            }
            Ok(NodeOutcome::Value(pts))
        })
        .collect();

    let mut good = vec![false; grid.len()];
    let mut node_pts: Vec<Option<Vec<(usize, Vec<f64>)>>> = vec![None; grid.len()];
    let mut violations = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o? {
            NodeOutcome::Skip => {}
            NodeOutcome::Overflow(c) => violations.push(Violation {
                node: grid.coord(i).to_vec(),
                clusters: c,
            }),
            NodeOutcome::Value(p) => {
                good[i] = true;
                node_pts[i] = Some(p);
            }
        }
    }
    if !good.iter().any(|&g| g) {
        return Err(Error::Precondition("the good set is empty".into()));
    }
    let source = nearest_good(&grid, &good);
    let mut values = Vec::with_capacity(grid.len() * q * n);
    let mut multiplicities = vec![Vec::new(); grid.len()];
    for i in 0..grid.len() {
        let pts = node_pts[source[i]].as_ref().expect("source is good");
        let qp = QPoint::from_weighted(pts)?;
        values.extend_from_slice(qp.as_slice());
        if good[i] {
            multiplicities[i] = pts.iter().map(|p| p.0).collect();
        }
    }
    let f = QGridFunction::from_values(grid, q, n, values)?;
    let lip_measured = lipschitz_constant_masked(&f, opts.stencil, Some(&good));
    Ok(LipApproximant {
        f,
        good,
        good_set,
        lambda,
        lip_measured,
        e4,
        thin_radius: s0,
        gap,
        violations,
        multiplicities,
    })
}

/// For every node, the nearest good node (Euclidean, ties by index).
fn nearest_good(grid: &DiskGrid, good: &[bool]) -> Vec<usize> {
    let m = grid.m();
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if good[i] {
                return i;
            }
            let k = grid.coord(i).to_vec();
            let mut best: Option<(i64, usize)> = None;
            let mut rho: i64 = 1;
            loop {
                let mut off = vec![-rho; m];
                loop {
                    let kk: Vec<i64> = k.iter().zip(&off).map(|(a, b)| a + b).collect();
                    if let Some(j) = grid.index_of(&kk) {
                        if good[j] {
                            let d2: i64 = off.iter().map(|o| o * o).sum();
                            if best.is_none_or(|(bd, bj)| d2 < bd || (d2 == bd && j < bj)) {
                                best = Some((d2, j));
                            }
                        }
                    }
                    let mut ax = m;
                    let mut done = true;
                    while ax > 0 {
                        ax -= 1;
                        off[ax] += 1;
                        if off[ax] <= rho {
                            done = false;
                            break;
                        }
                        off[ax] = -rho;
                    }
                    if done {
                        break;
                    }
                }
                // any node outside the box is farther than rho
                if let Some((d2, j)) = best {
                    if d2 <= rho * rho {
                        return j;
                    }
                }
                rho += 1;
            }
        })
        .collect()
}

impl LipApproximant {
    /// `f` restricted to the good nodes as `(node, value)` pairs.
    pub fn good_values(&self) -> Vec<(usize, QPoint)> {
        (0..self.good.len())
            .filter(|&i| self.good[i])
            .map(|i| (i, self.f.value(i)))
            .collect()
    }

    /// Sidecar mask: a header line then one `0`/`1` per node.
    pub fn write_mask<W: Write>(&self, w: W) -> Result<()> {
        write_mask(&self.good, self.f.grid(), w)
    }
}

pub fn write_mask<W: Write>(mask: &[bool], grid: &DiskGrid, mut w: W) -> Result<()> {
    writeln!(w, "kmask 1 {} {:.17e} {:.17e} {}", grid.m(), grid.h(), grid.r(), mask.len())?;
    for &b in mask {
        writeln!(w, "{}", u8::from(b))?;
    }
    Ok(())
}

pub fn read_mask<R: BufRead>(r: R) -> Result<Vec<bool>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "kmask" || parts[1] != "1" {
        return Err(Error::Parse {
            line: 1,
            message: format!("bad mask header '{header}'"),
        });
    }
    let len: usize = parts[5].parse().map_err(|_| Error::Parse {
        line: 1,
        message: "bad node count".into(),
    })?;
    let mut out = Vec::with_capacity(len);
    for (k, line) in lines.enumerate() {
        let line = line?;
        match line.trim() {
            "0" => out.push(false),
            "1" => out.push(true),
            "" => continue,
            other => {
                return Err(Error::Parse {
                    line: k + 2,
                    message: format!("expected 0 or 1, got '{other}'"),
                })
            }
        }
    }
    if out.len() != len {
        return Err(Error::Parse {
            line: len + 1,
            message: format!("expected {len} entries, found {}", out.len()),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- validators

/// One row of a validator report.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub id: String,
    pub lhs: f64,
    pub rhs_law: f64,
    pub ratio: f64,
}

impl EstimateRow {
    fn new(id: impl Into<String>, lhs: f64, rhs_law: f64) -> Self {
        let ratio = if rhs_law != 0.0 {
            lhs / rhs_law
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            id: id.into(),
            lhs,
            rhs_law,
            ratio,
        }
    }
}

/// CSV `estimate_id,lhs,rhs_law,ratio`.
pub fn estimates_to_csv(rows: &[EstimateRow]) -> String {
    let mut s = String::from("estimate_id,lhs,rhs_law,ratio\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.12e},{:.12e},{:.12e}", r.id, r.lhs, r.rhs_law, r.ratio);
    }
    s
}

pub fn find_row<'a>(rows: &'a [EstimateRow], id: &str) -> Option<&'a EstimateRow> {
    rows.iter().find(|r| r.id == id)
}

/// Ground-truth density `Θ(x, y)` for a generated model.
pub type DensityOracle<'a> = &'a (dyn Fn(&[f64], &[f64]) -> u32 + Sync);

/// Good nodes used for the local checks: every node when few, otherwise an
/// evenly strided subset of at most `cap`.
fn sampled_good(a: &LipApproximant, cap: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..a.good.len()).filter(|&i| a.good[i]).collect();
    if all.len() <= cap {
        return all;
    }
    let stride = all.len().div_ceil(cap);
    all.into_iter().step_by(stride).collect()
}

/// Both sides of the Lipschitz bound, the mass-ratio pinching, the band
/// radius, the measure estimate, the density identity and the sup bound.
pub fn validate_lip_estimates(v: &DiscreteVarifold, a: &LipApproximant, density: Option<DensityOracle>) -> Result<Vec<EstimateRow>> {
    let (m, n) = (v.m(), v.n());
    let q = a.f.q();
    let mf = m as f64;
    let lam = a.lambda;
    let mut rows = Vec::new();
    rows.push(EstimateRow::new(
        "lipschitz",
        a.lip_measured,
        lam.ln().abs().powf(1.0 - 1.0 / mf) * lam.powf(1.0 / mf),
    ));

    // (i) and (ii) over radii s₀·2^k ≤ 2 centered at sampled good nodes
    let nodes = sampled_good(a, 256);
    let mut radii = Vec::new();
    let mut s = a.thin_radius;
    while s <= 2.0 {
        radii.push(s);
        s *= 2.0;
    }
    let per_node: Vec<(f64, f64)> = nodes
        .par_iter()
        .map(|&i| {
            let x = a.f.grid().position(i);
            let fx = a.f.value(i);
            let mut pinch: f64 = 0.0;
            let mut band: f64 = 0.0;
            for &s in &radii {
                if x.iter().map(|c| c * c).sum::<f64>().sqrt() + s > 3.0 {
                    continue;
                }
                let idx = v.select(&Region::cylinder0(m, n, &x, s));
                let mass: f64 = idx.iter().map(|&j| v.mass_of(j)).sum();
                pinch = pinch.max((mass / (omega(m) * s.powi(m as i32)) - q as f64).abs());
                for &j in &idx {
                    let y = &v.position(j)[m..];
                    let d = (0..q)
                        .map(|k| {
                            fx.point(k)
                                .iter()
                                .zip(y)
                                .map(|(p, yy)| (p - yy) * (p - yy))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    band = band.max(d / s);
                }
            }
            (pinch, band)
        })
        .collect();
    let pinch = per_node.iter().map(|p| p.0).fold(0.0, f64::max);
    let band = per_node.iter().map(|p| p.1).fold(0.0, f64::max);
    rows.push(EstimateRow::new("mass_ratio_pinch", pinch, 0.5));
    rows.push(EstimateRow::new("band_radius", band, lam.powf(1.0 / (2.0 * mf))));

    // (iii)
    let gs = a.good_set.with_threshold(lam);
    let mut gs_eff = gs.clone();
    for (i, g) in a.good.iter().enumerate() {
        if !g {
            gs_eff.me[i] = f64::INFINITY;
        }
    }
    let measure = gs_eff.complement_measure() + gs_eff.mass_outside(v);
    rows.push(EstimateRow::new("measure_estimate", measure, a.e4 / lam));

    // (iv)
    if let Some(theta) = density {
        let mut checked = 0usize;
        let mut mismatches = 0usize;
        for i in 0..a.good.len() {
            if !a.good[i] {
                continue;
            }
            let x = a.f.grid().position(i);
            let fx = a.f.value(i);
            // distinct points of f(x) with their multiplicities
            let mut seen: Vec<(Vec<f64>, usize)> = Vec::new();
            for k in 0..q {
                let p = fx.point(k);
                match seen.iter_mut().find(|(s, _)| s.as_slice() == p) {
                    Some(e) => e.1 += 1,
                    None => seen.push((p.to_vec(), 1)),
                }
            }
            for (p, mult) in seen {
                checked += 1;
                if theta(&x, &p) as usize != mult {
                    mismatches += 1;
                }
            }
        }
        rows.push(EstimateRow::new("density_match", mismatches as f64, checked as f64));
    }

    // (v)
    let amp = v
        .select(&Region::cylinder0(m, n, &vec![0.0; m], 1.0))
        .into_iter()
        .map(|i| v.position(i)[m..].iter().map(|y| y * y).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let zero = QPoint::constant(q, &vec![0.0; n]);
    let sup = (0..a.f.grid().len())
        .map(|i| g_metric(&a.f.value(i), &zero).unwrap_or(0.0))
        .fold(0.0, f64::max);
    rows.push(EstimateRow::new("sup_bound", sup, amp));
    Ok(rows)
}

/// Energy bounds for the approximant: the `L^q` gradient bound, the weak
/// harmonicity defect per target component, the area identity over
/// `K_λ ∩ B_area`, and the small-tilt Dirichlet/tilt ratio on `C₁`.
pub fn validate_lipen(
    v: &DiscreteVarifold,
    a: &LipApproximant,
    q_exp: f64,
    phi: &dyn TestFunction,
    area_radius: f64,
) -> Result<Vec<EstimateRow>> {
    if !(q_exp >= 2.0) {
        return Err(invalid(format!("exponent q ≥ 2 required, got {q_exp}")));
    }
    let (m, n) = (v.m(), v.n());
    let d = m + n;
    let lam = a.lambda;
    let qv = a.f.q();
    let mut rows = Vec::new();

    let tilt_q = |region: &Region, p: f64| -> f64 {
        v.select(region)
            .into_iter()
            .map(|i| v.mass_of(i) * hs_sq_to_coordinate(v.tangent_rows(i), m, d).powf(p / 2.0))
            .sum()
    };
    let c4 = Region::cylinder0(m, n, &vec![0.0; m], 4.0);
    let c1 = Region::cylinder0(m, n, &vec![0.0; m], 1.0);
    let energy = q_energy_masked(&a.f, q_exp, None);
    rows.push(EstimateRow::new(
        format!("lipen1_q{q_exp}"),
        energy,
        lam.powf(-q_exp / 2.0) * tilt_q(&c4, q_exp),
    ));

    let pairing = weak_laplacian_pairing(&a.f, phi)?;
    let grid = a.f.grid();
    let mut g = vec![0.0; m];
    let grad_sup = (0..grid.len())
        .map(|i| {
            phi.gradient(&grid.position(i), &mut g);
            g.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    for (j, p) in pairing.iter().enumerate() {
        rows.push(EstimateRow::new(format!("lipen2_e{}", j + 1), p.abs(), grad_sup * a.e4 / lam));
    }

    // area identity over B = good cells inside B_area
    let h = grid.h();
    let in_b: Vec<bool> = (0..grid.len())
        .map(|i| a.good[i] && grid.position(i).iter().map(|c| c * c).sum::<f64>().sqrt() < area_radius)
        .collect();
    let b_measure: f64 = (0..grid.len()).filter(|&i| in_b[i]).map(|i| grid.cell_measure(i)).sum();
    let mut vb = 0.0;
    let mut tilt_b = 0.0;
    for i in v.select(&c1) {
        let x = v.position(i);
        let k: Vec<i64> = x[..m].iter().map(|c| (c / h).floor() as i64).collect();
        if grid.index_of(&k).is_some_and(|node| in_b[node]) {
            vb += v.mass_of(i);
            tilt_b += v.mass_of(i) * hs_sq_to_coordinate(v.tangent_rows(i), m, d);
        }
    }
    rows.push(EstimateRow::new("area", (vb - qv as f64 * b_measure).abs(), tilt_b));
    rows.push(EstimateRow::new("dirichlet_vs_tilt_C1", q_energy_masked(&a.f, 2.0, None), tilt_q(&c1, 2.0)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate_graph, generate_plane, GraphSpec, PlaneSpec, Sheet};
    use crate::testfn::RadialBump;

    #[test]
    fn single_linkage_one_and_two_dims() {
        let l = single_linkage(&[0.0, 0.05, 1.0, 0.1, 1.02], 1, 0.06);
        assert_eq!(l, vec![0, 0, 1, 0, 1]);
        let pts = [0.0, 0.0, 0.05, 0.05, 1.0, 1.0, 0.09, 0.1];
        let l2 = single_linkage(&pts, 2, 0.08);
        assert_eq!(l2, vec![0, 0, 1, 0]);
        assert!(single_linkage(&[], 1, 0.1).is_empty());
    }

    #[test]
    fn plane_bands_and_density_height() {
        let v = generate_plane(&PlaneSpec::flat(2, 1, 1.5), 1.0 / 32.0).unwrap();
        let b = height_bands(&v, 0.5, 1).unwrap();
        assert_eq!(b.centers.len(), 1);
        assert_eq!(b.halfwidth, 0.0);
        assert!(!b.violation);
        let d = height_at_density_q(&v, 0.5, 1).unwrap();
        assert_eq!(d.halfwidth, 0.0);
        assert!(height_at_density_q(&v, 0.5, 2).is_err());
    }

    #[test]
    fn parallel_planes_give_two_bands() {
        let h = 1.0 / 32.0;
        let a = generate_plane(&PlaneSpec::flat(2, 1, 1.5).with_offset(vec![0.0, 0.0, 0.2]), h).unwrap();
        let b = generate_plane(&PlaneSpec::flat(2, 1, 1.5).with_offset(vec![0.0, 0.0, -0.2]).with_multiplicity(2), h).unwrap();
        let v = a.union(&b).unwrap();
        let bands = height_bands(&v, 0.5, 3).unwrap();
        assert_eq!(bands.centers.len(), 2);
        assert!((bands.centers[0][0] + 0.2).abs() <= h);
        assert!((bands.centers[1][0] - 0.2).abs() <= h);
        assert!((bands.coverage_fraction - 1.0).abs() < 1e-15);
        let one = height_bands(&v, 0.5, 1).unwrap();
        assert!(one.violation);
    }

    #[test]
    fn plane_approximant_is_constant() {
        let v = generate_plane(&PlaneSpec::flat(2, 1, 4.0).with_multiplicity(2), 1.0 / 16.0).unwrap();
        let a = build_lipschitz_approximant(&v, 0.02, 2, &LipOptions::default()).unwrap();
        assert!(a.good.iter().all(|&g| g));
        assert_eq!(a.lip_measured, 0.0);
        for i in 0..a.good.len() {
            assert_eq!(a.f.node_values(i), &[0.0, 0.0]);
            assert_eq!(a.multiplicities[i], vec![2]);
        }
        let rows = validate_lip_estimates(&v, &a, None).unwrap();
        assert_eq!(find_row(&rows, "measure_estimate").unwrap().lhs, 0.0);
        assert_eq!(find_row(&rows, "sup_bound").unwrap().lhs, 0.0);
        let phi = RadialBump::new(vec![0.0, 0.0], 0.5);
        let en = validate_lipen(&v, &a, 2.0, &phi, 0.5).unwrap();
        assert_eq!(find_row(&en, "lipen1_q2").unwrap().lhs, 0.0);
        assert_eq!(find_row(&en, "lipen2_e1").unwrap().lhs, 0.0);
    }

    #[test]
    fn preconditions_are_enforced() {
        let v = generate_plane(&PlaneSpec::flat(2, 1, 4.0), 1.0 / 8.0).unwrap();
        assert!(matches!(
            build_lipschitz_approximant(&v, 0.02, 2, &LipOptions::default()),
            Err(Error::Precondition(_))
        ));
        assert!(build_lipschitz_approximant(&v, 1.5, 1, &LipOptions::default()).is_err());
    }

    #[test]
    fn two_valued_linear_graph_round_trip() {
        let eps = 0.05;
        let h = 1.0 / 32.0;
        let spec = GraphSpec::new(
            2,
            1,
            4.0,
            vec![
                Sheet::affine(1, vec![eps, 0.0], vec![0.0]),
                Sheet::affine(1, vec![-eps, 0.0], vec![0.0]),
            ],
        )
        .with_fine_radius(1.1);
        let g = generate_graph(&spec, h).unwrap();
        let a = build_lipschitz_approximant(&g.varifold, 0.02, 2, &LipOptions::default()).unwrap();
        let mut worst: f64 = 0.0;
        for (i, val) in a.good_values() {
            let x = a.f.grid().position(i);
            worst = worst.max(g_metric(&val, &g.truth(&x)).unwrap());
            assert_eq!(a.multiplicities[i].iter().sum::<usize>(), 2);
        }
        assert!(worst <= 4.0 * h, "{worst}");
        let tol = 0.75 * a.gap;
        let oracle = |x: &[f64], y: &[f64]| g.density_at(x, y, tol);
        let rows = validate_lip_estimates(&g.varifold, &a, Some(&oracle)).unwrap();
        assert_eq!(find_row(&rows, "density_match").unwrap().lhs, 0.0);
        // stencil pairs satisfy the measured constant by definition
        let grid = a.f.grid();
        for i in (0..grid.len()).step_by(97) {
            let k = grid.coord(i).to_vec();
            if let Some(j) = grid.index_of(&[k[0] + 1, k[1] + 2]) {
                if a.good[i] && a.good[j] {
                    let gm = g_metric(&a.f.value(i), &a.f.value(j)).unwrap();
                    assert!(gm <= a.lip_measured * h * 5f64.sqrt() * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn mask_round_trip() {
        let grid = DiskGrid::new(2, 0.25, 1.0).unwrap();
        let mask: Vec<bool> = (0..grid.len()).map(|i| i % 3 == 0).collect();
        let mut buf = Vec::new();
        write_mask(&mask, &grid, &mut buf).unwrap();
        assert_eq!(read_mask(&buf[..]).unwrap(), mask);
        assert!(read_mask(&b"kmask 1 2 0.1 1 3\n1\n0\n"[..]).is_err());
        assert!(read_mask(&b"kmask 1 2 0.1 1 1\n2\n"[..]).is_err());
    }
}
