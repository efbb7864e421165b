//! Q-valued functions: the space A_Q(Rⁿ) of unordered Q-tuples, its
//! matching metric, and discrete Sobolev quantities on disk grids.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::numerics::omega;
use crate::testfn::TestFunction;

/// Gap below which two matchings count as tied.
pub const MATCH_TIE_TOL: f64 = 1e-9;

/// An element of A_Q(Rⁿ), stored as Q points in Rⁿ.
#[derive(Debug, Clone, PartialEq)]
pub struct QPoint {
    q: usize,
    n: usize,
    pts: Vec<f64>,
}

impl QPoint {
    pub fn new(q: usize, n: usize, pts: Vec<f64>) -> Result<Self> {
        if q == 0 || n == 0 {
            return Err(invalid("Q and n must be positive"));
        }
        if pts.len() != q * n {
            return Err(Error::DimensionMismatch {
                what: "QPoint entries",
                expected: q * n,
                found: pts.len(),
            });
        }
        Ok(Self { q, n, pts })
    }

    /// `Q⟦p⟧`.
    pub fn constant(q: usize, p: &[f64]) -> Self {
        let mut pts = Vec::with_capacity(q * p.len());
        for _ in 0..q {
            pts.extend_from_slice(p);
        }
        Self { q, n: p.len(), pts }
    }

    /// Builds `Σ Q_i⟦p_i⟧` from weighted points.
    pub fn from_weighted(points: &[(usize, Vec<f64>)]) -> Result<Self> {
        let n = points.first().map_or(0, |p| p.1.len());
        let mut pts = Vec::new();
        let mut q = 0;
        for (mult, p) in points {
            if p.len() != n {
                return Err(invalid("points of different dimensions"));
            }
            for _ in 0..*mult {
                pts.extend_from_slice(p);
            }
            q += mult;
        }
        Self::new(q, n, pts)
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.pts[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pts
    }

    /// Entries permuted so that entry `i` becomes `self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut pts = Vec::with_capacity(self.pts.len());
        for &p in perm {
            pts.extend_from_slice(self.point(p));
        }
        Self {
            q: self.q,
            n: self.n,
            pts,
        }
    }
}

/// Optimal pairing between two Q-tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `a_i` is paired with `b_{perm[i]}`.
    pub perm: Vec<usize>,
    pub cost_sq: f64,
    /// Another pairing within [`MATCH_TIE_TOL`] induces a different set of pairs.
    pub ambiguous: bool,
}

fn check_same_space(a: &[f64], b: &[f64], q: usize, qb: usize, n: usize, nb: usize) -> Result<()> {
    if q != qb {
        return Err(Error::DimensionMismatch {
            what: "Q",
            expected: q,
            found: qb,
        });
    }
    if n != nb {
        return Err(Error::DimensionMismatch {
            what: "target dimension",
            expected: n,
            found: nb,
        });
    }
    debug_assert_eq!(a.len(), b.len());
    Ok(())
}

/// `G(a, b) = min_σ (Σ|a_i − b_σ(i)|²)^{1/2}`.
pub fn g_metric(a: &QPoint, b: &QPoint) -> Result<f64> {
    Ok(optimal_matching(a, b)?.cost_sq.sqrt())
}

pub fn optimal_matching(a: &QPoint, b: &QPoint) -> Result<Matching> {
    check_same_space(&a.pts, &b.pts, a.q, b.q, a.n, b.n)?;
    Ok(match_slices(&a.pts, &b.pts, a.q, a.n))
}

#[inline]
fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Matching on raw row-major slices (`q` points of dimension `n`).
pub(crate) fn match_slices(a: &[f64], b: &[f64], q: usize, n: usize) -> Matching {
    if q == 1 {
        return Matching {
            perm: vec![0],
            cost_sq: sqdist(a, b),
            ambiguous: false,
        };
    }
    let mut cost = vec![0.0; q * q];
    for i in 0..q {
        for j in 0..q {
            cost[i * q + j] = sqdist(&a[i * n..(i + 1) * n], &b[j * n..(j + 1) * n]);
        }
    }
    if q <= 6 {
        brute_force(a, b, q, n, &cost)
    } else {
        let perm = hungarian(&cost, q);
        let best: f64 = (0..q).map(|i| cost[i * q + perm[i]]).sum();
        // 2-swap neighborhood probe for ties
        let mut ambiguous = false;
        'outer: for i in 0..q {
            for j in i + 1..q {
                let alt = best - cost[i * q + perm[i]] - cost[j * q + perm[j]]
                    + cost[i * q + perm[j]]
                    + cost[j * q + perm[i]];
                if (alt.max(0.0).sqrt() - best.max(0.0).sqrt()).abs() <= MATCH_TIE_TOL {
                    let mut other = perm.clone();
                    other.swap(i, j);
                    if !same_pairs(a, b, q, n, &perm, &other) {
                        ambiguous = true;
                        break 'outer;
                    }
                }
            }
        }
        Matching {
            perm,
            cost_sq: best,
            ambiguous,
        }
    }
}

fn permutations(q: usize) -> &'static [Vec<usize>] {
    static CACHE: [OnceLock<Vec<Vec<usize>>>; 7] = [
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
    ];
    CACHE[q].get_or_init(|| {
        let mut out = Vec::new();
        let mut p: Vec<usize> = (0..q).collect();
        loop {
            out.push(p.clone());
            // next lexicographic permutation
            let Some(i) = (0..q.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
                break;
            };
            let j = (i + 1..q).rev().find(|&j| p[j] > p[i]).unwrap();
            p.swap(i, j);
            p[i + 1..].reverse();
        }
        out
    })
}

fn brute_force(a: &[f64], b: &[f64], q: usize, n: usize, cost: &[f64]) -> Matching {
    let perms = permutations(q);
    let costs: Vec<f64> = perms
        .iter()
        .map(|p| (0..q).map(|i| cost[i * q + p[i]]).sum())
        .collect();
    let mut best = 0;
    for (k, c) in costs.iter().enumerate() {
        if *c < costs[best] {
            best = k;
        }
    }
    let g_best = costs[best].max(0.0).sqrt();
    let ambiguous = perms.iter().zip(&costs).any(|(p, c)| {
        (c.max(0.0).sqrt() - g_best).abs() <= MATCH_TIE_TOL && !same_pairs(a, b, q, n, &perms[best], p)
    });
    Matching {
        perm: perms[best].clone(),
        cost_sq: costs[best],
        ambiguous,
    }
}

/// Whether two pairings induce the same multiset of (a_i, b_σ(i)) pairs.
fn same_pairs(a: &[f64], b: &[f64], q: usize, n: usize, p1: &[usize], p2: &[usize]) -> bool {
    let pairs = |p: &[usize]| {
        let mut v: Vec<Vec<f64>> = (0..q)
            .map(|i| {
                let mut row = a[i * n..(i + 1) * n].to_vec();
                row.extend_from_slice(&b[p[i] * n..(p[i] + 1) * n]);
                row
            })
            .collect();
        v.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        v
    };
    let (x, y) = (pairs(p1), pairs(p2));
    x.iter().zip(&y).all(|(r, s)| {
        r.iter()
            .zip(s)
            .all(|(u, v)| (u - v).abs() <= 1e-12 * (1.0 + u.abs().max(v.abs())))
    })
}

/// Minimum-cost assignment on a square cost matrix (shortest augmenting
/// paths with potentials). Returns `perm` with row `i` assigned to `perm[i]`.
pub fn hungarian(cost: &[f64], q: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; q + 1];
    let mut v = vec![0.0; q + 1];
    let mut p = vec![0usize; q + 1];
    let mut way = vec![0usize; q + 1];
    for i in 1..=q {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; q + 1];
        let mut used = vec![false; q + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=q {
                if !used[j] {
                    let cur = cost[(i0 - 1) * q + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=q {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; q];
    for j in 1..=q {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// Mean of the Q entries, `η∘a`.
pub fn eta_average(a: &QPoint) -> Vec<f64> {
    let mut c = vec![0.0; a.n];
    for i in 0..a.q {
        for (ck, v) in c.iter_mut().zip(a.point(i)) {
            *ck += v;
        }
    }
    c.iter_mut().for_each(|x| *x /= a.q as f64);
    c
}

/// Cell-centered lattice over a closed disk `B_r(0) ⊂ R^m`.
///
/// Node `k ∈ Z^m` sits at `(k + ½)h`; nodes are kept when their cell meets
/// the disk and carry the cell's area fraction inside the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskGrid {
    m: usize,
    h: f64,
    r: f64,
    coords: Vec<i64>,
    frac: Vec<f64>,
    lookup: HashMap<Vec<i64>, usize>,
}

const SUPERSAMPLE: usize = 16;

impl DiskGrid {
    pub fn new(m: usize, h: f64, r: f64) -> Result<Self> {
        if m == 0 {
            return Err(invalid("grid dimension must be positive"));
        }
        if !(h > 0.0 && r > 0.0) {
            return Err(invalid("grid spacing and radius must be positive"));
        }
        let kmax = (r / h).ceil() as i64;
        let mut coords = Vec::new();
        let mut frac = Vec::new();
        let mut k = vec![-kmax; m];
        loop {
            let f = cell_fraction(&k, h, r);
            if f > 0.0 {
                coords.extend_from_slice(&k);
                frac.push(f);
            }
            // lexicographic increment, last axis fastest
            let mut ax = m;
            loop {
                if ax == 0 {
                    break;
                }
                ax -= 1;
                k[ax] += 1;
                if k[ax] < kmax {
                    break;
                }
                k[ax] = -kmax;
                if ax == 0 {
                    ax = usize::MAX;
                    break;
                }
            }
            if ax == usize::MAX {
                break;
            }
        }
        let lookup = coords
            .chunks(m)
            .enumerate()
            .map(|(i, c)| (c.to_vec(), i))
            .collect();
        Ok(Self {
            m,
            h,
            r,
            coords,
            frac,
            lookup,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn len(&self) -> usize {
        self.frac.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frac.is_empty()
    }

    pub fn coord(&self, i: usize) -> &[i64] {
        &self.coords[i * self.m..(i + 1) * self.m]
    }

    pub fn position(&self, i: usize) -> Vec<f64> {
        self.coord(i)
            .iter()
            .map(|&k| (k as f64 + 0.5) * self.h)
            .collect()
    }

    /// Fraction of node `i`'s cell inside the disk.
    pub fn fraction(&self, i: usize) -> f64 {
        self.frac[i]
    }

    /// Area of node `i`'s cell inside the disk.
    pub fn cell_measure(&self, i: usize) -> f64 {
        self.frac[i] * self.h.powi(self.m as i32)
    }

    pub fn index_of(&self, k: &[i64]) -> Option<usize> {
        self.lookup.get(k).copied()
    }

    /// Total measured area; approximates `ω_m r^m`.
    pub fn total_measure(&self) -> f64 {
        (0..self.len()).map(|i| self.cell_measure(i)).sum()
    }
}

fn cell_fraction(k: &[i64], h: f64, r: f64) -> f64 {
    let mut near = 0.0;
    let mut far = 0.0;
    for &ki in k {
        let lo = ki as f64 * h;
        let hi = lo + h;
        let n = if lo > 0.0 {
            lo
        } else if hi < 0.0 {
            -hi
        } else {
            0.0
        };
        let f = lo.abs().max(hi.abs());
        near += n * n;
        far += f * f;
    }
    let r2 = r * r;
    if far <= r2 {
        return 1.0;
    }
    if near > r2 {
        return 0.0;
    }
    let m = k.len();
    let total = SUPERSAMPLE.pow(m as u32);
    let mut inside = 0usize;
    let mut idx = vec![0usize; m];
    for _ in 0..total {
        let d2: f64 = k
            .iter()
            .zip(&idx)
            .map(|(&ki, &s)| {
                let x = (ki as f64 + (s as f64 + 0.5) / SUPERSAMPLE as f64) * h;
                x * x
            })
            .sum();
        if d2 <= r2 {
            inside += 1;
        }
        for ax in (0..m).rev() {
            idx[ax] += 1;
            if idx[ax] < SUPERSAMPLE {
                break;
            }
            idx[ax] = 0;
        }
    }
    inside as f64 / total as f64
}

/// A Q-valued function sampled on a [`DiskGrid`], with matched
/// finite-difference derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct QGridFunction {
    grid: DiskGrid,
    n: usize,
    q: usize,
    values: Vec<f64>,
    /// Per node: `Q` blocks of `n × m`, row-major.
    deriv: Vec<f64>,
    branching: Vec<bool>,
}

impl QGridFunction {
    /// Samples `f` at every node of `grid`.
    pub fn from_fn<F>(grid: DiskGrid, q: usize, n: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> QPoint + Sync,
    {
        let vals: Vec<QPoint> = (0..grid.len())
            .into_par_iter()
            .map(|i| f(&grid.position(i)))
            .collect();
        let mut values = Vec::with_capacity(grid.len() * q * n);
        for v in &vals {
            if v.q != q || v.n != n {
                return Err(invalid("sampled QPoint has the wrong Q or n"));
            }
            values.extend_from_slice(&v.pts);
        }
        Self::from_values(grid, q, n, values)
    }

    /// Wraps node values (row-major: node, sheet, component).
    pub fn from_values(grid: DiskGrid, q: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        if q == 0 || n == 0 {
            return Err(invalid("Q and n must be positive"));
        }
        if values.len() != grid.len() * q * n {
            return Err(Error::DimensionMismatch {
                what: "grid values",
                expected: grid.len() * q * n,
                found: values.len(),
            });
        }
        let mut f = Self {
            grid,
            n,
            q,
            values,
            deriv: Vec::new(),
            branching: Vec::new(),
        };
        f.compute_derivatives();
        Ok(f)
    }

    fn compute_derivatives(&mut self) {
        let (m, n, q, h) = (self.grid.m, self.n, self.q, self.grid.h);
        let block = q * n * m;
        let results: Vec<(Vec<f64>, bool)> = (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let mut d = vec![0.0; block];
                let mut branching = false;
                let here = self.node_values(i);
                let mut k = self.grid.coord(i).to_vec();
                for ax in 0..m {
                    let mut ends: [Option<Vec<f64>>; 2] = [None, None];
                    for (side, step) in [(0usize, 1i64), (1, -1)] {
                        k[ax] += step;
                        if let Some(j) = self.grid.index_of(&k) {
                            let there = self.node_values(j);
                            let mt = match_slices(here, there, q, n);
                            if mt.ambiguous {
                                branching = true;
                            }
                            let mut aligned = Vec::with_capacity(q * n);
                            for &p in &mt.perm {
                                aligned.extend_from_slice(&there[p * n..(p + 1) * n]);
                            }
                            ends[side] = Some(aligned);
                        }
                        k[ax] -= step;
                    }
                    let (fwd, bwd, span) = match (&ends[0], &ends[1]) {
                        (Some(f), Some(b)) => (f.as_slice(), b.as_slice(), 2.0 * h),
                        (Some(f), None) => (f.as_slice(), here, h),
                        (None, Some(b)) => (here, b.as_slice(), h),
                        (None, None) => continue,
                    };
                    for s in 0..q {
                        for c in 0..n {
                            let idx = s * n + c;
                            d[s * n * m + c * m + ax] = (fwd[idx] - bwd[idx]) / span;
                        }
                    }
                }
                if branching {
                    d.iter_mut().for_each(|x| *x = 0.0);
                }
                (d, branching)
            })
            .collect();
        self.deriv = Vec::with_capacity(self.grid.len() * block);
        self.branching = Vec::with_capacity(self.grid.len());
        for (d, b) in results {
            self.deriv.extend(d);
            self.branching.push(b);
        }
    }

    pub fn grid(&self) -> &DiskGrid {
        &self.grid
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.grid.m
    }

    pub fn node_values(&self, i: usize) -> &[f64] {
        let s = self.q * self.n;
        &self.values[i * s..(i + 1) * s]
    }

    pub fn value(&self, i: usize) -> QPoint {
        QPoint {
            q: self.q,
            n: self.n,
            pts: self.node_values(i).to_vec(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `Df_i` at node `node` as an `n × m` row-major block.
    pub fn derivative(&self, node: usize, sheet: usize) -> &[f64] {
        let (m, n) = (self.grid.m, self.n);
        let off = node * self.q * n * m + sheet * n * m;
        &self.deriv[off..off + n * m]
    }

    pub fn is_branching(&self, node: usize) -> bool {
        self.branching[node]
    }

    pub fn branching_count(&self) -> usize {
        self.branching.iter().filter(|b| **b).count()
    }

    /// `|Df|²(x) = Σ_i |Df_i(x)|²` at a node.
    pub fn gradient_sq(&self, node: usize) -> f64 {
        let (m, n) = (self.grid.m, self.n);
        let off = node * self.q * n * m;
        self.deriv[off..off + self.q * n * m].iter().map(|x| x * x).sum()
    }

    /// `η∘f` as a single-valued node array (node-major, n components).
    pub fn eta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.len() * self.n);
        for i in 0..self.grid.len() {
            out.extend(eta_average(&self.value(i)));
        }
        out
    }

    /// Writes the text form: header `qgrid 1 m n Q h r`, then per node the
    /// lattice coordinates followed by the `Q·n` value entries.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "qgrid 1 {} {} {} {:.17e} {:.17e}",
            self.grid.m, self.n, self.q, self.grid.h, self.grid.r
        )?;
        for i in 0..self.grid.len() {
            let mut line = String::new();
            for k in self.grid.coord(i) {
                line.push_str(&format!("{k} "));
            }
            let vals: Vec<String> = self.node_values(i).iter().map(|v| format!("{v:.17e}")).collect();
            line.push_str(&vals.join(" "));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads the text form written by [`write_text`](Self::write_text).
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty input".into(),
        })?;
        let header = header?;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.len() != 7 || tok[0] != "qgrid" || tok[1] != "1" {
            return Err(Error::Parse {
                line: 1,
                message: "expected `qgrid 1 m n Q h r`".into(),
            });
        }
        let pu = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })
        };
        let pf = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })
        };
        let (m, n, q, h, rad) = (pu(tok[2])?, pu(tok[3])?, pu(tok[4])?, pf(tok[5])?, pf(tok[6])?);
        let grid = DiskGrid::new(m, h, rad)?;
        let mut values = vec![f64::NAN; grid.len() * q * n];
        let mut seen = vec![false; grid.len()];
        for (ln, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                line: ln + 1,
                message: msg,
            };
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != m + q * n {
                return Err(perr(format!("expected {} fields, found {}", m + q * n, tok.len())));
            }
            let k: Vec<i64> = tok[..m]
                .iter()
                .map(|s| s.parse::<i64>().map_err(|e| perr(e.to_string())))
                .collect::<Result<_>>()?;
            let idx = grid
                .index_of(&k)
                .ok_or_else(|| perr(format!("node {k:?} is outside the disk")))?;
            for (t, s) in tok[m..].iter().enumerate() {
                values[idx * q * n + t] = s.parse::<f64>().map_err(|e| perr(e.to_string()))?;
            }
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parse {
                line: 0,
                message: format!("node {:?} has no value", grid.coord(missing)),
            });
        }
        Self::from_values(grid, q, n, values)
    }
}

/// `Σ_nodes |B ∩ cell| · Σ_i |Df_i|²`, branching nodes excluded.
pub fn dirichlet_energy(f: &QGridFunction) -> f64 {
    q_energy(f, 2.0)
}

/// `∫ |Df|^p` with `|Df|² = Σ_i |Df_i|²`.
pub fn q_energy(f: &QGridFunction, p: f64) -> f64 {
    q_energy_masked(f, p, None)
}

pub fn q_energy_masked(f: &QGridFunction, p: f64, mask: Option<&[bool]>) -> f64 {
    let terms: Vec<f64> = (0..f.grid.len())
        .into_par_iter()
        .map(|i| {
            if f.branching[i] || mask.is_some_and(|m| !m[i]) {
                return 0.0;
            }
            let g2 = f.gradient_sq(i);
            let g = if p == 2.0 { g2 } else { g2.powf(p / 2.0) };
            g * f.grid.cell_measure(i)
        })
        .collect();
    terms.iter().sum()
}

/// `∫ Σ_i ∇φ·Df_i`, one entry per target component.
pub fn weak_laplacian_pairing(f: &QGridFunction, phi: &dyn TestFunction) -> Result<Vec<f64>> {
    let m = f.grid.m;
    if phi.dim() != m {
        return Err(Error::DimensionMismatch {
            what: "test function domain",
            expected: m,
            found: phi.dim(),
        });
    }
    let (c, rho) = phi.support();
    let reach = c.iter().map(|x| x * x).sum::<f64>().sqrt() + rho;
    if reach >= f.grid.r - f.grid.h {
        return Err(Error::NotCompactlySupported(format!(
            "support reaches radius {reach}, disk radius {}",
            f.grid.r
        )));
    }
    let n = f.n;
    let terms: Vec<Vec<f64>> = (0..f.grid.len())
        .into_par_iter()
        .map(|i| {
            let mut out = vec![0.0; n];
            if f.branching[i] {
                return out;
            }
            let x = f.grid.position(i);
            let mut g = vec![0.0; m];
            phi.gradient(&x, &mut g);
            if g.iter().all(|v| *v == 0.0) {
                return out;
            }
            let w = f.grid.cell_measure(i);
            for s in 0..f.q {
                let d = f.derivative(i, s);
                for (comp, o) in out.iter_mut().enumerate() {
                    let dot: f64 = (0..m).map(|a| g[a] * d[comp * m + a]).sum();
                    *o += w * dot;
                }
            }
            out
        })
        .collect();
    let mut total = vec![0.0; n];
    for t in terms {
        for (a, b) in total.iter_mut().zip(t) {
            *a += b;
        }
    }
    Ok(total)
}

/// Max of `G(f(x₁), f(x₂)) / |x₁ − x₂|` over node pairs whose lattice
/// offset has sup-norm at most `stencil`.
pub fn lipschitz_constant(f: &QGridFunction, stencil: usize) -> f64 {
    lipschitz_constant_masked(f, stencil, None)
}

pub fn lipschitz_constant_masked(f: &QGridFunction, stencil: usize, mask: Option<&[bool]>) -> f64 {
    let m = f.grid.m;
    let s = stencil as i64;
    let offsets: Vec<Vec<i64>> = {
        let mut out = Vec::new();
        let mut o = vec![-s; m];
        loop {
            // half-space: keep offsets lexicographically positive
            if o.iter().find(|v| **v != 0).is_some_and(|v| *v > 0) {
                out.push(o.clone());
            }
            let mut ax = m;
            let mut done = true;
            while ax > 0 {
                ax -= 1;
                o[ax] += 1;
                if o[ax] <= s {
                    done = false;
                    break;
                }
                o[ax] = -s;
            }
            if done {
                break;
            }
        }
        out
    };
    let (q, n, h) = (f.q, f.n, f.grid.h);
    (0..f.grid.len())
        .into_par_iter()
        .map(|i| {
            if mask.is_some_and(|mk| !mk[i]) {
                return 0.0;
            }
            let k = f.grid.coord(i);
            let mut best: f64 = 0.0;
            let mut kk = k.to_vec();
            for o in &offsets {
                for a in 0..m {
                    kk[a] = k[a] + o[a];
                }
                let Some(j) = f.grid.index_of(&kk) else { continue };
                if mask.is_some_and(|mk| !mk[j]) {
                    continue;
                }
                let dist = h * o.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
                let g = match_slices(f.node_values(i), f.node_values(j), q, n).cost_sq.sqrt();
                best = best.max(g / dist);
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

/// `ω_m r^m`, the exact measure of the grid's disk.
pub fn disk_measure(grid: &DiskGrid) -> f64 {
    omega(grid.m) * grid.r.powi(grid.m as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testfn::RadialBump;
    use proptest::prelude::*;

    fn qp(q: usize, n: usize, v: &[f64]) -> QPoint {
        QPoint::new(q, n, v.to_vec()).unwrap()
    }

    fn brute_g(a: &QPoint, b: &QPoint) -> f64 {
        permutations(a.q())
            .iter()
            .map(|p| (0..a.q()).map(|i| sqdist(a.point(i), b.point(p[i]))).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    #[test]
    fn metric_examples() {
        let a = QPoint::constant(2, &[0.0, 0.0]);
        let b = qp(2, 2, &[3.0, 4.0, 0.0, 0.0]);
        assert!((g_metric(&a, &b).unwrap() - 5.0).abs() < 1e-15);
        assert_eq!(g_metric(&b, &b).unwrap(), 0.0);
        assert_eq!(g_metric(&qp(2, 1, &[0.0, 1.0]), &qp(2, 1, &[1.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn metric_rejects_mismatched_q() {
        let a = QPoint::constant(2, &[0.0]);
        let b = QPoint::constant(3, &[0.0]);
        assert!(matches!(g_metric(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn eta_examples() {
        assert_eq!(eta_average(&qp(2, 1, &[1.0, 3.0])), vec![2.0]);
        assert_eq!(eta_average(&QPoint::constant(4, &[1.5, -2.0])), vec![1.5, -2.0]);
        let c = eta_average(&qp(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]));
        assert!(c.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn hungarian_agrees_with_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for q in [2usize, 3, 5, 6] {
            for _ in 0..50 {
                let cost: Vec<f64> = (0..q * q).map(|_| rng.gen::<f64>()).collect();
                let perm = hungarian(&cost, q);
                let h: f64 = (0..q).map(|i| cost[i * q + perm[i]]).sum();
                let b = permutations(q)
                    .iter()
                    .map(|p| (0..q).map(|i| cost[i * q + p[i]]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!((h - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_q_uses_assignment() {
        let a = QPoint::new(8, 1, (0..8).map(|i| i as f64).collect()).unwrap();
        let b = QPoint::new(8, 1, (0..8).rev().map(|i| i as f64 + 0.5).collect()).unwrap();
        assert!((g_metric(&a, &b).unwrap() - (8.0f64 * 0.25).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ties_between_distinct_pairings_are_ambiguous() {
        // a = {−1, 1}, b = {0, 0}: unique pairs multiset, not ambiguous
        let m = optimal_matching(&qp(2, 1, &[-1.0, 1.0]), &qp(2, 1, &[0.0, 0.0])).unwrap();
        assert!(!m.ambiguous);
        // square corners against the perpendicular pair: two distinct optima
        let a = qp(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let b = qp(2, 2, &[0.0, 1.0, 0.0, -1.0]);
        assert!(optimal_matching(&a, &b).unwrap().ambiguous);
    }

    #[test]
    fn grid_area_fraction_is_accurate() {
        let g = DiskGrid::new(2, 1.0 / 64.0, 1.0).unwrap();
        let rel = (g.total_measure() - std::f64::consts::PI).abs() / std::f64::consts::PI;
        assert!(rel < 1e-4, "rel {rel}");
        let g = DiskGrid::new(1, 0.1, 1.0).unwrap();
        assert!((g.total_measure() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_energy_of_linear_maps() {
        let h = 1.0 / 64.0;
        let g = DiskGrid::new(2, h, 1.0).unwrap();
        let a = [0.3, -0.4];
        let f1 = QGridFunction::from_fn(g.clone(), 1, 1, |x| {
            QPoint::constant(1, &[a[0] * x[0] + a[1] * x[1]])
        })
        .unwrap();
        let exact = 0.25 * std::f64::consts::PI;
        assert!((dirichlet_energy(&f1) - exact).abs() / exact < 0.02);
        let f2 = QGridFunction::from_fn(g.clone(), 2, 1, |x| {
            let u = a[0] * x[0] + a[1] * x[1];
            qp(2, 1, &[u, -u])
        })
        .unwrap();
        assert!((dirichlet_energy(&f2) - 2.0 * exact).abs() / (2.0 * exact) < 0.02);
        let c = QGridFunction::from_fn(g, 3, 2, |_| qp(3, 2, &[1.0, 2.0, 0.0, 0.0, -1.0, 4.0])).unwrap();
        assert_eq!(dirichlet_energy(&c), 0.0);
    }

    #[test]
    fn energy_invariant_under_relabeling_and_translation() {
        let g = DiskGrid::new(2, 1.0 / 32.0, 1.0).unwrap();
        let sheets = |x: &[f64]| [x[0] * 0.4, -x[1] * 0.2 + 0.5, x[0] * x[1]];
        let base = QGridFunction::from_fn(g.clone(), 3, 1, |x| qp(3, 1, &sheets(x))).unwrap();
        let relabeled = QGridFunction::from_fn(g.clone(), 3, 1, |x| {
            let s = sheets(x);
            let k = ((x[0] * 97.0).abs() as usize) % 3;
            qp(3, 1, &[s[k], s[(k + 1) % 3], s[(k + 2) % 3]])
        })
        .unwrap();
        let shifted = QGridFunction::from_fn(g, 3, 1, |x| {
            let s = sheets(x);
            qp(3, 1, &[s[0] + 7.0, s[1] + 7.0, s[2] + 7.0])
        })
        .unwrap();
        let e = dirichlet_energy(&base);
        assert!((dirichlet_energy(&relabeled) - e).abs() < 1e-12 * e);
        assert!((dirichlet_energy(&shifted) - e).abs() < 1e-10 * e);
    }

    #[test]
    fn pairing_with_paraboloid_matches_integration_by_parts() {
        let h = 1.0 / 128.0;
        let g = DiskGrid::new(2, h, 1.0).unwrap();
        let f = QGridFunction::from_fn(g.clone(), 1, 1, |x| QPoint::constant(1, &[x[0] * x[0] + x[1] * x[1]])).unwrap();
        let phi = RadialBump::new(vec![0.0, 0.0], 0.6);
        let lhs = weak_laplacian_pairing(&f, &phi).unwrap()[0];
        // oracle: −Δu = −4, so the pairing equals −4∫φ (fine quadrature)
        let int_phi = crate::numerics::integrate(
            |r| 2.0 * std::f64::consts::PI * r * phi.value(&[r, 0.0]),
            0.0,
            0.6,
            1e-12,
        );
        let oracle = -4.0 * int_phi;
        assert!((lhs - oracle).abs() / oracle.abs() < 0.02, "{lhs} vs {oracle}");
    }

    #[test]
    fn pairing_with_harmonic_function_vanishes_with_refinement() {
        let phi = RadialBump::new(vec![0.1, 0.05], 0.5);
        let mut res = Vec::new();
        for h in [1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0] {
            let g = DiskGrid::new(2, h, 1.0).unwrap();
            let f = QGridFunction::from_fn(g, 1, 1, |x| QPoint::constant(1, &[x[0] * x[0] - x[1] * x[1]])).unwrap();
            res.push(weak_laplacian_pairing(&f, &phi).unwrap()[0].abs());
        }
        assert!(res.iter().all(|r| *r < 1e-3), "{res:?}");
    }

    #[test]
    fn pairing_rejects_support_at_boundary() {
        let g = DiskGrid::new(2, 0.1, 1.0).unwrap();
        let f = QGridFunction::from_fn(g, 1, 1, |_| QPoint::constant(1, &[0.0])).unwrap();
        let phi = RadialBump::new(vec![0.5, 0.0], 0.6);
        assert!(matches!(weak_laplacian_pairing(&f, &phi), Err(Error::NotCompactlySupported(_))));
    }

    #[test]
    fn lipschitz_of_linear_maps() {
        let g = DiskGrid::new(2, 1.0 / 64.0, 1.0).unwrap();
        let f = QGridFunction::from_fn(g.clone(), 1, 1, |x| QPoint::constant(1, &[0.3 * x[0] - 0.4 * x[1]])).unwrap();
        let lip = lipschitz_constant(&f, 2);
        assert!((lip - 0.5).abs() / 0.5 < 0.05, "{lip}");
        let c = 0.2;
        let f2 = QGridFunction::from_fn(g.clone(), 2, 1, |x| qp(2, 1, &[c * x[0], -c * x[0]])).unwrap();
        let lip2 = lipschitz_constant(&f2, 2);
        // matched sheets move at √2·c; regression value
        assert!((lip2 - std::f64::consts::SQRT_2 * c).abs() < 1e-12, "{lip2}");
        let z = QGridFunction::from_fn(g, 2, 1, |_| qp(2, 1, &[1.0, 2.0])).unwrap();
        assert_eq!(lipschitz_constant(&z, 2), 0.0);
    }

    #[test]
    fn text_round_trip() {
        let g = DiskGrid::new(2, 0.25, 1.0).unwrap();
        let f = QGridFunction::from_fn(g, 2, 2, |x| qp(2, 2, &[x[0], 0.1, -x[1], 1.0 / 3.0])).unwrap();
        let mut buf = Vec::new();
        f.write_text(&mut buf).unwrap();
        let back = QGridFunction::read_text(&buf[..]).unwrap();
        assert_eq!(back, f);
    }

    fn qpoint_strategy(q: usize, n: usize) -> impl Strategy<Value = QPoint> {
        prop::collection::vec(-5.0f64..5.0, q * n).prop_map(move |v| QPoint::new(q, n, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metric_is_permutation_invariant(a in qpoint_strategy(4, 2), b in qpoint_strategy(4, 2), seed in 0usize..24) {
            let perm = &permutations(4)[seed];
            let d = g_metric(&a, &b).unwrap();
            prop_assert!((g_metric(&a.permuted(perm), &b).unwrap() - d).abs() < 1e-12);
            prop_assert!((g_metric(&a, &b.permuted(perm)).unwrap() - d).abs() < 1e-12);
            prop_assert!((d - brute_g(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn variance_identity(a in qpoint_strategy(3, 2)) {
            let mean = eta_average(&a);
            let g = g_metric(&a, &QPoint::constant(3, &mean)).unwrap();
            let var: f64 = (0..3).map(|i| sqdist(a.point(i), &mean)).sum();
            prop_assert!((g * g - var).abs() < 1e-12 * (1.0 + var));
        }

        #[test]
        fn mean_minimizes_squared_spread(a in qpoint_strategy(3, 1), c in -5.0f64..5.0) {
            let mean = eta_average(&a)[0];
            let spread = |c: f64| (0..3).map(|i| (a.point(i)[0] - c).powi(2)).sum::<f64>();
            prop_assert!(spread(mean) <= spread(c) + 1e-12);
        }

        #[test]
        fn pairing_is_linear_in_phi(cx in -0.2f64..0.2, r1 in 0.2f64..0.5, r2 in 0.2f64..0.5, s in -2.0f64..2.0) {
            let g = DiskGrid::new(2, 1.0 / 16.0, 1.0).unwrap();
            let f = QGridFunction::from_fn(g, 2, 1, |x| qp(2, 1, &[x[0] * x[1], x[0] - 0.3])).unwrap();
            let p1 = RadialBump::new(vec![cx, 0.0], r1);
            let p2 = RadialBump::new(vec![0.0, cx], r2);
            let sum = crate::testfn::TestSum::new(vec![(1.0, &p1), (s, &p2)]);
            let a = weak_laplacian_pairing(&f, &p1).unwrap()[0];
            let b = weak_laplacian_pairing(&f, &p2).unwrap()[0];
            let c = weak_laplacian_pairing(&f, &sum).unwrap()[0];
            prop_assert!((c - (a + s * b)).abs() < 1e-12 * (1.0 + a.abs() + b.abs()));
        }
    }
}
