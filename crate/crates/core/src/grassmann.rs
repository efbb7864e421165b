//! Affine m-planes in R^{m+n} represented by orthonormal bases.
//!
//! A plane stores `m` orthonormal row vectors and an offset; the orthogonal
//! projection `P = basisᵀ·basis` is only materialized on demand.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Orthonormality tolerance for plane bases.
pub const ORTHO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPlane {
    dim: usize,
    rank: usize,
    /// Row-major `rank × dim` orthonormal rows.
    basis: Vec<f64>,
    offset: Vec<f64>,
}

impl ProjectionPlane {
    /// Builds a linear plane from orthonormal rows (row-major `rank × dim`).
    pub fn from_orthonormal_rows(rank: usize, dim: usize, basis: Vec<f64>) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(invalid(format!("plane rank {rank} not in 1..={dim}")));
        }
        if basis.len() != rank * dim {
            return Err(Error::DimensionMismatch {
                what: "plane basis",
                expected: rank * dim,
                found: basis.len(),
            });
        }
        let defect = gram_defect(rank, dim, &basis);
        if defect > ORTHO_TOL {
            return Err(invalid(format!(
                "plane basis rows are not orthonormal (Gram defect {defect:e})"
            )));
        }
        Ok(Self {
            dim,
            rank,
            basis,
            offset: vec![0.0; dim],
        })
    }

    /// Orthonormalizes arbitrary spanning rows by modified Gram-Schmidt.
    pub fn from_spanning_rows(rank: usize, dim: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != rank * dim {
            return Err(Error::DimensionMismatch {
                what: "spanning rows",
                expected: rank * dim,
                found: rows.len(),
            });
        }
        let mut basis = rows.to_vec();
        if !orthonormalize_rows(rank, dim, &mut basis) {
            return Err(invalid("spanning rows are linearly dependent"));
        }
        Self::from_orthonormal_rows(rank, dim, basis)
    }

    /// The coordinate plane spanned by the first `m` axes of R^{m+n}.
    pub fn coordinate(m: usize, n: usize) -> Self {
        let dim = m + n;
        let mut basis = vec![0.0; m * dim];
        for k in 0..m {
            basis[k * dim + k] = 1.0;
        }
        Self {
            dim,
            rank: m,
            basis,
            offset: vec![0.0; dim],
        }
    }

    /// Line in R² through the origin at angle `theta` from the first axis.
    pub fn line_2d(theta: f64) -> Self {
        Self {
            dim: 2,
            rank: 1,
            basis: vec![theta.cos(), theta.sin()],
            offset: vec![0.0; 2],
        }
    }

    /// The plane π₀ rotated by `theta` in the (axis `a`, axis `b`) coordinate plane.
    pub fn rotated_coordinate(m: usize, n: usize, a: usize, b: usize, theta: f64) -> Self {
        let mut p = Self::coordinate(m, n);
        let dim = m + n;
        let (c, s) = (theta.cos(), theta.sin());
        for k in 0..m {
            let row = &mut p.basis[k * dim..(k + 1) * dim];
            let (xa, xb) = (row[a], row[b]);
            row[a] = c * xa - s * xb;
            row[b] = s * xa + c * xb;
        }
        p
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "plane offset",
                expected: self.dim,
                found: offset.len(),
            });
        }
        self.offset = offset;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn basis_row(&self, k: usize) -> &[f64] {
        &self.basis[k * self.dim..(k + 1) * self.dim]
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    /// Dense `dim × dim` orthogonal projection onto the linear part.
    pub fn projection_matrix(&self) -> DMatrix<f64> {
        let b = DMatrix::from_row_slice(self.rank, self.dim, &self.basis);
        b.transpose() * b
    }

    /// Orthogonal projection of a vector onto the linear part.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        project_into(&self.basis, self.rank, self.dim, v, &mut out);
        out
    }

    /// Squared distance `|P_self − P_other|²`, computed from the residuals
    /// `b_k − P_other b_k` to avoid cancellation at small tilts.
    pub fn hs_distance_sq(&self, other: &ProjectionPlane) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(hs_sq_rows(&self.basis, self.rank, &other.basis, self.dim))
    }

    fn check_compatible(&self, other: &ProjectionPlane) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                what: "ambient dimension",
                expected: self.dim,
                found: other.dim,
            });
        }
        if self.rank != other.rank {
            return Err(Error::DimensionMismatch {
                what: "plane rank",
                expected: self.rank,
                found: other.rank,
            });
        }
        Ok(())
    }
}

/// Hilbert-Schmidt distance `|P_a − P_b|` between the linear parts.
pub fn hs_distance(a: &ProjectionPlane, b: &ProjectionPlane) -> Result<f64> {
    Ok(a.hs_distance_sq(b)?.max(0.0).sqrt())
}

/// Result of [`best_fit_plane`].
#[derive(Debug, Clone)]
pub struct BestFit {
    pub plane: ProjectionPlane,
    /// Eigenvalues of the input, descending.
    pub eigenvalues: Vec<f64>,
    /// Set when eigenvalues `m` and `m+1` coincide to within 1e-12.
    pub degenerate: bool,
}

/// The rank-`m` plane maximizing `trace(A·P)` for symmetric `A`, i.e. the
/// span of the `m` leading eigenvectors.
///
/// Eigenvectors are sorted by eigenvalue (descending, ties by the
/// lexicographic order of the sign-normalized vectors) and normalized so
/// their first nonzero component is positive.
pub fn best_fit_plane(a: &DMatrix<f64>, m: usize) -> Result<BestFit> {
    let dim = a.nrows();
    if a.ncols() != dim {
        return Err(invalid("best_fit_plane needs a square matrix"));
    }
    if m == 0 || m > dim {
        return Err(invalid(format!("rank {m} not in 1..={dim}")));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..dim)
        .map(|k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            normalize_sign(&mut v);
            (eig.eigenvalues[k], v)
        })
        .collect();
    pairs.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| lex_cmp(&x.1, &y.1))
    });
    // Equal eigenvalues to rounding: reorder lexicographically within the cluster.
    let mut start = 0;
    while start < dim {
        let mut end = start + 1;
        while end < dim && (pairs[start].0 - pairs[end].0).abs() <= 1e-12 {
            end += 1;
        }
        pairs[start..end].sort_by(|x, y| lex_cmp(&x.1, &y.1));
        start = end;
    }
    let degenerate = m < dim && (pairs[m - 1].0 - pairs[m].0).abs() <= 1e-12;
    let mut basis = Vec::with_capacity(m * dim);
    for (_, v) in pairs.iter().take(m) {
        basis.extend_from_slice(v);
    }
    // Re-orthonormalize: eigenvectors are orthonormal only to rounding.
    orthonormalize_rows(m, dim, &mut basis);
    let plane = ProjectionPlane {
        dim,
        rank: m,
        basis,
        offset: vec![0.0; dim],
    };
    Ok(BestFit {
        plane,
        eigenvalues: pairs.iter().map(|p| p.0).collect(),
        degenerate,
    })
}

fn normalize_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-14) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Max deviation of the Gram matrix of `rows` from the identity.
pub(crate) fn gram_defect(rank: usize, dim: usize, rows: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..rank {
        for j in 0..=i {
            let dot: f64 = (0..dim).map(|c| rows[i * dim + c] * rows[j * dim + c]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Modified Gram-Schmidt on row-major rows; false if a row collapses.
pub(crate) fn orthonormalize_rows(rank: usize, dim: usize, rows: &mut [f64]) -> bool {
    for i in 0..rank {
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..dim).map(|c| rows[i * dim + c] * rows[j * dim + c]).sum();
                for c in 0..dim {
                    rows[i * dim + c] -= dot * rows[j * dim + c];
                }
            }
        }
        let norm = (0..dim).map(|c| rows[i * dim + c].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-14 {
            return false;
        }
        for c in 0..dim {
            rows[i * dim + c] /= norm;
        }
    }
    true
}

/// `out = Σ_k (b_k·v) b_k` for row-major orthonormal rows `b`.
#[inline]
pub(crate) fn project_into(basis: &[f64], rank: usize, dim: usize, v: &[f64], out: &mut [f64]) {
    out[..dim].iter_mut().for_each(|x| *x = 0.0);
    for k in 0..rank {
        let row = &basis[k * dim..(k + 1) * dim];
        let c: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        for (o, r) in out.iter_mut().zip(row) {
            *o += c * r;
        }
    }
}

/// `|P_T − P_π|² = 2 Σ_k |t_k − P_π t_k|²` for orthonormal rows `t` (tangent)
/// and `p` (plane), both of rank `rank`.
#[inline]
pub(crate) fn hs_sq_rows(tangent: &[f64], rank: usize, plane: &[f64], dim: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..rank {
        let t = &tangent[k * dim..(k + 1) * dim];
        let mut resid = [0.0f64; 16];
        let resid = if dim <= 16 {
            &mut resid[..dim]
        } else {
            return hs_sq_rows_alloc(tangent, rank, plane, dim);
        };
        resid.copy_from_slice(t);
        for j in 0..rank {
            let p = &plane[j * dim..(j + 1) * dim];
            let c: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            for (r, pv) in resid.iter_mut().zip(p) {
                *r -= c * pv;
            }
        }
        total += resid.iter().map(|x| x * x).sum::<f64>();
    }
    2.0 * total
}

fn hs_sq_rows_alloc(tangent: &[f64], rank: usize, plane: &[f64], dim: usize) -> f64 {
    let mut total = 0.0;
    let mut resid = vec![0.0; dim];
    for k in 0..rank {
        let t = &tangent[k * dim..(k + 1) * dim];
        resid.copy_from_slice(t);
        for j in 0..rank {
            let p = &plane[j * dim..(j + 1) * dim];
            let c: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            for (r, pv) in resid.iter_mut().zip(p) {
                *r -= c * pv;
            }
        }
        total += resid.iter().map(|x| x * x).sum::<f64>();
    }
    2.0 * total
}

/// `|P_T − P_{π₀}|²` for the coordinate plane: twice the squared normal
/// components of the tangent rows.
#[inline]
pub(crate) fn hs_sq_to_coordinate(tangent: &[f64], m: usize, dim: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..m {
        total += tangent[k * dim + m..(k + 1) * dim]
            .iter()
            .map(|x| x * x)
            .sum::<f64>();
    }
    2.0 * total
}

/// Dense `Σ_k t_k t_kᵀ` accumulated into `acc` with a scalar factor.
#[inline]
pub(crate) fn accumulate_projection(tangent: &[f64], rank: usize, dim: usize, scale: f64, acc: &mut DMatrix<f64>) {
    for k in 0..rank {
        let t = &tangent[k * dim..(k + 1) * dim];
        for i in 0..dim {
            let ti = scale * t[i];
            for j in 0..dim {
                acc[(i, j)] += ti * t[j];
            }
        }
    }
}
