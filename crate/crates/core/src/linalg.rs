//! Dense symmetric linear algebra used by every curvature estimator.
//!
//! Matrices here are small (at most a few hundred rows), so everything is
//! stored densely and factorized with nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Relative tolerance below which a negative eigenvalue is treated as a
/// genuine loss of semidefiniteness rather than rounding drift.
pub const NOT_PSD_REL_TOL: f64 = 1e-6;

/// Dense symmetric matrix stored row-major with both triangles present.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix needs dim >= 1");
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * m.dim + i] = d;
        }
        m
    }

    /// Builds from explicit rows, rejecting input that is not symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("empty matrix".into()));
        }
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            check_dim(dim, row.len())?;
            data.extend_from_slice(row);
        }
        let m = Self { dim, data };
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (m.get(i, j), m.get(j, i));
                if (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "entries ({i},{j}) and ({j},{i}) differ: {a} vs {b}"
                    )));
                }
            }
        }
        Ok(m)
    }

    /// Builds from a row-major buffer, averaging the two triangles.
    pub fn from_row_major_symmetrized(dim: usize, data: &[f64]) -> Result<Self> {
        check_dim(dim * dim, data.len())?;
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                out.data[i * dim + j] = 0.5 * (data[i * dim + j] + data[j * dim + i]);
            }
        }
        Ok(out)
    }

    pub fn outer(v: &[f64]) -> Self {
        let mut m = Self::zeros(v.len());
        m.add_outer(v, 1.0);
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets entry (i, j) and its mirror.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.dim + j] = value;
        self.data[j * self.dim + i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// self += weight * v vᵀ
    pub fn add_outer(&mut self, v: &[f64], weight: f64) {
        assert_eq!(v.len(), self.dim);
        for i in 0..self.dim {
            let wi = weight * v[i];
            if wi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.dim..(i + 1) * self.dim];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += wi * vj;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &SymMatrix, weight: f64) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += weight * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn add_diagonal(&mut self, shift: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += shift;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        Ok((0..self.dim).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        Ok(dot(&self.matvec(v)?, v))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.data)
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut vals: Vec<f64> = SymmetricEigen::new(self.to_dmatrix()).eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        vals
    }

    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues().iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Top eigenpairs of a PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    dim: usize,
    eigenvalues: Vec<f64>,
    /// Column `k` is `eigenvectors[k]`.
    eigenvectors: Vec<Vec<f64>>,
}

impl LowRankFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &[Vec<f64>] {
        &self.eigenvectors
    }

    /// U diag(values) Uᵀ
    pub fn reconstruct(&self) -> SymMatrix {
        let mut m = SymMatrix::zeros(self.dim);
        for (val, vec) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            m.add_outer(vec, *val);
        }
        m
    }

    /// Applies `U diag(1/(λ+shift)) Uᵀ + (1/shift)(I − U Uᵀ)` to `v`: the inverse
    /// of the truncation with the discarded subspace carried by `shift` alone.
    pub fn apply_shifted_inverse(&self, shift: f64, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        let full = self.rank() == self.dim;
        if !full && shift <= 0.0 {
            return Err(Error::SingularSystem);
        }
        let mut out = if full { vec![0.0; self.dim] } else { v.iter().map(|x| x / shift).collect() };
        for (val, u) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            let denom = val + shift;
            if denom <= 0.0 {
                return Err(Error::SingularSystem);
            }
            let proj = dot(u, v);
            let coef = proj / denom - if full { 0.0 } else { proj / shift };
            axpy(coef, u, &mut out);
        }
        Ok(out)
    }
}

/// Solves `(A + mu I) x = g` by Cholesky with one step of iterative refinement.
pub fn dampened_solve(a: &SymMatrix, mu: f64, g: &[f64]) -> Result<Vec<f64>> {
    check_dim(a.dim(), g.len())?;
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("dampening must be nonnegative, got {mu}")));
    }
    let mut m = a.to_dmatrix();
    for i in 0..a.dim() {
        m[(i, i)] += mu;
    }
    let chol = m.clone().cholesky().ok_or(Error::SingularSystem)?;
    // Rank-deficient input can survive factorization on roundoff alone.
    let max_diag = (0..a.dim()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let min_pivot = chol.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if a.dim() > 0 && min_pivot <= 1e-13 * max_diag * a.dim() as f64 {
        return Err(Error::SingularSystem);
    }
    let rhs = DVector::from_column_slice(g);
    let mut x = chol.solve(&rhs);
    let resid = &rhs - &m * &x;
    if resid.iter().any(|r| *r != 0.0) {
        x += chol.solve(&resid);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    Ok(x.iter().copied().collect())
}

/// Number of eigenpairs kept for a matrix of dimension `dim`: ceil(K ln dim), at least one.
pub fn truncation_rank(dim: usize, k: f64) -> usize {
    if dim <= 1 {
        return 1;
    }
    let r = (k * (dim as f64).ln()).ceil();
    (r.max(1.0) as usize).min(dim)
}

pub fn low_rank_truncate(m: &SymMatrix, k: f64) -> Result<LowRankFactor> {
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("K must be positive, got {k}")));
    }
    low_rank_truncate_to(m, truncation_rank(m.dim(), k))
}

/// Keeps the `rank` largest eigenpairs of a PSD matrix.
pub fn low_rank_truncate_to(m: &SymMatrix, rank: usize) -> Result<LowRankFactor> {
    if rank == 0 || rank > m.dim() {
        return Err(Error::InvalidArgument(format!("rank {rank} outside 1..={}", m.dim())));
    }
    let eig = SymmetricEigen::new(m.to_dmatrix());
    let mut order: Vec<usize> = (0..m.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let norm = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -NOT_PSD_REL_TOL * norm {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let eigenvalues = order[..rank].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let eigenvectors = order[..rank]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    Ok(LowRankFactor { dim: m.dim(), eigenvalues, eigenvectors })
}

pub fn min_eigenvalue(m: &SymMatrix) -> f64 {
    if m.dim() == 1 {
        return m.get(0, 0);
    }
    *m.eigenvalues().last().expect("dim >= 1")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cyclic Jacobi eigenvalue iteration, kept independent of nalgebra.
    fn jacobi_eigenvalues(m: &SymMatrix) -> Vec<f64> {
        let n = m.dim();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut vals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        vals
    }

    fn mat(rows: &[&[f64]]) -> SymMatrix {
        SymMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn solve_identity_and_pure_dampening() {
        assert_eq!(dampened_solve(&SymMatrix::identity(2), 0.0, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(dampened_solve(&SymMatrix::zeros(2), 0.5, &[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn solve_matches_cramer() {
        // Cramer's rule on [[3,1],[1,3]] x = (3,3).
        let a = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let x = dampened_solve(&a, 1.0, &[3.0, 3.0]).unwrap();
        let det = 3.0 * 3.0 - 1.0;
        let expect = [(3.0 * 3.0 - 1.0 * 3.0) / det, (3.0 * 3.0 - 3.0 * 1.0) / det];
        assert!((x[0] - expect[0]).abs() < 1e-14 && (x[1] - expect[1]).abs() < 1e-14);
        assert!((x[0] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn singular_without_dampening() {
        let a = mat(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(dampened_solve(&a, 0.0, &[1.0, 0.0]), Err(Error::SingularSystem));
        assert_eq!(dampened_solve(&SymMatrix::zeros(3), 0.0, &[1.0, 0.0, 0.0]), Err(Error::SingularSystem));
    }

    #[test]
    fn truncation_rank_rule() {
        assert_eq!(truncation_rank(1, 3.0), 1);
        assert_eq!(truncation_rank(4, 100.0), 4);
        // ceil(2 ln 100) = ceil(9.21) = 10
        assert_eq!(truncation_rank(100, 2.0), 10);
    }

    #[test]
    fn truncate_identity_and_rank_one() {
        let f = low_rank_truncate(&SymMatrix::identity(4), 100.0).unwrap();
        assert_eq!(f.rank(), 4);
        assert!(f.reconstruct().max_abs_diff(&SymMatrix::identity(4)) < 1e-12);

        let m = SymMatrix::outer(&[1.0, 2.0, 2.0]);
        let f = low_rank_truncate_to(&m, 1).unwrap();
        assert!((f.eigenvalues()[0] - 9.0).abs() < 1e-12);
        assert!(f.reconstruct().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn truncate_diagonal_to_two() {
        let m = SymMatrix::from_diagonal(&[4.0, 1.0, 0.01, 0.001]);
        let f = low_rank_truncate_to(&m, 2).unwrap();
        let r = f.reconstruct();
        assert!(r.max_abs_diff(&SymMatrix::from_diagonal(&[4.0, 1.0, 0.0, 0.0])) < 1e-12);
        // Spectral-norm error of the truncation is the third eigenvalue.
        let mut diff = m.clone();
        diff.add_scaled(&r, -1.0).unwrap();
        assert!((diff.spectral_norm() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn truncate_rejects_indefinite() {
        let m = SymMatrix::from_diagonal(&[1.0, -0.5]);
        assert!(matches!(low_rank_truncate(&m, 1.0), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert!((min_eigenvalue(&SymMatrix::identity(3)) - 1.0).abs() < 1e-14);
        assert!((min_eigenvalue(&SymMatrix::from_diagonal(&[2.0, -1.0])) + 1.0).abs() < 1e-14);
        let m = mat(&[&[0.3125, -0.75], &[-0.75, 1.0]]);
        // Characteristic polynomial: t² − 1.3125 t − 0.25 = 0.
        let (tr, det) = (1.3125f64, 0.3125 - 0.5625);
        let root = 0.5 * (tr - (tr * tr - 4.0 * det).sqrt());
        assert!(root < 0.0);
        assert!((min_eigenvalue(&m) - root).abs() < 1e-12);
    }

    #[test]
    fn shifted_inverse_full_rank_matches_dense() {
        let m = mat(&[&[3.0, 1.0, 0.0], &[1.0, 2.0, 0.5], &[0.0, 0.5, 1.0]]);
        let f = low_rank_truncate_to(&m, 3).unwrap();
        let v = [1.0, -2.0, 0.5];
        let a = f.apply_shifted_inverse(0.3, &v).unwrap();
        let b = dampened_solve(&m, 0.3, &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn psd_matrix(dim: usize) -> impl Strategy<Value = SymMatrix> {
            proptest::collection::vec(-2.0f64..2.0, dim * (dim + 1)).prop_map(move |raw| {
                let mut m = SymMatrix::zeros(dim);
                for r in raw.chunks(dim) {
                    m.add_outer(r, 1.0);
                }
                m
            })
        }

        fn sym_matrix(dim: usize) -> impl Strategy<Value = SymMatrix> {
            proptest::collection::vec(-3.0f64..3.0, dim * dim)
                .prop_map(move |raw| SymMatrix::from_row_major_symmetrized(dim, &raw).unwrap())
        }

        proptest! {
            #[test]
            fn solve_residual_is_small(m in (1usize..7).prop_flat_map(psd_matrix), mu in 1e-3f64..10.0, seed in proptest::collection::vec(-5.0f64..5.0, 7)) {
                let g = &seed[..m.dim()];
                let x = dampened_solve(&m, mu, g).unwrap();
                let mut shifted = m.clone();
                shifted.add_diagonal(mu);
                let back = shifted.matvec(&x).unwrap();
                let scale = norm(g) + 1.0;
                for (b, gi) in back.iter().zip(g) {
                    prop_assert!((b - gi).abs() <= 1e-9 * scale);
                }
            }

            #[test]
            fn zero_matrix_solve_is_division(dim in 1usize..6, mu in 1e-3f64..100.0, g in proptest::collection::vec(-5.0f64..5.0, 6)) {
                let x = dampened_solve(&SymMatrix::zeros(dim), mu, &g[..dim]).unwrap();
                for (xi, gi) in x.iter().zip(&g) {
                    prop_assert!((xi - gi / mu).abs() <= 1e-12 * (1.0 + (gi / mu).abs()));
                }
            }

            #[test]
            fn full_rank_truncation_reconstructs(m in (1usize..7).prop_flat_map(psd_matrix)) {
                let f = low_rank_truncate_to(&m, m.dim()).unwrap();
                prop_assert!(f.reconstruct().max_abs_diff(&m) < 1e-8 * (1.0 + m.spectral_norm()));
            }

            #[test]
            fn truncation_is_psd_and_orthonormal(m in (2usize..7).prop_flat_map(psd_matrix), k in 0.2f64..3.0) {
                let f = low_rank_truncate(&m, k).unwrap();
                prop_assert!(min_eigenvalue(&f.reconstruct()) >= -1e-10 * (1.0 + m.spectral_norm()));
                for (a, ua) in f.eigenvectors().iter().enumerate() {
                    for (b, ub) in f.eigenvectors().iter().enumerate() {
                        let want = if a == b { 1.0 } else { 0.0 };
                        prop_assert!((dot(ua, ub) - want).abs() < 1e-8);
                    }
                }
                prop_assert!(f.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
            }

            #[test]
            fn truncation_error_is_next_eigenvalue(m in (3usize..7).prop_flat_map(psd_matrix), rank in 1usize..3) {
                let f = low_rank_truncate_to(&m, rank).unwrap();
                let mut diff = m.clone();
                diff.add_scaled(&f.reconstruct(), -1.0).unwrap();
                let next = m.eigenvalues()[rank];
                prop_assert!((diff.spectral_norm() - next).abs() < 1e-8 * (1.0 + m.spectral_norm()));
            }

            #[test]
            fn min_eigenvalue_matches_jacobi(m in (1usize..7).prop_flat_map(sym_matrix)) {
                let oracle = *jacobi_eigenvalues(&m).last().unwrap();
                let scale = m.spectral_norm().max(1.0);
                prop_assert!((min_eigenvalue(&m) - oracle).abs() <= 1e-8 * scale);
            }
        }
    }
}
