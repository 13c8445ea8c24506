//! Dense linear-algebra helpers: Kronecker products, pseudo-inverse,
//! null-space bases, and a blocked Cholesky for large SPD systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Materialized Kronecker product `a ⊗ b`.
///
/// Entry layout: `out[i*r + k, j*s + l] = a[i,j] * b[k,l]` for `a` of shape
/// `p×q` and `b` of shape `r×s`. Row/column indices are "a-outer, b-inner";
/// this is the standard definition and the convention every stacked vector in
/// this crate follows. Only use this for small operands or in tests — the
/// factored form via [`kron_apply`] is the intended hot path.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    let mut out = DMatrix::zeros(p * r, q * s);
    for i in 0..p {
        for j in 0..q {
            let aij = a[(i, j)];
            let mut block = out.view_mut((i * r, j * s), (r, s));
            for l in 0..s {
                for k in 0..r {
                    block[(k, l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Computes `(a ⊗ b) v` without materializing the Kronecker product.
///
/// `v` must have length `q*s`; index `j*s + l` addresses the `(j, l)` entry of
/// the a-outer/b-inner reshape `V` (`q×s`). The result is the row-major
/// flattening of `a · V · bᵀ` and equals `kron(a, b) * v` exactly in exact
/// arithmetic. Cost is `O(p·q·s + p·s·r)` instead of `O(p·q·r·s)`.
pub fn kron_apply(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    if v.len() != q * s {
        return Err(Error::DimensionMismatch(format!(
            "kron_apply: vector length {} does not match {}*{} = {}",
            v.len(),
            q,
            s,
            q * s
        )));
    }
    let vm = DMatrix::from_fn(q, s, |j, l| v[j * s + l]);
    let w = a * vm * b.transpose();
    Ok(DVector::from_fn(p * r, |idx, _| w[(idx / r, idx % r)]))
}

/// Moore–Penrose pseudo-inverse via SVD.
///
/// Singular values at or below `tol` are treated as zero. The default
/// tolerance is `max(m, n) · eps · σ_max`.
pub fn pinv(a: &DMatrix<f64>, tol: Option<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = a.shape();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = tol.unwrap_or(m.max(n) as f64 * f64::EPSILON * smax);
    svd.pseudo_inverse(tol)
        .map_err(|e| Error::Decomposition(format!("pinv: {e}")))
}

/// Orthonormal basis of the null space of `a`, returned as the columns of an
/// `n×k` matrix (`k` may be zero).
///
/// Wide matrices are padded with zero rows to square before the SVD so that
/// the full right factor — including the orthogonal complement of the row
/// space — is available. Directions with singular value at or below `tol`
/// (default `max(m, n) · eps · σ_max`) are selected.
pub fn nullspace_basis(a: &DMatrix<f64>, tol: Option<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = a.shape();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let work = if m < n {
        let mut w = DMatrix::zeros(n, n);
        w.view_mut((0, 0), (m, n)).copy_from(a);
        w
    } else {
        a.clone()
    };
    let svd = work.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Decomposition("nullspace_basis: SVD did not return V".into()))?;
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = tol.unwrap_or(m.max(n) as f64 * f64::EPSILON * smax);
    let null_rows: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    let mut basis = DMatrix::zeros(n, null_rows.len());
    for (c, &row) in null_rows.iter().enumerate() {
        for j in 0..n {
            basis[(j, c)] = v_t[(row, j)];
        }
    }
    Ok(basis)
}

// --- blocked Cholesky -------------------------------------------------------

/// Panel width for the right-looking blocked factorization. At the sizes used
/// by the benchmarks (up to 10000) this keeps most flops inside matrix-matrix
/// products.
const CHOL_BLOCK: usize = 128;

/// Relative pivot floor: a pivot `d ≤ 1e-12 · mean(diag)` aborts the
/// factorization rather than producing a garbage factor.
const CHOL_PIVOT_REL: f64 = 1e-12;

/// Factors `m` in place into its lower Cholesky factor. On failure returns the
/// (global) pivot index and offending diagonal value. The strict upper
/// triangle is left untouched; callers zero it if they need a clean `L`.
fn blocked_cholesky_in_place(m: &mut DMatrix<f64>) -> std::result::Result<(), (usize, f64)> {
    let n = m.nrows();
    if n == 0 {
        return Ok(());
    }
    let mean_diag = (0..n).map(|i| m[(i, i)].abs()).sum::<f64>() / n as f64;
    let tol_piv = CHOL_PIVOT_REL * mean_diag.max(f64::MIN_POSITIVE);

    let mut k0 = 0;
    while k0 < n {
        let kb = CHOL_BLOCK.min(n - k0);
        // Panel factorization: columns k0..k0+kb over rows k0..n, column-wise
        // axpy updates so the inner loops run over contiguous slices.
        {
            let data = m.as_mut_slice();
            for j in k0..k0 + kb {
                let prev: Vec<f64> = (k0..j).map(|t| data[t * n + j]).collect();
                for (t, &ljt) in (k0..j).zip(prev.iter()) {
                    let (lo, hi) = data.split_at_mut(j * n);
                    let src = &lo[t * n + j..t * n + n];
                    let dst = &mut hi[j..n];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d -= ljt * s;
                    }
                }
                let d = data[j * n + j];
                if !(d > tol_piv) {
                    return Err((j, d));
                }
                let l = d.sqrt();
                data[j * n + j] = l;
                let inv = 1.0 / l;
                for v in data[j * n + j + 1..j * n + n].iter_mut() {
                    *v *= inv;
                }
            }
        }
        let below = n - k0 - kb;
        if below > 0 {
            // Trailing update A22 -= L21·L21ᵀ, lower-triangle block panels only.
            let l21 = m.view((k0 + kb, k0), (below, kb)).clone_owned();
            let mut c0 = k0 + kb;
            while c0 < n {
                let cb = CHOL_BLOCK.min(n - c0);
                let off = c0 - (k0 + kb);
                let rhs_t = l21.rows(off, cb).transpose();
                let lhs = l21.rows(off, below - off);
                m.view_mut((c0, c0), (below - off, cb))
                    .gemm(-1.0, &lhs, &rhs_t, 1.0);
                c0 += cb;
            }
        }
        k0 += kb;
    }
    Ok(())
}

/// Cholesky factorization of `source + jitter·I` for a symmetric
/// positive-definite `source`.
///
/// The source matrix is kept so the factorization object fully describes the
/// system it solves; `factor() * factor().transpose() == source + jitter·I`
/// up to rounding. Failures report the offending pivot and, for matrices
/// small enough to afford it, a smallest-eigenvalue estimate of the jittered
/// matrix.
#[derive(Clone, Debug)]
pub struct SpdFactorization {
    source: DMatrix<f64>,
    factor: DMatrix<f64>,
    jitter: f64,
}

/// Eigenvalue estimates on failure are only computed up to this size.
const MIN_EIG_REPORT_LIMIT: usize = 2048;

impl SpdFactorization {
    pub fn new(source: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        if source.nrows() != source.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "SpdFactorization: matrix is {}×{}, expected square",
                source.nrows(),
                source.ncols()
            )));
        }
        if !jitter.is_finite() || jitter < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "SpdFactorization: jitter must be finite and nonnegative, got {jitter}"
            )));
        }
        let n = source.nrows();
        let mut work = source.clone();
        for i in 0..n {
            work[(i, i)] += jitter;
        }
        if let Err((index, value)) = blocked_cholesky_in_place(&mut work) {
            let min_eig = if n <= MIN_EIG_REPORT_LIMIT {
                let mut jittered = source.clone();
                for i in 0..n {
                    jittered[(i, i)] += jitter;
                }
                Some(jittered.symmetric_eigen().eigenvalues.min())
            } else {
                None
            };
            return Err(Error::FactorizationFailed {
                index,
                value,
                min_eig,
            });
        }
        // Clean strict upper triangle so `factor()` is a proper L.
        for j in 1..n {
            for i in 0..j {
                work[(i, j)] = 0.0;
            }
        }
        Ok(Self {
            source: source.clone(),
            factor: work,
            jitter,
        })
    }

    pub fn n(&self) -> usize {
        self.source.nrows()
    }

    pub fn source(&self) -> &DMatrix<f64> {
        &self.source
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Jittered matrix this factorization actually represents.
    pub fn jittered(&self) -> DMatrix<f64> {
        let mut m = self.source.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += self.jitter;
        }
        m
    }

    fn solve_slice(&self, x: &mut [f64]) {
        let n = self.n();
        let l = self.factor.as_slice();
        // forward: L y = b
        for j in 0..n {
            let xj = x[j] / l[j * n + j];
            x[j] = xj;
            let col = &l[j * n + j + 1..j * n + n];
            let (_, tail) = x.split_at_mut(j + 1);
            for (xi, lij) in tail.iter_mut().zip(col.iter()) {
                *xi -= lij * xj;
            }
        }
        // backward: Lᵀ x = y
        for j in (0..n).rev() {
            let col = &l[j * n + j + 1..j * n + n];
            let mut dot = 0.0;
            for (xi, lij) in x[j + 1..n].iter().zip(col.iter()) {
                dot += lij * xi;
            }
            x[j] = (x[j] - dot) / l[j * n + j];
        }
    }

    /// Solves `(source + jitter·I) x = b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "solve_vec: rhs length {} does not match system size {}",
                b.len(),
                self.n()
            )));
        }
        let mut x = b.clone();
        self.solve_slice(x.as_mut_slice());
        Ok(x)
    }

    /// Solves `(source + jitter·I) X = B` column by column.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "solve_mat: rhs has {} rows, system size is {}",
                b.nrows(),
                self.n()
            )));
        }
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_slice(col.as_mut_slice());
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let b = random_matrix(n, n, seed);
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn kron_frozen_example() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 6.0, 7.0]);
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 5.0, 0.0, 10.0, //
                6.0, 7.0, 12.0, 14.0, //
                0.0, 15.0, 0.0, 20.0, //
                18.0, 21.0, 24.0, 28.0,
            ],
        );
        assert_eq!(kron(&a, &b), expected);
    }

    #[test]
    fn kron_of_identities_is_identity() {
        let k = kron(&DMatrix::identity(2, 2), &DMatrix::identity(3, 3));
        assert_eq!(k, DMatrix::identity(6, 6));
    }

    #[test]
    fn kron_apply_matches_materialized_nonsquare() {
        let a = random_matrix(3, 2, 7);
        let b = random_matrix(4, 5, 8);
        let v = DVector::from_fn(10, |i, _| (i as f64 * 0.61).sin());
        let fast = kron_apply(&a, &b, &v).unwrap();
        let slow = kron(&a, &b) * &v;
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
    }

    #[test]
    fn kron_apply_rejects_bad_length() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::identity(3, 3);
        let v = DVector::zeros(5);
        assert!(matches!(
            kron_apply(&a, &b, &v),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn pinv_satisfies_penrose_conditions() {
        for (rows, cols, seed) in [(4, 6, 1), (6, 4, 2), (5, 5, 3)] {
            let a = random_matrix(rows, cols, seed);
            let p = pinv(&a, None).unwrap();
            assert_eq!(p.shape(), (cols, rows));
            assert_abs_diff_eq!(&a * &p * &a, a.clone(), epsilon = 1e-10);
            assert_abs_diff_eq!(&p * &a * &p, p.clone(), epsilon = 1e-10);
            let ap = &a * &p;
            let pa = &p * &a;
            assert_abs_diff_eq!(ap.transpose(), ap.clone(), epsilon = 1e-10);
            assert_abs_diff_eq!(pa.transpose(), pa.clone(), epsilon = 1e-10);
        }
    }

    #[test]
    fn pinv_of_diagonal_inverts_nonzero_entries() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0, 0.5]));
        let p = pinv(&a, None).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.0, 2.0]));
        assert_abs_diff_eq!(p, expected, epsilon = 1e-14);
    }

    #[test]
    fn nullspace_of_row_vector() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let basis = nullspace_basis(&a, None).unwrap();
        assert_eq!(basis.shape(), (2, 1));
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert_abs_diff_eq!(basis[(0, 0)].abs(), inv_sqrt2, epsilon = 1e-14);
        assert_abs_diff_eq!(basis[(0, 0)] + basis[(1, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn nullspace_of_wide_random_matrix() {
        let a = random_matrix(4, 9, 11);
        let basis = nullspace_basis(&a, None).unwrap();
        assert_eq!(basis.shape(), (9, 5));
        assert!((&a * &basis).abs().max() < 1e-12, "A·basis not annihilated");
        let gram = basis.transpose() * &basis;
        assert_abs_diff_eq!(gram, DMatrix::identity(5, 5), epsilon = 1e-12);
    }

    #[test]
    fn nullspace_of_full_rank_square_is_empty() {
        let a = random_spd(5, 21);
        let basis = nullspace_basis(&a, None).unwrap();
        assert_eq!(basis.ncols(), 0);
    }

    #[test]
    fn spd_factor_frozen_2x2() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = SpdFactorization::new(&a, 0.0).unwrap();
        let l = f.factor();
        assert_abs_diff_eq!(l[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 1)], 2.0_f64.sqrt(), epsilon = 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn spd_factor_reconstructs_source_plus_jitter() {
        for n in [1, 3, 17, 130, 300] {
            let a = random_spd(n, n as u64);
            let jitter = 1e-3;
            let f = SpdFactorization::new(&a, jitter).unwrap();
            let recon = f.factor() * f.factor().transpose();
            let target = &a + DMatrix::identity(n, n) * jitter;
            let scale = target.abs().max();
            assert!(
                (recon - target).abs().max() < 1e-12 * scale.max(1.0),
                "reconstruction error too large at n={n}"
            );
        }
    }

    #[test]
    fn spd_factor_matches_reference_cholesky() {
        let a = random_spd(180, 77);
        let f = SpdFactorization::new(&a, 0.0).unwrap();
        let reference = a.clone().cholesky().expect("reference factorization");
        assert!((f.factor() - reference.l()).abs().max() < 1e-9);
    }

    #[test]
    fn spd_solve_matches_reference() {
        let a = random_spd(60, 5);
        let f = SpdFactorization::new(&a, 0.0).unwrap();
        let b = random_matrix(60, 3, 6);
        let x = f.solve_mat(&b).unwrap();
        assert!((&a * &x - &b).abs().max() < 1e-9);
        let bv = DVector::from_column_slice(b.column(0).as_slice());
        let xv = f.solve_vec(&bv).unwrap();
        assert_abs_diff_eq!(xv, DVector::from_column_slice(x.column(0).as_slice()), epsilon = 1e-12);
    }

    #[test]
    fn spd_solve_accounts_for_jitter() {
        let a = random_spd(20, 9);
        let jitter = 0.25;
        let f = SpdFactorization::new(&a, jitter).unwrap();
        let b = DVector::from_element(20, 1.0);
        let x = f.solve_vec(&b).unwrap();
        let jittered = &a + DMatrix::identity(20, 20) * jitter;
        assert!((jittered * &x - &b).abs().max() < 1e-10);
    }

    #[test]
    fn spd_factor_fails_on_rank_deficient_matrix() {
        // Gram matrix of duplicated points: rank 1, so the second pivot dies.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 1.0, 1.0, 0.5, 0.5, 0.5, 1.0]);
        match SpdFactorization::new(&a, 0.0) {
            Err(Error::FactorizationFailed {
                index,
                value,
                min_eig,
            }) => {
                assert_eq!(index, 1);
                assert!(value.abs() < 1e-10);
                let est = min_eig.expect("small matrix should report an eigenvalue estimate");
                assert!(est.abs() < 1e-10);
            }
            other => panic!("expected factorization failure, got {other:?}"),
        }
    }

    #[test]
    fn spd_factor_rejects_negative_jitter() {
        let a = DMatrix::identity(2, 2);
        assert!(matches!(
            SpdFactorization::new(&a, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kron_mixed_product_property(
            seed in 0u64..500,
            p in 1usize..4, q in 1usize..4, r in 1usize..4, s in 1usize..4,
        ) {
            // (A⊗B)(C⊗D) = (AC)⊗(BD) for compatible shapes.
            let a = random_matrix(p, q, seed);
            let b = random_matrix(r, s, seed + 1);
            let c = random_matrix(q, p, seed + 2);
            let d = random_matrix(s, r, seed + 3);
            let lhs = kron(&a, &b) * kron(&c, &d);
            let rhs = kron(&(&a * &c), &(&b * &d));
            prop_assert!((lhs - rhs).abs().max() < 1e-11);
        }

        #[test]
        fn kron_apply_agrees_with_materialized(
            seed in 0u64..500,
            p in 1usize..5, q in 1usize..5, r in 1usize..5, s in 1usize..5,
        ) {
            let a = random_matrix(p, q, seed);
            let b = random_matrix(r, s, seed + 7);
            let v = DVector::from_fn(q * s, |i, _| ((seed + i as u64) as f64 * 0.13).cos());
            let fast = kron_apply(&a, &b, &v).unwrap();
            let slow = kron(&a, &b) * &v;
            prop_assert!((fast - slow).abs().max() < 1e-11);
        }

        #[test]
        fn spd_solve_residual_is_small(seed in 0u64..200, n in 1usize..40) {
            let a = random_spd(n, seed);
            let f = SpdFactorization::new(&a, 0.0).unwrap();
            let b = DVector::from_fn(n, |i, _| ((i as f64) + 1.0).sin());
            let x = f.solve_vec(&b).unwrap();
            prop_assert!((&a * &x - &b).abs().max() < 1e-8);
        }
    }
}
