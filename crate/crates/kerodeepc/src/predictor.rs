//! Operator fitting and multi-step prediction.
//!
//! The product predictor learns the map (input window, initial state) →
//! output trajectory with a product kernel, whose Gram matrix `Ku ⊗ Kx` is
//! never materialized: every solve goes through the factor Grams. The reduced
//! pathway routes predictions through the state-conditioned operator `Ω(x)`
//! and its right inverse `Ω†(x)`, which is what makes the efficient
//! controller's small constraint system possible. A stacked-kernel predictor
//! serves as the baseline without Kronecker structure.

use nalgebra::{DMatrix, DVector};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{gram, kernel_vector, kernel_vector_jacobian, GramMatrix, KernelSpec};
use crate::numerics::SpdFactorization;

/// Default Gram jitter: `1e-8 · n`, scaled by the mean diagonal so it is
/// dimensionally consistent for non-normalized kernels.
pub fn default_jitter(gram: &DMatrix<f64>) -> f64 {
    let n = gram.nrows();
    if n == 0 {
        return 0.0;
    }
    let mean_diag = (0..n).map(|i| gram[(i, i)].abs()).sum::<f64>() / n as f64;
    1e-8 * n as f64 * mean_diag
}

/// State-conditioned reduced operator at a fixed query state `x`:
/// `Ω(x) = K̃u ⊗ rowᵀ` (Tu × Tu·Tx) and `Ω†(x) = K̃u⁻¹ ⊗ col` (Tu·Tx × Tu),
/// where `row = K̃x·kx/‖kx‖²`, `col = K̃x⁻¹·kx`, and tildes mark jittered
/// Grams. `Ω(x)·Ω†(x) = I` holds by construction.
#[derive(Clone, Debug)]
pub struct OmegaOperator {
    pub x: DVector<f64>,
    pub kx_vec: DVector<f64>,
    pub row: DVector<f64>,
    pub col: DVector<f64>,
    pub norm_sq: f64,
}

/// Product-RKHS operator predictor.
pub struct ProductPredictor {
    pub dataset: Dataset,
    pub ku: GramMatrix,
    pub kx: GramMatrix,
    pub jitter_u: f64,
    pub jitter_x: f64,
    /// Smallest and largest singular values of the output matrix, computed
    /// once at fit; the efficient controller requires full row rank.
    pub y_min_sv: f64,
    pub y_max_sv: f64,
    fu: SpdFactorization,
    fx: SpdFactorization,
    ku_jittered: DMatrix<f64>,
    kx_jittered: DMatrix<f64>,
}

/// Fits the product operator. `None` jitters fall back to [`default_jitter`]
/// of the respective Gram.
pub fn fit_product(
    dataset: Dataset,
    ku_spec: &KernelSpec,
    kx_spec: &KernelSpec,
    jitter_u: Option<f64>,
    jitter_x: Option<f64>,
) -> Result<ProductPredictor> {
    dataset.validate()?;
    let ku = gram(ku_spec, &dataset.u_points())?;
    let kx = gram(kx_spec, &dataset.x_points())?;
    let jitter_u = jitter_u.unwrap_or_else(|| default_jitter(&ku.matrix));
    let jitter_x = jitter_x.unwrap_or_else(|| default_jitter(&kx.matrix));
    let fu = SpdFactorization::new(&ku.matrix, jitter_u)?;
    let fx = SpdFactorization::new(&kx.matrix, jitter_x)?;
    let ku_jittered = fu.jittered();
    let kx_jittered = fx.jittered();
    let svals = dataset.y.clone().singular_values();
    let y_max_sv = svals.iter().cloned().fold(0.0, f64::max);
    let y_min_sv = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ProductPredictor {
        dataset,
        ku,
        kx,
        jitter_u,
        jitter_x,
        y_min_sv,
        y_max_sv,
        fu,
        fx,
        ku_jittered,
        kx_jittered,
    })
}

impl ProductPredictor {
    pub fn tu(&self) -> usize {
        self.dataset.tu()
    }

    pub fn tx(&self) -> usize {
        self.dataset.tx()
    }

    pub fn horizon(&self) -> usize {
        self.dataset.horizon
    }

    pub fn output_len(&self) -> usize {
        self.dataset.output_dim * self.dataset.horizon
    }

    pub fn input_len(&self) -> usize {
        self.dataset.input_dim * self.dataset.horizon
    }

    /// Output data matrix (`p·N × Tu·Tx`).
    pub fn y(&self) -> &DMatrix<f64> {
        &self.dataset.y
    }

    /// Jittered input Gram `K̃u` (the matrix all operator formulas use).
    pub fn ku_jittered(&self) -> &DMatrix<f64> {
        &self.ku_jittered
    }

    pub fn kx_jittered(&self) -> &DMatrix<f64> {
        &self.kx_jittered
    }

    pub fn ku_vector(&self, u_stacked: &DVector<f64>) -> Result<DVector<f64>> {
        if u_stacked.len() != self.input_len() {
            return Err(Error::DimensionMismatch(format!(
                "input window has length {}, expected m·N = {}",
                u_stacked.len(),
                self.input_len()
            )));
        }
        kernel_vector(&self.ku.kernel, &self.ku.points, u_stacked)
    }

    pub fn kx_vector(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dataset.state_dim {
            return Err(Error::DimensionMismatch(format!(
                "state has dimension {}, expected {}",
                x.len(),
                self.dataset.state_dim
            )));
        }
        kernel_vector(&self.kx.kernel, &self.kx.points, x)
    }

    /// Jacobian of `ku(u)` with respect to the stacked input window
    /// (`Tu × m·N`).
    pub fn ku_jacobian(&self, u_stacked: &DVector<f64>) -> Result<DMatrix<f64>> {
        kernel_vector_jacobian(&self.ku.kernel, &self.ku.points, u_stacked)
    }

    /// `K̃u⁻¹ b`.
    pub fn solve_ku(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.fu.solve_vec(b)
    }

    /// Full prediction `y = Y·K⊗⁻¹·(ku(u) ⊗ kx(x))`, evaluated through the
    /// factor Grams (never through a materialized `K⊗`).
    pub fn predict_product(&self, u_stacked: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let alpha_u = self.fu.solve_vec(&self.ku_vector(u_stacked)?)?;
        let alpha_x = self.fx.solve_vec(&self.kx_vector(x)?)?;
        let tx = self.tx();
        // Y · (alpha_u ⊗ alpha_x) without forming the Kronecker vector
        let y = self.y();
        let mut out = DVector::zeros(y.nrows());
        for a in 0..self.tu() {
            for c in 0..tx {
                let w = alpha_u[a] * alpha_x[c];
                if w != 0.0 {
                    out.axpy(w, &y.column(a * tx + c), 1.0);
                }
            }
        }
        Ok(out)
    }

    /// Builds `Ω(x)`/`Ω†(x)` in factored form.
    pub fn omega(&self, x: &DVector<f64>) -> Result<OmegaOperator> {
        let kx_vec = self.kx_vector(x)?;
        let norm_sq = kx_vec.norm_squared();
        if norm_sq < 1e-300 {
            return Err(Error::NonFinite(format!(
                "omega: kernel vector kx(x) vanishes at x = {x:?}"
            )));
        }
        let row = &self.kx_jittered * &kx_vec / norm_sq;
        let col = self.fx.solve_vec(&kx_vec)?;
        Ok(OmegaOperator {
            x: x.clone(),
            kx_vec,
            row,
            col,
            norm_sq,
        })
    }

    /// Same operator; named access to the right-inverse part for symmetry
    /// with the factored `Ω`.
    pub fn omega_pinv(&self, x: &DVector<f64>) -> Result<OmegaOperator> {
        self.omega(x)
    }

    /// `Ω(x)·v` for `v` of length `Tu·Tx`.
    pub fn apply_omega(&self, om: &OmegaOperator, v: &DVector<f64>) -> Result<DVector<f64>> {
        let (tu, tx) = (self.tu(), self.tx());
        if v.len() != tu * tx {
            return Err(Error::DimensionMismatch(format!(
                "apply_omega: vector length {}, expected Tu·Tx = {}",
                v.len(),
                tu * tx
            )));
        }
        // (K̃u ⊗ rowᵀ) v = K̃u · (V · row) with V the Tu×Tx reshape of v
        let mut t = DVector::zeros(tu);
        for a in 0..tu {
            let mut acc = 0.0;
            for c in 0..tx {
                acc += v[a * tx + c] * om.row[c];
            }
            t[a] = acc;
        }
        Ok(&self.ku_jittered * t)
    }

    /// `Ω†(x)·w` for `w` of length `Tu`.
    pub fn apply_omega_pinv(&self, om: &OmegaOperator, w: &DVector<f64>) -> Result<DVector<f64>> {
        let (tu, tx) = (self.tu(), self.tx());
        if w.len() != tu {
            return Err(Error::DimensionMismatch(format!(
                "apply_omega_pinv: vector length {}, expected Tu = {tu}",
                w.len()
            )));
        }
        let s = self.fu.solve_vec(w)?;
        Ok(DVector::from_fn(tu * tx, |i, _| s[i / tx] * om.col[i % tx]))
    }

    /// Materialized `Y·Ω†(x)` (`p·N × Tu`), cached by the controller for the
    /// duration of one step.
    pub fn m_matrix(&self, om: &OmegaOperator) -> Result<DMatrix<f64>> {
        let (tu, tx) = (self.tu(), self.tx());
        let y = self.y();
        let pn = y.nrows();
        // W[r, b] = Σ_c Y[r, b·Tx + c] · col[c]; M = W · K̃u⁻¹
        let mut w = DMatrix::zeros(pn, tu);
        for b in 0..tu {
            for c in 0..tx {
                let s = om.col[c];
                if s != 0.0 {
                    let src = y.column(b * tx + c);
                    let mut dst = w.column_mut(b);
                    dst.axpy(s, &src, 1.0);
                }
            }
        }
        Ok(self.fu.solve_mat(&w.transpose())?.transpose())
    }

    /// Reduced prediction `Y·Ω†(x)·ku(u)`; equal to [`Self::predict_product`]
    /// by the right-inverse identity.
    pub fn predict_reduced(&self, u_stacked: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let om = self.omega_pinv(x)?;
        let g = self.apply_omega_pinv(&om, &self.ku_vector(u_stacked)?)?;
        // g = Ω†(x)·ku(u); prediction is Y·g
        Ok(self.y() * g)
    }

    /// Dense `Ω(x)` for tests (`Tu × Tu·Tx`).
    pub fn materialize_omega(&self, om: &OmegaOperator) -> DMatrix<f64> {
        let (tu, tx) = (self.tu(), self.tx());
        DMatrix::from_fn(tu, tu * tx, |i, jc| {
            self.ku_jittered[(i, jc / tx)] * om.row[jc % tx]
        })
    }

    /// Dense `Ω†(x)` for tests (`Tu·Tx × Tu`).
    pub fn materialize_omega_pinv(&self, om: &OmegaOperator) -> Result<DMatrix<f64>> {
        let (tu, tx) = (self.tu(), self.tx());
        let ku_inv = self.fu.solve_mat(&DMatrix::identity(tu, tu))?;
        Ok(DMatrix::from_fn(tu * tx, tu, |ic, j| {
            ku_inv[(ic / tx, j)] * om.col[ic % tx]
        }))
    }
}

/// Stacked-kernel baseline: one Gram over `z = col(x, u)` regressors.
pub struct StackedPredictor {
    pub z_points: Vec<DVector<f64>>,
    pub y: DMatrix<f64>,
    pub kernel: KernelSpec,
    pub jitter: f64,
    fz: SpdFactorization,
}

pub fn fit_stacked(
    z_points: Vec<DVector<f64>>,
    y: DMatrix<f64>,
    kernel: &KernelSpec,
    jitter: Option<f64>,
) -> Result<StackedPredictor> {
    if z_points.len() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "fit_stacked: {} regressors but {} output columns",
            z_points.len(),
            y.ncols()
        )));
    }
    let g = gram(kernel, &z_points)?;
    let jitter = jitter.unwrap_or_else(|| default_jitter(&g.matrix));
    let fz = SpdFactorization::new(&g.matrix, jitter)?;
    Ok(StackedPredictor {
        z_points,
        y,
        kernel: kernel.clone(),
        jitter,
        fz,
    })
}

impl StackedPredictor {
    /// Assembles a predictor around an existing factorization (used by the
    /// benchmark to reuse the Gram it timed instead of refactorizing).
    pub fn from_parts(
        z_points: Vec<DVector<f64>>,
        y: DMatrix<f64>,
        kernel: KernelSpec,
        fz: SpdFactorization,
    ) -> Result<Self> {
        if z_points.len() != y.ncols() || z_points.len() != fz.n() {
            return Err(Error::DimensionMismatch(format!(
                "from_parts: {} regressors, {} output columns, factorization of size {}",
                z_points.len(),
                y.ncols(),
                fz.n()
            )));
        }
        let jitter = fz.jitter();
        Ok(StackedPredictor { z_points, y, kernel, jitter, fz })
    }

    pub fn t(&self) -> usize {
        self.z_points.len()
    }

    pub fn z_query(&self, u_stacked: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(x.len() + u_stacked.len());
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), u_stacked.len()).copy_from(u_stacked);
        z
    }

    pub fn kz_vector(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        kernel_vector(&self.kernel, &self.z_points, z)
    }

    pub fn kz_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        kernel_vector_jacobian(&self.kernel, &self.z_points, z)
    }

    /// `K̃z⁻¹ b`.
    pub fn solve_kz(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.fz.solve_vec(b)
    }

    pub fn predict_stacked(&self, u_stacked: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.z_query(u_stacked, x);
        let g = self.fz.solve_vec(&self.kz_vector(&z)?)?;
        Ok(&self.y * g)
    }
}
