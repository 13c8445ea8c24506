//! Kernel families, Gram matrices, and kernel-vector evaluation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::kron;

/// Exponent used for the Hardy reverse multiquadric when none is configured.
pub const DEFAULT_HARDY_EXPONENT: f64 = 0.5;

/// A positive-definite kernel on stacked real vectors.
///
/// Conventions (note the absence of a factor 2 in the Gaussian denominators):
/// - `Gaussian`: `exp(-‖z1-z2‖² / σ²)`
/// - `HardyReverseMultiquadric`: `(1 + ‖z1-z2‖² / σ²)^exponent`
/// - `Linear`: `z1ᵀ z2`
/// - `WeightedGaussian`: `exp(-Σ_i w_i (z1_i - z2_i)²)` with `w_i = 1/σ_i²`
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    Gaussian { sigma: f64 },
    HardyReverseMultiquadric { sigma: f64, exponent: f64 },
    Linear,
    WeightedGaussian { weights: DVector<f64> },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian kernel: sigma must be positive and finite, got {sigma}"
            )));
        }
        Ok(KernelSpec::Gaussian { sigma })
    }

    pub fn hardy(sigma: f64, exponent: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "hardy kernel: sigma must be positive and finite, got {sigma}"
            )));
        }
        if !exponent.is_finite() {
            return Err(Error::InvalidArgument(
                "hardy kernel: exponent must be finite".into(),
            ));
        }
        Ok(KernelSpec::HardyReverseMultiquadric { sigma, exponent })
    }

    pub fn linear() -> Self {
        KernelSpec::Linear
    }

    /// Builds a weighted Gaussian directly from inverse-variance weights.
    pub fn weighted_gaussian(weights: DVector<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument(
                "weighted gaussian kernel: weights must be nonempty and positive".into(),
            ));
        }
        Ok(KernelSpec::WeightedGaussian { weights })
    }

    /// Builds a weighted Gaussian from per-coordinate length scales,
    /// precomputing `w_i = 1/σ_i²`.
    pub fn weighted_gaussian_from_sigmas(sigmas: &[f64]) -> Result<Self> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(
                "weighted gaussian kernel: sigmas must be nonempty and positive".into(),
            ));
        }
        let weights = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| 1.0 / (s * s)));
        Ok(KernelSpec::WeightedGaussian { weights })
    }

    /// Checks that an argument of dimension `dim` is acceptable.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Err(Error::DimensionMismatch(
                "kernel arguments must be nonempty".into(),
            ));
        }
        if let KernelSpec::WeightedGaussian { weights } = self {
            if weights.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "weighted gaussian kernel has {} weights but argument has dimension {dim}",
                    weights.len()
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, z1: &DVector<f64>, z2: &DVector<f64>) -> Result<f64> {
        if z1.len() != z2.len() {
            return Err(Error::DimensionMismatch(format!(
                "kernel arguments have dimensions {} and {}",
                z1.len(),
                z2.len()
            )));
        }
        self.check_dim(z1.len())?;
        Ok(self.eval_unchecked(z1, z2))
    }

    fn eval_unchecked(&self, z1: &DVector<f64>, z2: &DVector<f64>) -> f64 {
        match self {
            KernelSpec::Gaussian { sigma } => {
                let mut d2 = 0.0;
                for (a, b) in z1.iter().zip(z2.iter()) {
                    let d = a - b;
                    d2 += d * d;
                }
                (-d2 / (sigma * sigma)).exp()
            }
            KernelSpec::HardyReverseMultiquadric { sigma, exponent } => {
                let mut d2 = 0.0;
                for (a, b) in z1.iter().zip(z2.iter()) {
                    let d = a - b;
                    d2 += d * d;
                }
                (1.0 + d2 / (sigma * sigma)).powf(*exponent)
            }
            KernelSpec::Linear => z1.dot(z2),
            KernelSpec::WeightedGaussian { weights } => {
                let mut acc = 0.0;
                for ((a, b), w) in z1.iter().zip(z2.iter()).zip(weights.iter()) {
                    let d = a - b;
                    acc += w * d * d;
                }
                (-acc).exp()
            }
        }
    }
}

/// A Gram matrix together with the points and kernel that produced it.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub points: Vec<DVector<f64>>,
    pub matrix: DMatrix<f64>,
    pub kernel: KernelSpec,
}

/// Builds the Gram matrix `K[i,j] = k(p_i, p_j)`. Only the upper triangle is
/// evaluated; the lower triangle is mirrored so the result is bitwise
/// symmetric.
pub fn gram(kernel: &KernelSpec, points: &[DVector<f64>]) -> Result<GramMatrix> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("gram: no points given".into()));
    }
    let dim = points[0].len();
    kernel.check_dim(dim)?;
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "gram: point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
    }
    let n = points.len();
    let mut matrix = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = kernel.eval_unchecked(&points[i], &points[j]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gram matrix has non-finite entries".into()));
    }
    Ok(GramMatrix {
        points: points.to_vec(),
        matrix,
        kernel: kernel.clone(),
    })
}

/// Evaluates `[k(p_i, z)]_i` against a fixed point set.
pub fn kernel_vector(
    kernel: &KernelSpec,
    points: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    kernel.check_dim(z.len())?;
    let mut out = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        if p.len() != z.len() {
            return Err(Error::DimensionMismatch(format!(
                "kernel_vector: point {i} has dimension {}, query has {}",
                p.len(),
                z.len()
            )));
        }
        out[i] = kernel.eval_unchecked(p, z);
    }
    Ok(out)
}

/// Product-kernel vector `ku ⊗ kx` with u-outer/x-inner ordering: entry
/// `a·Tx + c` equals `ku[a]·kx[c]`.
pub fn product_kernel_vector(ku: &DVector<f64>, kx: &DVector<f64>) -> DVector<f64> {
    let tx = kx.len();
    DVector::from_fn(ku.len() * tx, |idx, _| ku[idx / tx] * kx[idx % tx])
}

/// Jacobian of the kernel vector with respect to the query point: row `i`
/// holds `∂k(p_i, z)/∂z`, so the result is `len(points) × dim(z)`.
pub fn kernel_vector_jacobian(
    kernel: &KernelSpec,
    points: &[DVector<f64>],
    z: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    kernel.check_dim(z.len())?;
    let dim = z.len();
    let mut jac = DMatrix::zeros(points.len(), dim);
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "kernel_vector_jacobian: point {i} has dimension {}, query has {dim}",
                p.len()
            )));
        }
        match kernel {
            KernelSpec::Gaussian { sigma } => {
                let k = kernel.eval_unchecked(p, z);
                let c = -2.0 / (sigma * sigma) * k;
                for j in 0..dim {
                    jac[(i, j)] = c * (z[j] - p[j]);
                }
            }
            KernelSpec::HardyReverseMultiquadric { sigma, exponent } => {
                let s2 = sigma * sigma;
                let mut d2 = 0.0;
                for j in 0..dim {
                    let d = z[j] - p[j];
                    d2 += d * d;
                }
                let base = 1.0 + d2 / s2;
                let c = exponent * base.powf(exponent - 1.0) * 2.0 / s2;
                for j in 0..dim {
                    jac[(i, j)] = c * (z[j] - p[j]);
                }
            }
            KernelSpec::Linear => {
                for j in 0..dim {
                    jac[(i, j)] = p[j];
                }
            }
            KernelSpec::WeightedGaussian { weights } => {
                let k = kernel.eval_unchecked(p, z);
                for j in 0..dim {
                    jac[(i, j)] = -2.0 * weights[j] * (z[j] - p[j]) * k;
                }
            }
        }
    }
    Ok(jac)
}

/// Dense product Gram `Ku ⊗ Kx` for tests and the full-size baseline.
pub fn product_gram(ku: &DMatrix<f64>, kx: &DMatrix<f64>) -> DMatrix<f64> {
    kron(ku, kx)
}
