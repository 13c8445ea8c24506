//! Discrete-time plants used for data generation and closed-loop runs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// States with infinity norm beyond this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// A discrete-time plant `x⁺ = f(x, u)`, `y = h(x)`.
///
/// Jacobians default to central finite differences; implementations with
/// cheap analytic derivatives should override them.
pub trait Plant {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn output(&self, x: &DVector<f64>) -> DVector<f64>;

    fn step_jacobian_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(self.state_dim(), x, |xp| self.step(xp, u))
    }

    fn step_jacobian_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(self.state_dim(), u, |up| self.step(x, up))
    }

    fn output_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(self.output_dim(), x, |xp| self.output(xp))
    }
}

fn fd_jacobian<F>(out_dim: usize, at: &DVector<f64>, f: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = at.len();
    let mut jac = DMatrix::zeros(out_dim, n);
    for j in 0..n {
        let h = 1e-6 * at[j].abs().max(1.0);
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[j] += h;
        minus[j] -= h;
        let fp = f(&plus);
        let fm = f(&minus);
        for i in 0..out_dim {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Euler-discretized Van der Pol oscillator:
///
/// ```text
/// x1⁺ = x1 + Ts·x2
/// x2⁺ = -Ts·x1 + x2 + Ts·u + Ts·μ·(1 - x1²)·x2
/// y   = x1
/// ```
#[derive(Clone, Debug)]
pub struct VanDerPol {
    pub mu: f64,
    pub ts: f64,
}

impl Default for VanDerPol {
    fn default() -> Self {
        VanDerPol { mu: 1.0, ts: 0.1 }
    }
}

impl Plant for VanDerPol {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (x1, x2) = (x[0], x[1]);
        let ts = self.ts;
        DVector::from_vec(vec![
            x1 + ts * x2,
            -ts * x1 + x2 + ts * u[0] + ts * self.mu * (1.0 - x1 * x1) * x2,
        ])
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0]])
    }

    fn step_jacobian_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let (x1, x2) = (x[0], x[1]);
        let ts = self.ts;
        DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0,
                ts,
                -ts - 2.0 * ts * self.mu * x1 * x2,
                1.0 + ts * self.mu * (1.0 - x1 * x1),
            ],
        )
    }

    fn step_jacobian_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[0.0, self.ts])
    }

    fn output_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
    }
}

/// Linear time-invariant plant `x⁺ = A x + B u`, `y = C x`.
#[derive(Clone, Debug)]
pub struct Lti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl Lti {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "lti: incompatible shapes A {}×{}, B {}×{}, C {}×{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        Ok(Lti { a, b, c })
    }
}

impl Plant for Lti {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    fn step_jacobian_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn step_jacobian_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn output_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.c.clone()
    }
}

/// States and outputs after each applied input: `states[k] = x_{k+1}`,
/// `outputs[k] = h(x_{k+1})`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

/// Rolls the plant forward through `inputs`, aborting if the state leaves the
/// divergence guard.
pub fn simulate<P: Plant + ?Sized>(
    plant: &P,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> Result<Trajectory> {
    if x0.len() != plant.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "simulate: initial state has dimension {}, plant expects {}",
            x0.len(),
            plant.state_dim()
        )));
    }
    let mut states = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut x = x0.clone();
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != plant.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "simulate: input {k} has dimension {}, plant expects {}",
                u.len(),
                plant.input_dim()
            )));
        }
        x = plant.step(&x, u);
        let norm = x.amax();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step: k,
                norm,
                limit: DIVERGENCE_LIMIT,
            });
        }
        outputs.push(plant.output(&x));
        states.push(x.clone());
    }
    Ok(Trajectory { states, outputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(parts: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(parts)
    }

    #[test]
    fn vdp_step_frozen_values() {
        let p = VanDerPol::default();
        let a = p.step(&v(&[1.0, 0.0]), &v(&[0.0]));
        assert_abs_diff_eq!(a, v(&[1.0, -0.1]), epsilon = 1e-15);
        let b = p.step(&v(&[0.0, 1.0]), &v(&[1.0]));
        assert_abs_diff_eq!(b, v(&[0.1, 1.2]), epsilon = 1e-15);
    }

    #[test]
    fn vdp_origin_is_equilibrium() {
        let p = VanDerPol::default();
        let x = p.step(&v(&[0.0, 0.0]), &v(&[0.0]));
        assert_eq!(x, v(&[0.0, 0.0]));
    }

    #[test]
    fn vdp_two_step_rollout_outputs() {
        let p = VanDerPol::default();
        let traj = simulate(&p, &v(&[1.0, 0.0]), &[v(&[0.0]), v(&[0.0])]).unwrap();
        assert_eq!(traj.outputs.len(), 2);
        assert_abs_diff_eq!(traj.outputs[0][0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(traj.outputs[1][0], 0.99, epsilon = 1e-15);
    }

    // Delegates steps but not Jacobians, to exercise the finite-difference
    // defaults against the analytic overrides.
    struct FdOnly(VanDerPol);
    impl Plant for FdOnly {
        fn state_dim(&self) -> usize {
            self.0.state_dim()
        }
        fn input_dim(&self) -> usize {
            self.0.input_dim()
        }
        fn output_dim(&self) -> usize {
            self.0.output_dim()
        }
        fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            self.0.step(x, u)
        }
        fn output(&self, x: &DVector<f64>) -> DVector<f64> {
            self.0.output(x)
        }
    }

    #[test]
    fn vdp_jacobians_match_finite_differences() {
        let p = VanDerPol::default();
        let fd = FdOnly(p.clone());
        let x = v(&[0.7, -1.3]);
        let u = v(&[0.4]);
        assert!((p.step_jacobian_x(&x, &u) - fd.step_jacobian_x(&x, &u)).abs().max() < 1e-8);
        assert!((p.step_jacobian_u(&x, &u) - fd.step_jacobian_u(&x, &u)).abs().max() < 1e-8);
        assert!((p.output_jacobian(&x) - fd.output_jacobian(&x)).abs().max() < 1e-8);
    }

    #[test]
    fn lti_step_is_linear() {
        let lti = Lti::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        let x1 = v(&[1.0, 2.0]);
        let x2 = v(&[-0.5, 0.25]);
        let u = v(&[0.3]);
        let lhs = lti.step(&(&x1 + &x2), &v(&[0.6]));
        let rhs = lti.step(&x1, &u) + lti.step(&x2, &u);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
    }

    #[test]
    fn lti_shape_validation() {
        assert!(Lti::new(
            DMatrix::zeros(2, 3),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(1, 2)
        )
        .is_err());
    }

    #[test]
    fn simulate_detects_divergence() {
        let lti = Lti::new(
            DMatrix::from_row_slice(1, 1, &[4.0]),
            DMatrix::from_row_slice(1, 1, &[0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
        )
        .unwrap();
        let inputs = vec![v(&[0.0]); 40];
        match simulate(&lti, &v(&[1.0]), &inputs) {
            Err(Error::Diverged { step, .. }) => assert!(step > 0 && step < 40),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn simulate_rejects_wrong_input_dim() {
        let p = VanDerPol::default();
        assert!(simulate(&p, &v(&[0.0, 0.0]), &[v(&[0.0, 1.0])]).is_err());
    }
}
