//! Box-constrained nonlinear programming with equality constraints.
//!
//! The solver runs an augmented-Lagrangian outer loop around a projected
//! L-BFGS inner minimizer. It is deliberately small: dense problems with a
//! few hundred decision variables, smooth objectives, and a modest number of
//! equality constraints — which is exactly what the predictive controllers
//! in this crate produce.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type ObjFn<'a> = Box<dyn Fn(&DVector<f64>) -> f64 + 'a>;
type GradFn<'a> = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>;
type ConFn<'a> = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>;
type JacFn<'a> = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + 'a>;

/// Smooth equality constraints `c(v) = 0` with an analytic Jacobian
/// (`dim × n`, row `i` = `∂c_i/∂v`).
pub struct EqConstraints<'a> {
    pub dim: usize,
    pub eval: ConFn<'a>,
    pub jacobian: JacFn<'a>,
}

/// `min f(v)  s.t.  c(v) = 0,  lower ≤ v ≤ upper`.
pub struct NlpProblem<'a> {
    pub dim: usize,
    pub objective: ObjFn<'a>,
    pub gradient: GradFn<'a>,
    pub equality: Option<EqConstraints<'a>>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub initial: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct NlpSettings {
    /// Infinity-norm tolerance on the equality residual.
    pub tol_eq: f64,
    /// Infinity-norm tolerance on the projected Lagrangian gradient.
    pub tol_kkt: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub rho0: f64,
    pub rho_max: f64,
    pub lbfgs_memory: usize,
    /// Compare analytic gradients/Jacobians against finite differences at the
    /// starting point before solving; intended for debugging new cost
    /// functions, not production runs.
    pub check_gradients: bool,
}

impl Default for NlpSettings {
    fn default() -> Self {
        NlpSettings {
            tol_eq: 1e-6,
            tol_kkt: 1e-6,
            max_outer: 200,
            max_inner: 500,
            rho0: 10.0,
            rho_max: 1e12,
            lbfgs_memory: 10,
            check_gradients: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NlpStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct NlpResult {
    pub v_star: DVector<f64>,
    pub objective_value: f64,
    /// Infinity norm of `c(v_star)` (0 when the problem has no equalities).
    pub eq_residual: f64,
    /// Infinity norm of the projected Lagrangian gradient at `v_star`.
    pub kkt_residual: f64,
    pub status: NlpStatus,
    /// Total inner iterations across all outer passes.
    pub iterations: usize,
}

fn project(v: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(lower[i], upper[i]))
}

/// Projected-gradient stationarity measure `‖proj(v - g) - v‖_∞`.
fn projected_gradient_norm(
    v: &DVector<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> f64 {
    (0..v.len())
        .map(|i| ((v[i] - g[i]).clamp(lower[i], upper[i]) - v[i]).abs())
        .fold(0.0, f64::max)
}

fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: &F, v: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(v.len());
    for i in 0..v.len() {
        let h = 1e-6 * v[i].abs().max(1.0);
        let mut plus = v.clone();
        let mut minus = v.clone();
        plus[i] += h;
        minus[i] -= h;
        g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn check_problem_gradients(problem: &NlpProblem, v: &DVector<f64>) -> Result<()> {
    let analytic = (problem.gradient)(v);
    let numeric = fd_gradient(&|x: &DVector<f64>| (problem.objective)(x), v);
    let scale = analytic.amax().max(1.0);
    for i in 0..v.len() {
        let err = (analytic[i] - numeric[i]).abs();
        if err > 1e-4 * scale {
            return Err(Error::Solver(format!(
                "gradient check failed at component {i}: analytic {}, finite-difference {}",
                analytic[i], numeric[i]
            )));
        }
    }
    if let Some(eq) = &problem.equality {
        let jac = (eq.jacobian)(v);
        if jac.shape() != (eq.dim, problem.dim) {
            return Err(Error::Solver(format!(
                "constraint Jacobian is {}×{}, expected {}×{}",
                jac.nrows(),
                jac.ncols(),
                eq.dim,
                problem.dim
            )));
        }
        for r in 0..eq.dim {
            let numeric = fd_gradient(&|x: &DVector<f64>| (eq.eval)(x)[r], v);
            let scale = jac.row(r).amax().max(1.0);
            for i in 0..v.len() {
                let err = (jac[(r, i)] - numeric[i]).abs();
                if err > 1e-4 * scale {
                    return Err(Error::Solver(format!(
                        "constraint Jacobian check failed at row {r}, component {i}: analytic {}, finite-difference {}",
                        jac[(r, i)],
                        numeric[i]
                    )));
                }
            }
        }
    }
    Ok(())
}

struct AugmentedLagrangian<'p, 'a> {
    problem: &'p NlpProblem<'a>,
    mu: DVector<f64>,
    rho: f64,
}

impl AugmentedLagrangian<'_, '_> {
    fn value(&self, v: &DVector<f64>) -> f64 {
        let f = (self.problem.objective)(v);
        match &self.problem.equality {
            None => f,
            Some(eq) => {
                let c = (eq.eval)(v);
                f + self.mu.dot(&c) + 0.5 * self.rho * c.norm_squared()
            }
        }
    }

    fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        let g = (self.problem.gradient)(v);
        match &self.problem.equality {
            None => g,
            Some(eq) => {
                let c = (eq.eval)(v);
                let jac = (eq.jacobian)(v);
                g + jac.transpose() * (&self.mu + &c * self.rho)
            }
        }
    }
}

enum InnerOutcome {
    /// Reached the requested stationarity.
    Stationary,
    /// Ran out of iterations or stalled in the line search.
    Stopped,
    /// Non-finite values made progress impossible.
    NonFinite,
}

/// Projected L-BFGS descent on the augmented Lagrangian. Returns the new
/// iterate, iteration count, and how the loop ended.
fn inner_minimize(
    al: &AugmentedLagrangian,
    v0: DVector<f64>,
    tol: f64,
    max_iter: usize,
    memory: usize,
) -> (DVector<f64>, usize, InnerOutcome) {
    let lower = &al.problem.lower;
    let upper = &al.problem.upper;
    let mut v = project(&v0, lower, upper);
    let mut fv = al.value(&v);
    if !fv.is_finite() {
        return (v, 0, InnerOutcome::NonFinite);
    }
    let mut g = al.gradient(&v);
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();

    for iter in 0..max_iter {
        if projected_gradient_norm(&v, &g, lower, upper) <= tol {
            return (v, iter, InnerOutcome::Stationary);
        }
        // two-loop recursion: d = -H·g
        let mut d = {
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(history.len());
            for (s, y, r) in history.iter().rev() {
                let a = r * s.dot(&q);
                q.axpy(-a, y, 1.0);
                alphas.push(a);
            }
            if let Some((s, y, _)) = history.back() {
                q *= s.dot(y) / y.dot(y);
            }
            for ((s, y, r), a) in history.iter().zip(alphas.iter().rev()) {
                let b = r * y.dot(&q);
                q.axpy(a - b, s, 1.0);
            }
            -q
        };
        // fall back to steepest descent if the quasi-Newton direction fails
        for attempt in 0..2 {
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let cand = project(&(&v + &d * alpha), lower, upper);
                let step = &cand - &v;
                let slope = g.dot(&step);
                let fc = al.value(&cand);
                if fc.is_finite() && fc <= fv + 1e-4 * slope.min(0.0) && step.amax() > 0.0 {
                    accepted = Some((cand, fc));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((cand, fc)) => {
                    let g_new = al.gradient(&cand);
                    if !g_new.iter().all(|x| x.is_finite()) {
                        return (cand, iter + 1, InnerOutcome::NonFinite);
                    }
                    let s = &cand - &v;
                    let y = &g_new - &g;
                    let sy = s.dot(&y);
                    if sy > 1e-12 * s.norm() * y.norm() {
                        if history.len() == memory {
                            history.pop_front();
                        }
                        history.push_back((s, y, 1.0 / sy));
                    }
                    v = cand;
                    fv = fc;
                    g = g_new;
                    break;
                }
                None if attempt == 0 && !history.is_empty() => {
                    // retry along steepest descent with fresh memory
                    history.clear();
                    d = -&g;
                }
                None => {
                    return (v, iter + 1, InnerOutcome::Stopped);
                }
            }
        }
    }
    (v, max_iter, InnerOutcome::Stopped)
}

/// Solves the problem. Numerical trouble reports through `NlpStatus`; `Err`
/// is reserved for contract violations (bad bounds, failed gradient checks).
pub fn solve_nlp(problem: &NlpProblem, settings: &NlpSettings) -> Result<NlpResult> {
    let n = problem.dim;
    if problem.lower.len() != n || problem.upper.len() != n || problem.initial.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "solve_nlp: bounds/initial lengths ({}, {}, {}) do not match dim {n}",
            problem.lower.len(),
            problem.upper.len(),
            problem.initial.len()
        )));
    }
    if (0..n).any(|i| problem.lower[i] > problem.upper[i]) {
        return Err(Error::InvalidArgument("solve_nlp: lower bound above upper".into()));
    }
    let mut v = project(&problem.initial, &problem.lower, &problem.upper);
    if settings.check_gradients {
        check_problem_gradients(problem, &v)?;
    }

    let eq_dim = problem.equality.as_ref().map_or(0, |eq| eq.dim);
    let mut mu = DVector::zeros(eq_dim);
    let mut rho = settings.rho0;
    let mut prev_viol = f64::INFINITY;
    let mut inner_tol = (1e-3_f64).max(settings.tol_kkt);
    let mut total_iters = 0usize;

    // `mu` must already contain the final multiplier estimate; the Lagrangian
    // gradient is evaluated with it as-is.
    let finish = |v: DVector<f64>, mu: &DVector<f64>, status: NlpStatus, iterations: usize| -> NlpResult {
        let objective_value = (problem.objective)(&v);
        let (eq_residual, kkt_residual) = match &problem.equality {
            None => {
                let g = (problem.gradient)(&v);
                (0.0, projected_gradient_norm(&v, &g, &problem.lower, &problem.upper))
            }
            Some(eq) => {
                let c = (eq.eval)(&v);
                let viol = if c.is_empty() { 0.0 } else { c.amax() };
                let grad_lag = (problem.gradient)(&v) + (eq.jacobian)(&v).transpose() * mu;
                (
                    viol,
                    projected_gradient_norm(&v, &grad_lag, &problem.lower, &problem.upper),
                )
            }
        };
        if status == NlpStatus::Converged {
            debug_assert!(
                eq_residual <= settings.tol_eq * 1.01 && kkt_residual <= settings.tol_kkt * 1.01,
                "converged result violates tolerances: eq {eq_residual:.3e}, kkt {kkt_residual:.3e}"
            );
        }
        NlpResult {
            v_star: v,
            objective_value,
            eq_residual,
            kkt_residual,
            status,
            iterations,
        }
    };

    for _outer in 0..settings.max_outer {
        let al = AugmentedLagrangian {
            problem,
            mu: mu.clone(),
            rho,
        };
        let (v_new, iters, outcome) =
            inner_minimize(&al, v, inner_tol, settings.max_inner, settings.lbfgs_memory);
        v = v_new;
        total_iters += iters;
        if matches!(outcome, InnerOutcome::NonFinite) {
            return Ok(finish(v, &mu, NlpStatus::Infeasible, total_iters));
        }

        match &problem.equality {
            None => {
                let g = (problem.gradient)(&v);
                let kkt = projected_gradient_norm(&v, &g, &problem.lower, &problem.upper);
                if kkt <= settings.tol_kkt {
                    return Ok(finish(v, &mu, NlpStatus::Converged, total_iters));
                }
                if matches!(outcome, InnerOutcome::Stopped) && iters < settings.max_inner {
                    // stalled line search with nothing left to try
                    return Ok(finish(v, &mu, NlpStatus::MaxIterations, total_iters));
                }
            }
            Some(eq) => {
                let c = (eq.eval)(&v);
                if c.iter().any(|x| !x.is_finite()) {
                    return Ok(finish(v, &mu, NlpStatus::Infeasible, total_iters));
                }
                let viol = if c.is_empty() { 0.0 } else { c.amax() };
                let mu_hat = &mu + &c * rho;
                let grad_lag = (problem.gradient)(&v) + (eq.jacobian)(&v).transpose() * &mu_hat;
                let kkt =
                    projected_gradient_norm(&v, &grad_lag, &problem.lower, &problem.upper);
                // first-order multiplier update every outer pass
                mu = mu_hat;
                if viol <= settings.tol_eq && kkt <= settings.tol_kkt {
                    return Ok(finish(v, &mu, NlpStatus::Converged, total_iters));
                }
                if viol > 0.25 * prev_viol {
                    rho = (10.0 * rho).min(settings.rho_max);
                }
                prev_viol = viol;
            }
        }
        inner_tol = (inner_tol * 0.2).max(settings.tol_kkt);
    }
    Ok(finish(v, &mu, NlpStatus::MaxIterations, total_iters))
}
