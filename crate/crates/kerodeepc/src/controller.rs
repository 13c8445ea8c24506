//! Predictive controllers on top of the fitted operators.
//!
//! Three families share one tracking objective and one NLP backend:
//!
//! * [`EfficientController`] — the reduced formulation. The consistency
//!   constraint is collapsed to `A(x)·g̃ = 0` with `A(x) = Ω(x)·Y†`, and `g̃`
//!   is substituted by `Nb·ξ` for an orthonormal nullspace basis `Nb`, so the
//!   per-step NLP has only `m·N + null_dim` decision variables and no
//!   equality constraints (output bounds, when present, come back as slack
//!   equalities).
//! * [`FullController`] — the plain kernel formulation (product or stacked):
//!   every evaluation routes through the materialized `T × T` Gram
//!   factorization, which is exactly the cost profile the efficient variant
//!   exists to avoid.
//! * [`NmpcController`] — model-based single-shooting NMPC on the true
//!   plant, used as the reference for achievable tracking quality.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::product_kernel_vector;
use crate::numerics::{nullspace_basis, pinv, SpdFactorization};
use crate::plant::{Plant, DIVERGENCE_LIMIT};
use crate::predictor::{ProductPredictor, StackedPredictor};
use crate::solver::{solve_nlp, EqConstraints, NlpProblem, NlpResult, NlpSettings, NlpStatus};

/// Output reference as a function of the closed-loop step index.
#[derive(Clone, Debug)]
pub enum ReferenceSignal {
    Constant(DVector<f64>),
    /// Steps through `levels`, holding each for `hold` steps and staying at
    /// the last one.
    Piecewise { levels: Vec<DVector<f64>>, hold: usize },
    /// Explicit per-step sequence, clamped to its last entry.
    Sequence(Vec<DVector<f64>>),
}

impl ReferenceSignal {
    pub fn at(&self, k: usize) -> DVector<f64> {
        match self {
            ReferenceSignal::Constant(r) => r.clone(),
            ReferenceSignal::Piecewise { levels, hold } => {
                let idx = if *hold == 0 { 0 } else { (k / hold).min(levels.len() - 1) };
                levels[idx].clone()
            }
            ReferenceSignal::Sequence(seq) => seq[k.min(seq.len() - 1)].clone(),
        }
    }
}

/// Tracking-problem data shared by all controller variants.
#[derive(Clone, Debug)]
pub struct ControlConfig {
    /// Prediction horizon; must equal the horizon the predictor was fit with.
    pub n: usize,
    /// Stage output weight (`p × p`, positive definite).
    pub q: DMatrix<f64>,
    /// Input weight (`m × m`, positive definite).
    pub r: DMatrix<f64>,
    /// Terminal output weight (`p × p`, positive definite).
    pub p: DMatrix<f64>,
    /// Residual regularization; must be positive.
    pub lambda: f64,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    /// Optional output box; `None` leaves the output unconstrained.
    pub y_bounds: Option<(DVector<f64>, DVector<f64>)>,
    pub ref_y: ReferenceSignal,
    /// Input setpoint entering the `R` penalty.
    pub ref_u: DVector<f64>,
}

impl ControlConfig {
    /// Identity weights, `R = 0.01·I`, `λ = 1`, zero input reference,
    /// unbounded input box, zero output reference.
    pub fn defaults(p_dim: usize, m_dim: usize, n: usize) -> Self {
        ControlConfig {
            n,
            q: DMatrix::identity(p_dim, p_dim),
            r: DMatrix::identity(m_dim, m_dim) * 0.01,
            p: DMatrix::identity(p_dim, p_dim),
            lambda: 1.0,
            u_min: DVector::from_element(m_dim, f64::NEG_INFINITY),
            u_max: DVector::from_element(m_dim, f64::INFINITY),
            y_bounds: None,
            ref_y: ReferenceSignal::Constant(DVector::zeros(p_dim)),
            ref_u: DVector::zeros(m_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_dim = self.q.nrows();
        let m_dim = self.r.nrows();
        if self.n == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        for (name, w, d) in [("Q", &self.q, p_dim), ("R", &self.r, m_dim), ("P", &self.p, p_dim)] {
            if w.nrows() != d || w.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{name} must be {d}x{d}, got {}x{}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            if nalgebra::Cholesky::new(w.clone()).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive definite"
                )));
            }
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.u_min.len() != m_dim || self.u_max.len() != m_dim || self.ref_u.len() != m_dim {
            return Err(Error::DimensionMismatch(
                "input bounds and ref_u must have the input dimension".into(),
            ));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidArgument("u_min exceeds u_max".into()));
        }
        if let Some((lo, hi)) = &self.y_bounds {
            if lo.len() != p_dim || hi.len() != p_dim {
                return Err(Error::DimensionMismatch(
                    "output bounds must have the output dimension".into(),
                ));
            }
            if lo.iter().zip(hi.iter()).any(|(a, b)| a > b) {
                return Err(Error::InvalidArgument("y lower bound exceeds upper".into()));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    /// Stacks `ref_y` over the horizon starting at closed-loop step `k`.
    pub fn reference_window(&self, k: usize) -> DVector<f64> {
        let p_dim = self.output_dim();
        let mut r = DVector::zeros(p_dim * self.n);
        for j in 0..self.n {
            r.rows_mut(j * p_dim, p_dim).copy_from(&self.ref_y.at(k + j));
        }
        r
    }
}

/// Result of one predictive-control step.
#[derive(Clone, Debug)]
pub struct StepSolution {
    /// Planned input window (`m·N`).
    pub u_plan: DVector<f64>,
    /// Predicted output trajectory under `u_plan` (`p·N`).
    pub y_plan: DVector<f64>,
    /// Residual coordinate: `g̃` (`p·N`) for the efficient step, the full
    /// coefficient vector `g` (`T`) for the full step, empty for NMPC.
    pub g: DVector<f64>,
    /// Dimension of the explored residual subspace (efficient step only).
    pub null_dim: usize,
    /// Objective at the starting point, before any solver progress.
    pub initial_objective: f64,
    /// Wall-clock seconds for the whole step (operator caches + solve).
    pub solve_time: f64,
    pub result: NlpResult,
}

/// Closed-loop log of [`run_receding_horizon`].
#[derive(Clone, Debug)]
pub struct TrackingResult {
    pub applied_inputs: Vec<DVector<f64>>,
    pub measured_outputs: Vec<DVector<f64>>,
    pub references: Vec<DVector<f64>>,
    /// `(1/steps) · Σ_k ‖y_k − r_k‖₂`.
    pub mean_tracking_error: f64,
    pub mean_solve_time: f64,
    pub solve_times: Vec<f64>,
    pub statuses: Vec<Option<NlpStatus>>,
    /// Steps whose solve failed outright (previous input was held).
    pub failed_steps: Vec<usize>,
}

impl TrackingResult {
    pub fn all_converged(&self) -> bool {
        self.failed_steps.is_empty()
            && self
                .statuses
                .iter()
                .all(|s| matches!(s, Some(NlpStatus::Converged)))
    }
}

/// Block weights of the tracking objective: `Q` on every output block except
/// the last, `P` on the last, `R` on every input block around `ref_u`.
struct Weights {
    w_blocks: Vec<DMatrix<f64>>,
    r: DMatrix<f64>,
    ref_u: DVector<f64>,
    p_dim: usize,
    m_dim: usize,
}

impl Weights {
    fn new(cfg: &ControlConfig) -> Self {
        let mut w_blocks = vec![cfg.q.clone(); cfg.n];
        w_blocks[cfg.n - 1] = cfg.p.clone();
        Weights {
            w_blocks,
            r: cfg.r.clone(),
            ref_u: cfg.ref_u.clone(),
            p_dim: cfg.output_dim(),
            m_dim: cfg.input_dim(),
        }
    }

    fn output_cost(&self, y: &DVector<f64>, r_stack: &DVector<f64>) -> f64 {
        let mut cost = 0.0;
        for (k, w) in self.w_blocks.iter().enumerate() {
            let e = y.rows(k * self.p_dim, self.p_dim) - r_stack.rows(k * self.p_dim, self.p_dim);
            cost += (w * &e).dot(&e);
        }
        cost
    }

    /// `2·W·(y − r)` stacked over blocks.
    fn output_grad(&self, y: &DVector<f64>, r_stack: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(y.len());
        for (k, w) in self.w_blocks.iter().enumerate() {
            let e = y.rows(k * self.p_dim, self.p_dim) - r_stack.rows(k * self.p_dim, self.p_dim);
            g.rows_mut(k * self.p_dim, self.p_dim).copy_from(&(w * e * 2.0));
        }
        g
    }

    fn input_cost(&self, u: &DVector<f64>) -> f64 {
        let mut cost = 0.0;
        for k in 0..u.len() / self.m_dim {
            let e = u.rows(k * self.m_dim, self.m_dim) - &self.ref_u;
            cost += (&self.r * &e).dot(&e);
        }
        cost
    }

    fn input_grad(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(u.len());
        for k in 0..u.len() / self.m_dim {
            let e = u.rows(k * self.m_dim, self.m_dim) - &self.ref_u;
            g.rows_mut(k * self.m_dim, self.m_dim).copy_from(&(&self.r * e * 2.0));
        }
        g
    }
}

fn tile(block: &DVector<f64>, times: usize) -> DVector<f64> {
    let d = block.len();
    DVector::from_fn(d * times, |i, _| block[i % d])
}

fn clamp_into(v: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for i in 0..v.len() {
        v[i] = v[i].clamp(lo[i], hi[i]);
    }
}

/// Shared step interface so the closed-loop driver is controller-agnostic.
pub trait StepController {
    fn config(&self) -> &ControlConfig;

    fn solve_step(
        &self,
        x: &DVector<f64>,
        r_stack: &DVector<f64>,
        warm: Option<&StepSolution>,
        settings: &NlpSettings,
    ) -> Result<StepSolution>;
}

// ---------------------------------------------------------------------------
// Efficient (reduced) formulation
// ---------------------------------------------------------------------------

/// Reduced-space controller; caches `Y†` once at construction.
pub struct EfficientController<'a> {
    pred: &'a ProductPredictor,
    cfg: ControlConfig,
    weights: Weights,
    y_pinv: DMatrix<f64>,
}

impl<'a> EfficientController<'a> {
    pub fn new(pred: &'a ProductPredictor, cfg: ControlConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.n != pred.horizon() {
            return Err(Error::InvalidArgument(format!(
                "controller horizon {} does not match the fitted horizon {}",
                cfg.n,
                pred.horizon()
            )));
        }
        if cfg.output_dim() != pred.dataset.output_dim || cfg.input_dim() != pred.dataset.input_dim
        {
            return Err(Error::DimensionMismatch(
                "controller weights do not match plant dimensions".into(),
            ));
        }
        if pred.y_min_sv <= 1e-10 * pred.y_max_sv {
            return Err(Error::RankDeficient(format!(
                "output data matrix is rank deficient (smallest singular value {:.3e}); \
                 the reduced constraint A(x) = Omega(x)*pinv(Y) is not reliable",
                pred.y_min_sv
            )));
        }
        let weights = Weights::new(&cfg);
        let y_pinv = pinv(pred.y(), None)?;
        Ok(EfficientController { pred, cfg, weights, y_pinv })
    }

    /// `A(x) = Ω(x)·Y†` (`Tu × p·N`), evaluated column by column through the
    /// factored operator.
    fn a_matrix(&self, om: &crate::predictor::OmegaOperator) -> Result<DMatrix<f64>> {
        let tu = self.pred.tu();
        let pn = self.y_pinv.ncols();
        let mut a = DMatrix::zeros(tu, pn);
        for j in 0..pn {
            let col = self.pred.apply_omega(om, &self.y_pinv.column(j).clone_owned())?;
            a.set_column(j, &col);
        }
        Ok(a)
    }

    pub fn solve_efficient_step(
        &self,
        x: &DVector<f64>,
        r_stack: &DVector<f64>,
        warm: Option<&StepSolution>,
        settings: &NlpSettings,
    ) -> Result<StepSolution> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let (m_dim, p_dim, n) = (cfg.input_dim(), cfg.output_dim(), cfg.n);
        let (mn, pn) = (m_dim * n, p_dim * n);
        if r_stack.len() != pn {
            return Err(Error::DimensionMismatch(format!(
                "reference window has length {}, expected p·N = {pn}",
                r_stack.len()
            )));
        }

        let om = self.pred.omega(x)?;
        let m_mat = self.pred.m_matrix(&om)?;
        let a_mat = self.a_matrix(&om)?;
        let nb = nullspace_basis(&a_mat, None)?;
        let nd = nb.ncols();

        // decision vector: [u; ξ] plus an output slack block when bounded
        let slack = cfg.y_bounds.is_some();
        let dim = mn + nd + if slack { pn } else { 0 };

        let mut u0 = warm
            .map(|w| w.u_plan.clone())
            .unwrap_or_else(|| tile(&cfg.ref_u, n));
        let u_lo = tile(&cfg.u_min, n);
        let u_hi = tile(&cfg.u_max, n);
        clamp_into(&mut u0, &u_lo, &u_hi);
        // re-project the previous residual onto the current nullspace basis
        let xi0 = match warm {
            Some(w) if nd > 0 && w.g.len() == pn => nb.transpose() * &w.g,
            _ => DVector::zeros(nd),
        };

        let weights = &self.weights;
        let lambda = cfg.lambda;
        let pred = self.pred;
        let predict = |v: &DVector<f64>| -> DVector<f64> {
            let u = v.rows(0, mn).clone_owned();
            let kuv = pred.ku_vector(&u).expect("dimensions fixed at setup");
            let mut y = &m_mat * kuv;
            if nd > 0 {
                y += &nb * v.rows(mn, nd);
            }
            y
        };

        let objective = |v: &DVector<f64>| -> f64 {
            let y = predict(v);
            let u = v.rows(0, mn).clone_owned();
            let xi = v.rows(mn, nd);
            // ‖g̃‖² = ‖ξ‖² because the basis is orthonormal
            weights.output_cost(&y, r_stack)
                + weights.input_cost(&u)
                + lambda * xi.norm_squared()
        };
        let gradient = |v: &DVector<f64>| -> DVector<f64> {
            let y = predict(v);
            let u = v.rows(0, mn).clone_owned();
            let wy = weights.output_grad(&y, r_stack);
            let jku = pred.ku_jacobian(&u).expect("dimensions fixed at setup");
            let mut g = DVector::zeros(dim);
            let gu = jku.transpose() * (m_mat.transpose() * &wy) + weights.input_grad(&u);
            g.rows_mut(0, mn).copy_from(&gu);
            if nd > 0 {
                let gxi = nb.transpose() * &wy + v.rows(mn, nd) * (2.0 * lambda);
                g.rows_mut(mn, nd).copy_from(&gxi);
            }
            g
        };

        let mut lower = DVector::from_element(dim, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(dim, f64::INFINITY);
        lower.rows_mut(0, mn).copy_from(&u_lo);
        upper.rows_mut(0, mn).copy_from(&u_hi);
        let mut initial = DVector::zeros(dim);
        initial.rows_mut(0, mn).copy_from(&u0);
        if nd > 0 {
            initial.rows_mut(mn, nd).copy_from(&xi0);
        }

        let equality = if slack {
            let (y_lo, y_hi) = cfg.y_bounds.as_ref().unwrap();
            lower.rows_mut(mn + nd, pn).copy_from(&tile(y_lo, n));
            upper.rows_mut(mn + nd, pn).copy_from(&tile(y_hi, n));
            let mut s0 = predict(&initial);
            clamp_into(&mut s0, &lower.rows(mn + nd, pn).clone_owned(), &upper.rows(mn + nd, pn).clone_owned());
            initial.rows_mut(mn + nd, pn).copy_from(&s0);
            Some(EqConstraints {
                dim: pn,
                eval: Box::new(|v: &DVector<f64>| predict(v) - v.rows(mn + nd, pn)),
                jacobian: Box::new(|v: &DVector<f64>| {
                    let u = v.rows(0, mn).clone_owned();
                    let jku = pred.ku_jacobian(&u).expect("dimensions fixed at setup");
                    let mut jac = DMatrix::zeros(pn, dim);
                    jac.view_mut((0, 0), (pn, mn)).copy_from(&(&m_mat * jku));
                    if nd > 0 {
                        jac.view_mut((0, mn), (pn, nd)).copy_from(&nb);
                    }
                    jac.view_mut((0, mn + nd), (pn, pn))
                        .copy_from(&(-DMatrix::<f64>::identity(pn, pn)));
                    jac
                }),
            })
        } else {
            None
        };

        let initial_objective = objective(&initial);
        let problem = NlpProblem {
            dim,
            objective: Box::new(objective),
            gradient: Box::new(gradient),
            equality,
            lower,
            upper,
            initial,
        };
        let result = solve_nlp(&problem, settings)?;

        let u_plan = result.v_star.rows(0, mn).clone_owned();
        let g_tilde = if nd > 0 {
            &nb * result.v_star.rows(mn, nd)
        } else {
            DVector::zeros(pn)
        };
        let y_plan = predict(&result.v_star);
        Ok(StepSolution {
            u_plan,
            y_plan,
            g: g_tilde,
            null_dim: nd,
            initial_objective,
            solve_time: start.elapsed().as_secs_f64(),
            result,
        })
    }
}

impl StepController for EfficientController<'_> {
    fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    fn solve_step(
        &self,
        x: &DVector<f64>,
        r_stack: &DVector<f64>,
        warm: Option<&StepSolution>,
        settings: &NlpSettings,
    ) -> Result<StepSolution> {
        self.solve_efficient_step(x, r_stack, warm, settings)
    }
}

// ---------------------------------------------------------------------------
// Full formulation (product or stacked kernel)
// ---------------------------------------------------------------------------

pub enum FullModel<'a> {
    Product(&'a ProductPredictor),
    Stacked(&'a StackedPredictor),
}

/// Full-Gram controller. For the product kernel the `T × T` Gram is
/// materialized and factorized once here; every solver evaluation then pays
/// the `O(T²)` coefficient solve that the reduced formulation avoids.
pub struct FullController<'a> {
    model: FullModel<'a>,
    cfg: ControlConfig,
    weights: Weights,
    fprod: Option<SpdFactorization>,
}

impl<'a> FullController<'a> {
    pub fn new(model: FullModel<'a>, cfg: ControlConfig) -> Result<Self> {
        cfg.validate()?;
        let fprod = match &model {
            FullModel::Product(pred) => {
                if cfg.n != pred.horizon() {
                    return Err(Error::InvalidArgument(format!(
                        "controller horizon {} does not match the fitted horizon {}",
                        cfg.n,
                        pred.horizon()
                    )));
                }
                // jitter lives inside the factor Grams already
                let kprod = crate::kernels::product_gram(pred.ku_jittered(), pred.kx_jittered());
                Some(SpdFactorization::new(&kprod, 0.0)?)
            }
            FullModel::Stacked(sp) => {
                let pn = cfg.output_dim() * cfg.n;
                if sp.y.nrows() != pn {
                    return Err(Error::DimensionMismatch(format!(
                        "stacked outputs have {} rows, controller expects p·N = {pn}",
                        sp.y.nrows()
                    )));
                }
                None
            }
        };
        let weights = Weights::new(&cfg);
        Ok(FullController { model, cfg, weights, fprod })
    }

    fn t(&self) -> usize {
        match &self.model {
            FullModel::Product(p) => p.tu() * p.tx(),
            FullModel::Stacked(s) => s.t(),
        }
    }

    fn y_data(&self) -> &DMatrix<f64> {
        match &self.model {
            FullModel::Product(p) => p.y(),
            FullModel::Stacked(s) => &s.y,
        }
    }

    pub fn solve_full_step(
        &self,
        x: &DVector<f64>,
        r_stack: &DVector<f64>,
        warm: Option<&StepSolution>,
        settings: &NlpSettings,
    ) -> Result<StepSolution> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let (m_dim, n) = (cfg.input_dim(), cfg.n);
        let (mn, pn) = (m_dim * n, cfg.output_dim() * n);
        if r_stack.len() != pn {
            return Err(Error::DimensionMismatch(format!(
                "reference window has length {}, expected p·N = {pn}",
                r_stack.len()
            )));
        }
        let t = self.t();
        let y_data = self.y_data();

        // everything that depends only on the measured state
        let kx_fixed = match &self.model {
            FullModel::Product(p) => Some(p.kx_vector(x)?),
            FullModel::Stacked(_) => None,
        };

        // g(u) = K̃⁻¹·k(u, x): the coefficient solve all evaluations share
        let coeffs = |u: &DVector<f64>| -> DVector<f64> {
            match &self.model {
                FullModel::Product(p) => {
                    let kuv = p.ku_vector(u).expect("dimensions fixed at setup");
                    let kvec = product_kernel_vector(&kuv, kx_fixed.as_ref().unwrap());
                    self.fprod
                        .as_ref()
                        .unwrap()
                        .solve_vec(&kvec)
                        .expect("factorization validated at construction")
                }
                FullModel::Stacked(s) => {
                    let z = s.z_query(u, x);
                    let kz = s.kz_vector(&z).expect("dimensions fixed at setup");
                    s.solve_kz(&kz).expect("factorization validated at fit")
                }
            }
        };
        // (∂k/∂u)ᵀ · w for the chain rule, without materializing T × m·N
        let jac_t_apply = |u: &DVector<f64>, w: &DVector<f64>| -> DVector<f64> {
            match &self.model {
                FullModel::Product(p) => {
                    let kxv = kx_fixed.as_ref().unwrap();
                    let tx = p.tx();
                    let jku = p.ku_jacobian(u).expect("dimensions fixed at setup");
                    let mut s = DVector::zeros(p.tu());
                    for a in 0..p.tu() {
                        let mut acc = 0.0;
                        for c in 0..tx {
                            acc += kxv[c] * w[a * tx + c];
                        }
                        s[a] = acc;
                    }
                    jku.transpose() * s
                }
                FullModel::Stacked(sp) => {
                    let z = sp.z_query(u, x);
                    let jz = sp.kz_jacobian(&z).expect("dimensions fixed at setup");
                    let x_dim = x.len();
                    jz.columns(x_dim, mn).transpose() * w
                }
            }
        };

        let solve_back = |w: &DVector<f64>| -> DVector<f64> {
            match &self.model {
                FullModel::Product(_) => self
                    .fprod
                    .as_ref()
                    .unwrap()
                    .solve_vec(w)
                    .expect("factorization validated at construction"),
                FullModel::Stacked(s) => s.solve_kz(w).expect("factorization validated at fit"),
            }
        };

        let slack = cfg.y_bounds.is_some();
        let dim = mn + if slack { pn } else { 0 };
        let weights = &self.weights;
        let lambda = cfg.lambda;

        let u_lo = tile(&cfg.u_min, n);
        let u_hi = tile(&cfg.u_max, n);
        let mut u0 = warm
            .map(|w| w.u_plan.clone())
            .unwrap_or_else(|| tile(&cfg.ref_u, n));
        clamp_into(&mut u0, &u_lo, &u_hi);

        let objective = |v: &DVector<f64>| -> f64 {
            let u = v.rows(0, mn).clone_owned();
            let g = coeffs(&u);
            let y = y_data * &g;
            weights.output_cost(&y, r_stack)
                + weights.input_cost(&u)
                + lambda * g.norm_squared()
        };
        let gradient = |v: &DVector<f64>| -> DVector<f64> {
            let u = v.rows(0, mn).clone_owned();
            let g = coeffs(&u);
            let y = y_data * &g;
            let wy = weights.output_grad(&y, r_stack);
            // ∂J/∂u = (∂k/∂u)ᵀ · K̃⁻¹ · (Yᵀ·wy + 2λg)
            let adj = solve_back(&(y_data.transpose() * wy + &g * (2.0 * lambda)));
            let mut grad = DVector::zeros(dim);
            grad.rows_mut(0, mn)
                .copy_from(&(jac_t_apply(&u, &adj) + weights.input_grad(&u)));
            grad
        };

        let mut lower = DVector::from_element(dim, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(dim, f64::INFINITY);
        lower.rows_mut(0, mn).copy_from(&u_lo);
        upper.rows_mut(0, mn).copy_from(&u_hi);
        let mut initial = DVector::zeros(dim);
        initial.rows_mut(0, mn).copy_from(&u0);

        let equality = if slack {
            let (y_lo, y_hi) = cfg.y_bounds.as_ref().unwrap();
            lower.rows_mut(mn, pn).copy_from(&tile(y_lo, n));
            upper.rows_mut(mn, pn).copy_from(&tile(y_hi, n));
            let mut s0 = y_data * coeffs(&u0);
            clamp_into(&mut s0, &lower.rows(mn, pn).clone_owned(), &upper.rows(mn, pn).clone_owned());
            initial.rows_mut(mn, pn).copy_from(&s0);
            Some(EqConstraints {
                dim: pn,
                eval: Box::new(|v: &DVector<f64>| {
                    let u = v.rows(0, mn).clone_owned();
                    y_data * coeffs(&u) - v.rows(mn, pn)
                }),
                jacobian: Box::new(|v: &DVector<f64>| {
                    let u = v.rows(0, mn).clone_owned();
                    let mut jac = DMatrix::zeros(pn, dim);
                    // row i of ∂y/∂u = (∂k/∂u)ᵀ K̃⁻¹ Yᵀ eᵢ
                    for i in 0..pn {
                        let adj = solve_back(&y_data.row(i).transpose());
                        jac.view_mut((i, 0), (1, mn))
                            .copy_from(&jac_t_apply(&u, &adj).transpose());
                    }
                    jac.view_mut((0, mn), (pn, pn))
                        .copy_from(&(-DMatrix::<f64>::identity(pn, pn)));
                    jac
                }),
            })
        } else {
            None
        };

        let initial_objective = objective(&initial);
        let problem = NlpProblem {
            dim,
            objective: Box::new(objective),
            gradient: Box::new(gradient),
            equality,
            lower,
            upper,
            initial,
        };
        let result = solve_nlp(&problem, settings)?;

        let u_plan = result.v_star.rows(0, mn).clone_owned();
        let g = coeffs(&u_plan);
        let y_plan = y_data * &g;
        debug_assert_eq!(g.len(), t);
        Ok(StepSolution {
            u_plan,
            y_plan,
            g,
            null_dim: 0,
            initial_objective,
            solve_time: start.elapsed().as_secs_f64(),
            result,
        })
    }
}

impl StepController for FullController<'_> {
    fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    fn solve_step(
        &self,
        x: &DVector<f64>,
        r_stack: &DVector<f64>,
        warm: Option<&StepSolution>,
        settings: &NlpSettings,
    ) -> Result<StepSolution> {
        self.solve_full_step(x, r_stack, warm, settings)
    }
}

// ---------------------------------------------------------------------------
// Model-based NMPC baseline
// ---------------------------------------------------------------------------

/// Single-shooting NMPC over the true plant model with forward sensitivities.
pub struct NmpcController<'a> {
    plant: &'a dyn Plant,
    cfg: ControlConfig,
    weights: Weights,
}

impl<'a> NmpcController<'a> {
    pub fn new(plant: &'a dyn Plant, cfg: ControlConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.output_dim() != plant.output_dim() || cfg.input_dim() != plant.input_dim() {
            return Err(Error::DimensionMismatch(
                "controller weights do not match plant dimensions".into(),
            ));
        }
        let weights = Weights::new(&cfg);
        Ok(NmpcController { plant, cfg, weights })
    }

    /// Rolls the model forward and, when `sens` is true, propagates
    /// `S_{k+1} = A_k·S_k + B_k·E_k` to get `∂y/∂u` blocks.
    fn shoot(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        sens: bool,
    ) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        let plant = self.plant;
        let (n_dim, m_dim, p_dim) = (plant.state_dim(), plant.input_dim(), plant.output_dim());
        let n = self.cfg.n;
        let mn = m_dim * n;
        let mut y = DVector::zeros(p_dim * n);
        let mut jac_blocks = Vec::new();
        let mut s = DMatrix::zeros(n_dim, mn);
        let mut xk = x.clone();
        for k in 0..n {
            let uk = u.rows(k * m_dim, m_dim).clone_owned();
            if sens {
                let a = plant.step_jacobian_x(&xk, &uk);
                let b = plant.step_jacobian_u(&xk, &uk);
                s = a * s;
                s.view_mut((0, k * m_dim), (n_dim, m_dim)).copy_from(&b);
            }
            xk = plant.step(&xk, &uk);
            y.rows_mut(k * p_dim, p_dim).copy_from(&plant.output(&xk));
            if sens {
                jac_blocks.push(plant.output_jacobian(&xk) * &s);
            }
        }
        (y, jac_blocks)
    }

    pub fn solve_nmpc_step(
        &self,
        x: &DVector<f64>,
        r_stack: &DVector<f64>,
        warm: Option<&StepSolution>,
        settings: &NlpSettings,
    ) -> Result<StepSolution> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let (m_dim, p_dim, n) = (cfg.input_dim(), cfg.output_dim(), cfg.n);
        let (mn, pn) = (m_dim * n, p_dim * n);
        if r_stack.len() != pn {
            return Err(Error::DimensionMismatch(format!(
                "reference window has length {}, expected p·N = {pn}",
                r_stack.len()
            )));
        }

        let slack = cfg.y_bounds.is_some();
        let dim = mn + if slack { pn } else { 0 };
        let weights = &self.weights;
        let u_lo = tile(&cfg.u_min, n);
        let u_hi = tile(&cfg.u_max, n);
        let mut u0 = warm
            .map(|w| w.u_plan.clone())
            .unwrap_or_else(|| tile(&cfg.ref_u, n));
        clamp_into(&mut u0, &u_lo, &u_hi);

        let objective = |v: &DVector<f64>| -> f64 {
            let u = v.rows(0, mn).clone_owned();
            let (y, _) = self.shoot(x, &u, false);
            weights.output_cost(&y, r_stack) + weights.input_cost(&u)
        };
        let gradient = |v: &DVector<f64>| -> DVector<f64> {
            let u = v.rows(0, mn).clone_owned();
            let (y, jac_blocks) = self.shoot(x, &u, true);
            let wy = weights.output_grad(&y, r_stack);
            let mut g = DVector::zeros(dim);
            let mut gu = weights.input_grad(&u);
            for (k, jk) in jac_blocks.iter().enumerate() {
                gu += jk.transpose() * wy.rows(k * p_dim, p_dim);
            }
            g.rows_mut(0, mn).copy_from(&gu);
            g
        };

        let mut lower = DVector::from_element(dim, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(dim, f64::INFINITY);
        lower.rows_mut(0, mn).copy_from(&u_lo);
        upper.rows_mut(0, mn).copy_from(&u_hi);
        let mut initial = DVector::zeros(dim);
        initial.rows_mut(0, mn).copy_from(&u0);

        let equality = if slack {
            let (y_lo, y_hi) = cfg.y_bounds.as_ref().unwrap();
            lower.rows_mut(mn, pn).copy_from(&tile(y_lo, n));
            upper.rows_mut(mn, pn).copy_from(&tile(y_hi, n));
            let (mut s0, _) = self.shoot(x, &u0, false);
            clamp_into(&mut s0, &lower.rows(mn, pn).clone_owned(), &upper.rows(mn, pn).clone_owned());
            initial.rows_mut(mn, pn).copy_from(&s0);
            Some(EqConstraints {
                dim: pn,
                eval: Box::new(move |v: &DVector<f64>| {
                    let u = v.rows(0, mn).clone_owned();
                    self.shoot(x, &u, false).0 - v.rows(mn, pn)
                }),
                jacobian: Box::new(move |v: &DVector<f64>| {
                    let u = v.rows(0, mn).clone_owned();
                    let (_, jac_blocks) = self.shoot(x, &u, true);
                    let mut jac = DMatrix::zeros(pn, dim);
                    for (k, jk) in jac_blocks.iter().enumerate() {
                        jac.view_mut((k * p_dim, 0), (p_dim, mn)).copy_from(jk);
                    }
                    jac.view_mut((0, mn), (pn, pn))
                        .copy_from(&(-DMatrix::<f64>::identity(pn, pn)));
                    jac
                }),
            })
        } else {
            None
        };

        let initial_objective = objective(&initial);
        let problem = NlpProblem {
            dim,
            objective: Box::new(objective),
            gradient: Box::new(gradient),
            equality,
            lower,
            upper,
            initial,
        };
        let result = solve_nlp(&problem, settings)?;

        let u_plan = result.v_star.rows(0, mn).clone_owned();
        let (y_plan, _) = self.shoot(x, &u_plan, false);
        Ok(StepSolution {
            u_plan,
            y_plan,
            g: DVector::zeros(0),
            null_dim: 0,
            initial_objective,
            solve_time: start.elapsed().as_secs_f64(),
            result,
        })
    }
}

impl StepController for NmpcController<'_> {
    fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    fn solve_step(
        &self,
        x: &DVector<f64>,
        r_stack: &DVector<f64>,
        warm: Option<&StepSolution>,
        settings: &NlpSettings,
    ) -> Result<StepSolution> {
        self.solve_nmpc_step(x, r_stack, warm, settings)
    }
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

/// Shifts the planned inputs one step (drop the first block, duplicate the
/// last) to warm-start the next solve.
fn shift_plan(sol: &StepSolution, m_dim: usize) -> StepSolution {
    let mut shifted = sol.clone();
    let mn = sol.u_plan.len();
    if mn >= 2 * m_dim {
        let mut u = DVector::zeros(mn);
        u.rows_mut(0, mn - m_dim).copy_from(&sol.u_plan.rows(m_dim, mn - m_dim));
        u.rows_mut(mn - m_dim, m_dim)
            .copy_from(&sol.u_plan.rows(mn - m_dim, m_dim));
        shifted.u_plan = u;
    }
    shifted
}

/// Runs the closed loop for `steps` steps: solve, apply the first input
/// (projected onto the input box), advance the true plant, log. A failed
/// solve falls back to holding the previously applied input; the warm start
/// is kept for the next attempt.
pub fn run_receding_horizon(
    ctrl: &dyn StepController,
    plant: &dyn Plant,
    x0: &DVector<f64>,
    steps: usize,
    settings: &NlpSettings,
) -> Result<TrackingResult> {
    let cfg = ctrl.config();
    let m_dim = cfg.input_dim();
    if steps == 0 {
        return Err(Error::InvalidArgument("tracking run needs at least one step".into()));
    }

    let mut x = x0.clone();
    let mut warm: Option<StepSolution> = None;
    let mut prev_u = cfg.ref_u.clone();
    let mut applied_inputs = Vec::with_capacity(steps);
    let mut measured_outputs = Vec::with_capacity(steps);
    let mut references = Vec::with_capacity(steps);
    let mut solve_times = Vec::with_capacity(steps);
    let mut statuses = Vec::with_capacity(steps);
    let mut failed_steps = Vec::new();
    let mut err_sum = 0.0;

    for k in 0..steps {
        let r_stack = cfg.reference_window(k);
        let r_now = cfg.ref_y.at(k);

        let t0 = Instant::now();
        let attempt = ctrl.solve_step(&x, &r_stack, warm.as_ref(), settings);
        solve_times.push(t0.elapsed().as_secs_f64());

        let mut u_apply = match &attempt {
            Ok(sol) => sol.u_plan.rows(0, m_dim).clone_owned(),
            Err(_) => prev_u.clone(),
        };
        // the plant only ever sees admissible inputs
        clamp_into(&mut u_apply, &cfg.u_min, &cfg.u_max);

        match attempt {
            Ok(sol) => {
                statuses.push(Some(sol.result.status));
                warm = Some(shift_plan(&sol, m_dim));
            }
            Err(_) => {
                statuses.push(None);
                failed_steps.push(k);
            }
        }

        x = plant.step(&x, &u_apply);
        let xn = x.amax();
        if !xn.is_finite() || xn > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step: k, norm: xn, limit: DIVERGENCE_LIMIT });
        }
        let y = plant.output(&x);
        err_sum += (&y - &r_now).norm();

        prev_u = u_apply.clone();
        applied_inputs.push(u_apply);
        measured_outputs.push(y);
        references.push(r_now);
    }

    let mean_solve_time = solve_times.iter().sum::<f64>() / steps as f64;
    Ok(TrackingResult {
        applied_inputs,
        measured_outputs,
        references,
        mean_tracking_error: err_sum / steps as f64,
        mean_solve_time,
        solve_times,
        statuses,
        failed_steps,
    })
}

/// Mean multi-step prediction error over fresh validation rollouts:
/// `(1/count) · Σ (1/N)·‖ŷ − y‖₂`.
pub fn mean_prediction_error(
    predict: &dyn Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
    plant: &dyn Plant,
    queries: &[(DVector<f64>, DVector<f64>)],
    horizon: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no validation queries".into()));
    }
    let m_dim = plant.input_dim();
    let mut total = 0.0;
    for (u_stacked, x) in queries {
        let predicted = predict(u_stacked, x)?;
        let traj = crate::plant::simulate(plant, x, &crate::datagen::unstack_vector(u_stacked, m_dim))?;
        let truth = crate::datagen::stack_vectors(&traj.outputs);
        total += (predicted - truth).norm() / horizon as f64;
    }
    Ok(total / queries.len() as f64)
}
