//! Damped nonlinear least squares.
//!
//! A Levenberg-Marquardt minimizer for small dense problems. Each step is
//! computed from the singular value decomposition of the column-scaled
//! Jacobian, so parameters whose sensitivities differ by many orders of
//! magnitude (an ionization energy near 1e9 MHz next to a sixth-order defect
//! coefficient) are handled without forming the normal equations.
//!
//! Damping follows the classic schedule: the initial damping is
//! `1e-3 * trace(J^T J) / k` in the scaled space, it grows ten-fold on every
//! rejected trial and shrinks ten-fold on every accepted one.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type ResidualFn<'a> = dyn Fn(&[f64]) -> Vec<f64> + 'a;
type JacobianFn<'a> = dyn Fn(&[f64]) -> DMatrix<f64> + 'a;

const DAMPING_UP: f64 = 10.0;
const DAMPING_DOWN: f64 = 10.0;
const INITIAL_DAMPING_FACTOR: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e300;

/// How parameter covariances are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// `s^2 (J^T J)^-1` with `s^2 = |r|^2 / (m - k)`.
    #[default]
    Scaled,
    /// `(J^T J)^-1`; appropriate when the weights are trusted `1/sigma`.
    TrustedSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub absolute_tolerance: f64,
    /// Forward-difference step relative to `max(|p_i|, 1)`.
    pub finite_difference_step: f64,
    pub covariance: CovarianceMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            relative_tolerance: 1e-10,
            absolute_tolerance: 1e-12,
            finite_difference_step: 1e-7,
            covariance: CovarianceMode::Scaled,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("relative_tolerance", self.relative_tolerance),
            ("absolute_tolerance", self.absolute_tolerance),
            ("finite_difference_step", self.finite_difference_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A least-squares problem: a residual vector as a function of the parameters.
pub struct FitProblem<'a> {
    residuals: Box<ResidualFn<'a>>,
    jacobian: Option<Box<JacobianFn<'a>>>,
    parameter_count: usize,
    residual_count: usize,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
    weights: Option<Vec<f64>>,
}

impl std::fmt::Debug for FitProblem<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FitProblem")
            .field("parameter_count", &self.parameter_count)
            .field("residual_count", &self.residual_count)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .field("weighted", &self.weights.is_some())
            .finish()
    }
}

impl<'a> FitProblem<'a> {
    pub fn new<F>(parameter_count: usize, residual_count: usize, residuals: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + 'a,
    {
        if parameter_count == 0 {
            return Err(Error::InvalidInput("a fit needs at least one parameter".into()));
        }
        if residual_count < parameter_count {
            return Err(Error::InsufficientData { available: residual_count, required: parameter_count });
        }
        Ok(FitProblem {
            residuals: Box::new(residuals),
            jacobian: None,
            parameter_count,
            residual_count,
            lower: None,
            upper: None,
            weights: None,
        })
    }

    /// Supply an analytic Jacobian of the unweighted residuals (`m x k`).
    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(&[f64]) -> DMatrix<f64> + 'a,
    {
        self.jacobian = Some(Box::new(jacobian));
        self
    }

    /// Per-residual weights, normally `1/sigma`.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.residual_count {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} residuals",
                weights.len(),
                self.residual_count
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidInput(format!("weight {w} is not finite and positive")));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Box constraints; trial points are projected onto the box.
    pub fn with_bounds(mut self, lower: Option<Vec<f64>>, upper: Option<Vec<f64>>) -> Result<Self> {
        for b in [&lower, &upper].into_iter().flatten() {
            if b.len() != self.parameter_count {
                return Err(Error::InvalidInput(format!("{} bounds for {} parameters", b.len(), self.parameter_count)));
            }
        }
        if let (Some(lo), Some(hi)) = (&lower, &upper) {
            if lo.iter().zip(hi).any(|(l, h)| l > h) {
                return Err(Error::InvalidInput("lower bound above upper bound".into()));
            }
        }
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_count
    }

    pub fn residual_count(&self) -> usize {
        self.residual_count
    }

    fn project(&self, p: &mut [f64]) {
        if let Some(lo) = &self.lower {
            p.iter_mut().zip(lo).for_each(|(v, l)| *v = v.max(*l));
        }
        if let Some(hi) = &self.upper {
            p.iter_mut().zip(hi).for_each(|(v, h)| *v = v.min(*h));
        }
    }

    /// Jacobian with the columns of parameters held at a bound zeroed: a
    /// parameter is held when it sits on a bound and descent points outward.
    fn free_jacobian(&self, p: &[f64], jac: &DMatrix<f64>, r: &[f64]) -> Option<DMatrix<f64>> {
        if self.lower.is_none() && self.upper.is_none() {
            return None;
        }
        let gradient = jac.tr_mul(&DVector::from_column_slice(r));
        let at = |b: &Option<Vec<f64>>, i: usize| b.as_ref().is_some_and(|b| p[i] == b[i]);
        let held: Vec<usize> = (0..p.len())
            .filter(|&i| (at(&self.lower, i) && gradient[i] > 0.0) || (at(&self.upper, i) && gradient[i] < 0.0))
            .collect();
        if held.is_empty() {
            return None;
        }
        let mut free = jac.clone();
        for i in held {
            free.column_mut(i).fill(0.0);
        }
        Some(free)
    }

    /// Residuals multiplied by the weights, if any.
    pub fn weighted_residuals(&self, p: &[f64]) -> Vec<f64> {
        let mut r = (self.residuals)(p);
        if let Some(w) = &self.weights {
            r.iter_mut().zip(w).for_each(|(r, w)| *r *= w);
        }
        r
    }

    fn weighted_jacobian(&self, p: &[f64], base: &[f64], step: f64) -> Result<DMatrix<f64>> {
        match &self.jacobian {
            Some(jac) => {
                let mut j = jac(p);
                if j.nrows() != self.residual_count || j.ncols() != self.parameter_count {
                    return Err(Error::InvalidInput(format!(
                        "analytic Jacobian is {}x{}, expected {}x{}",
                        j.nrows(),
                        j.ncols(),
                        self.residual_count,
                        self.parameter_count
                    )));
                }
                if let Some(w) = &self.weights {
                    for (i, w) in w.iter().enumerate() {
                        j.row_mut(i).scale_mut(*w);
                    }
                }
                if let Some((idx, _)) = j.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::Evaluation { index: idx / self.residual_count });
                }
                Ok(j)
            }
            None => forward_difference(|q| self.weighted_residuals(q), p, base, step),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub parameters: Vec<f64>,
    pub parameter_errors: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Euclidean norm of the weighted residual vector at the solution.
    pub residual_norm: f64,
    /// Weighted residuals at the solution.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective (weighted sum of squares) at the start and after every accepted step.
    pub cost_history: Vec<f64>,
}

/// Forward-difference Jacobian of `f` at `params`.
///
/// The step for parameter `i` is `relative_step * max(|p_i|, 1)`.
pub fn numerical_jacobian<F>(f: F, params: &[f64], relative_step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(relative_step.is_finite() && relative_step > 0.0) {
        return Err(Error::InvalidInput(format!("relative step {relative_step} must be positive")));
    }
    let base = f(params);
    if let Some(i) = base.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidStart { index: i });
    }
    forward_difference(f, params, &base, relative_step)
}

fn forward_difference<F>(f: F, params: &[f64], base: &[f64], relative_step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = base.len();
    let mut jac = DMatrix::zeros(m, params.len());
    let mut probe = params.to_vec();
    for j in 0..params.len() {
        let h = relative_step * params[j].abs().max(1.0);
        probe[j] = params[j] + h;
        // the realised step, not the requested one
        let h = probe[j] - params[j];
        let shifted = f(&probe);
        probe[j] = params[j];
        if shifted.len() != m || shifted.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation { index: j });
        }
        for i in 0..m {
            jac[(i, j)] = (shifted[i] - base[i]) / h;
        }
    }
    Ok(jac)
}

/// SVD of the Jacobian after scaling every column to unit norm.
struct ScaledSvd {
    scale: DVector<f64>,
    u: DMatrix<f64>,
    singular: DVector<f64>,
    v: DMatrix<f64>,
}

impl ScaledSvd {
    fn new(jacobian: &DMatrix<f64>) -> Self {
        let k = jacobian.ncols();
        let mut scaled = jacobian.clone();
        let mut scale = DVector::from_element(k, 1.0);
        for j in 0..k {
            let norm = jacobian.column(j).norm();
            if norm > 0.0 && norm.is_finite() {
                scale[j] = norm;
                scaled.column_mut(j).unscale_mut(norm);
            }
        }
        let svd = SVD::new(scaled, true, true);
        ScaledSvd {
            scale,
            u: svd.u.expect("U requested"),
            singular: svd.singular_values,
            v: svd.v_t.expect("V^T requested").transpose(),
        }
    }

    fn rank_threshold(&self) -> f64 {
        let smax = self.singular.max();
        smax * (self.u.nrows().max(self.v.nrows()) as f64) * f64::EPSILON
    }

    /// Unit vector (in parameter space) along the weakest direction, if the
    /// scaled Jacobian is numerically rank deficient.
    fn null_direction(&self) -> Option<Vec<f64>> {
        let (imin, smin) = self.singular.argmin();
        if smin > self.rank_threshold() && smin > 0.0 {
            return None;
        }
        let mut dir: DVector<f64> = self.v.column(imin).component_div(&self.scale);
        let norm = dir.norm();
        if norm > 0.0 {
            dir /= norm;
        }
        Some(dir.iter().copied().collect())
    }

    /// `(J^T J)^-1` in the original (unscaled) parameters.
    fn inverse_normal(&self) -> DMatrix<f64> {
        let k = self.v.nrows();
        let mut inv_s2 = DMatrix::zeros(k, k);
        for (i, s) in self.singular.iter().enumerate() {
            inv_s2[(i, i)] = 1.0 / (s * s);
        }
        let mut c = &self.v * inv_s2 * self.v.transpose();
        for i in 0..k {
            for j in 0..k {
                c[(i, j)] /= self.scale[i] * self.scale[j];
            }
        }
        symmetrize(c)
    }

    /// Damped step `-(J^T J + lambda D^2)^-1 J^T r` for the scaled problem.
    fn step(&self, projected: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let k = self.v.nrows();
        let mut coeffs = DVector::zeros(self.singular.len());
        for (i, s) in self.singular.iter().enumerate() {
            let denom = s * s + lambda;
            if denom > 0.0 {
                coeffs[i] = -s * projected[i] / denom;
            }
        }
        let scaled_step = &self.v * coeffs;
        DVector::from_iterator(k, scaled_step.iter().zip(self.scale.iter()).map(|(d, s)| d / s))
    }
}

fn symmetrize(c: DMatrix<f64>) -> DMatrix<f64> {
    (&c + c.transpose()) * 0.5
}

/// Parameter covariance at a least-squares solution.
///
/// In [`CovarianceMode::Scaled`] the result is `s^2 (J^T J)^-1` with
/// `s^2 = |r|^2 / (m - k)`. A perfect fit gives `s^2 = 0`; a square system
/// with nonzero residuals falls back to `s^2 = 1`.
/// [`CovarianceMode::TrustedSigma`] returns `(J^T J)^-1`.
pub fn parameter_covariance(jacobian: &DMatrix<f64>, residuals: &[f64], mode: CovarianceMode) -> Result<DMatrix<f64>> {
    let (m, k) = jacobian.shape();
    if residuals.len() != m {
        return Err(Error::InvalidInput(format!("{} residuals for a {m}x{k} Jacobian", residuals.len())));
    }
    if m < k {
        return Err(Error::InsufficientData { available: m, required: k });
    }
    let svd = ScaledSvd::new(jacobian);
    if let Some(direction) = svd.null_direction() {
        return Err(Error::Degenerate { direction });
    }
    let inverse = svd.inverse_normal();
    match mode {
        CovarianceMode::TrustedSigma => Ok(inverse),
        CovarianceMode::Scaled => {
            let rss: f64 = residuals.iter().map(|r| r * r).sum();
            let dof = m - k;
            // a square system has no scatter to scale by
            let s2 = match (dof, rss == 0.0) {
                (_, true) => 0.0,
                (0, false) => 1.0,
                _ => rss / dof as f64,
            };
            Ok(inverse * s2)
        }
    }
}

fn sum_squares(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn step_is_small(step: &[f64], x: &[f64], options: &FitOptions) -> bool {
    step.iter().zip(x).all(|(d, x)| d.abs() <= options.relative_tolerance * x.abs() + options.absolute_tolerance)
}

/// Minimize the weighted sum of squared residuals starting from `initial`.
///
/// Running out of iterations is not an error: the result comes back with
/// `converged == false`.
pub fn minimize_least_squares(problem: &FitProblem<'_>, initial: &[f64], options: &FitOptions) -> Result<FitResult> {
    options.validate()?;
    let k = problem.parameter_count;
    if initial.len() != k {
        return Err(Error::InvalidInput(format!(
            "initial point has {} entries, problem has {k} parameters",
            initial.len()
        )));
    }
    if let Some(i) = initial.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("initial parameter {i} is not finite")));
    }

    let mut x = initial.to_vec();
    problem.project(&mut x);
    let mut r = problem.weighted_residuals(&x);
    if r.len() != problem.residual_count {
        return Err(Error::InvalidInput(format!(
            "residual function returned {} values, expected {}",
            r.len(),
            problem.residual_count
        )));
    }
    if let Some(i) = r.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidStart { index: i });
    }
    let mut cost = sum_squares(&r);
    let mut cost_history = vec![cost];
    let mut jac = problem.weighted_jacobian(&x, &r, options.finite_difference_step)?;
    let mut lambda: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_decrease = 0.0;
    let atol2 = options.absolute_tolerance * options.absolute_tolerance;

    'outer: loop {
        if cost <= atol2 {
            converged = true;
            break;
        }
        let svd = match problem.free_jacobian(&x, &jac, &r) {
            Some(free) => ScaledSvd::new(&free),
            None => ScaledSvd::new(&jac),
        };
        let projected = svd.u.tr_mul(&DVector::from_column_slice(&r));
        // undamped Gauss-Newton step: if it is already below tolerance we are done
        let gauss_newton = svd.step(&projected, 0.0);
        if last_decrease <= options.relative_tolerance && step_is_small(gauss_newton.as_slice(), &x, options) {
            // take the final undamped step when it still helps
            let mut trial: Vec<f64> = x.iter().zip(gauss_newton.iter()).map(|(x, d)| x + d).collect();
            problem.project(&mut trial);
            let r_trial = problem.weighted_residuals(&trial);
            if r_trial.iter().all(|v| v.is_finite()) {
                let reduction: f64 = r.iter().zip(&r_trial).map(|(a, b)| (a - b) * (a + b)).sum();
                if reduction > 0.0 {
                    x = trial;
                    r = r_trial;
                    cost = sum_squares(&r).min(cost);
                    cost_history.push(cost);
                    jac = problem.weighted_jacobian(&x, &r, options.finite_difference_step)?;
                }
            }
            converged = true;
            break;
        }
        if iterations >= options.max_iterations {
            break;
        }
        iterations += 1;
        let lam = lambda.get_or_insert_with(|| {
            let trace: f64 = svd.singular.iter().map(|s| s * s).sum();
            (INITIAL_DAMPING_FACTOR * trace / k as f64).max(f64::MIN_POSITIVE)
        });

        loop {
            let step = svd.step(&projected, *lam);
            let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(x, d)| x + d).collect();
            problem.project(&mut trial);
            let taken: Vec<f64> = trial.iter().zip(&x).map(|(t, x)| t - x).collect();
            let r_trial = problem.weighted_residuals(&trial);
            let finite = r_trial.len() == r.len() && r_trial.iter().all(|v| v.is_finite());
            // sum of (r - r')(r + r') resolves reductions far below the ulp of the cost
            let reduction =
                if finite { r.iter().zip(&r_trial).map(|(a, b)| (a - b) * (a + b)).sum() } else { f64::NEG_INFINITY };

            if reduction > 0.0 {
                last_decrease = reduction / cost;
                x = trial;
                r = r_trial;
                // accepted on the precise reduction; keep the recorded value monotone
                cost = sum_squares(&r).min(cost);
                cost_history.push(cost);
                *lam /= DAMPING_DOWN;
                jac = problem.weighted_jacobian(&x, &r, options.finite_difference_step)?;
                continue 'outer;
            }

            // No decrease. Once the damped step is below tolerance the point is
            // stationary to working precision.
            if step_is_small(&taken, &x, options) {
                converged = true;
                break 'outer;
            }
            *lam *= DAMPING_UP;
            if *lam > MAX_DAMPING {
                break 'outer;
            }
        }
    }

    let covariance = parameter_covariance(&jac, &r, options.covariance)?;
    let parameter_errors = covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(FitResult {
        parameters: x,
        parameter_errors,
        covariance,
        residual_norm: cost.sqrt(),
        residuals: r,
        iterations,
        converged,
        cost_history,
    })
}
