//! Small dense log-barrier interior point solver.
//!
//! Minimizes a smooth convex objective subject to constraints of the form
//!
//! ```text
//! g(x) = Σ_j (f_jᵀ x)² + aᵀ x - b  ≤ 0
//! Eᵀ x = e
//! ```
//!
//! Every quadratic the auction needs (transformer, line, budget) has a
//! rank-one or rank-two Hessian, so constraints keep their factors instead
//! of a dense matrix.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub factors: Vec<DVector<f64>>,
    pub linear: DVector<f64>,
    pub bound: f64,
}

impl Constraint {
    pub fn linear(linear: DVector<f64>, bound: f64) -> Self {
        Self {
            factors: Vec::new(),
            linear,
            bound,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let quad: f64 = self.factors.iter().map(|f| f.dot(x).powi(2)).sum();
        quad + self.linear.dot(x) - self.bound
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = self.linear.clone();
        for f in &self.factors {
            g.axpy(2.0 * f.dot(x), f, 1.0);
        }
        g
    }

    /// Adds `scale · ∇²g` to `h`.
    fn add_hessian(&self, h: &mut DMatrix<f64>, scale: f64) {
        for f in &self.factors {
            h.ger(2.0 * scale, f, f, 1.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equality {
    pub row: DVector<f64>,
    pub rhs: f64,
}

/// A twice differentiable convex function to minimize.
pub trait Objective {
    /// `None` outside the function's domain.
    fn value(&self, x: &DVector<f64>) -> Option<f64>;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    pub t0: f64,
    pub mu: f64,
    /// Target for `1 / t`, the complementarity product of every constraint.
    pub complementarity_tol: f64,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            t0: 1.0,
            mu: 12.0,
            complementarity_tol: 1e-8,
            newton_tol: 1e-12,
            max_newton: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktResidual {
    /// `‖∇f + Σλ∇g + Eᵀν‖∞` over the largest of its terms.
    pub stationarity: f64,
    pub complementarity: f64,
    pub primal: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.complementarity).max(self.primal)
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub x: DVector<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub multipliers: Vec<f64>,
    pub newton_steps: usize,
    pub kkt: KktResidual,
}

fn max_violation(constraints: &[Constraint], x: &DVector<f64>) -> f64 {
    constraints
        .iter()
        .map(|c| c.eval(x))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `[H Eᵀ; E 0] [dx; w] = [-g; 0]` and returns `(dx, g + Eᵀw)`.
fn newton_direction(
    h: DMatrix<f64>,
    grad: &DVector<f64>,
    equalities: &[Equality],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = grad.len();
    if equalities.is_empty() {
        if let Some(chol) = h.clone().cholesky() {
            return Some((chol.solve(&(-grad)), grad.clone()));
        }
        // Rank-deficient Hessian (e.g. purely linear constraints in phase I):
        // a small Levenberg shift restores definiteness.
        let shift = 1e-10 * h.diagonal().amax().max(1.0);
        let mut shifted = h;
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
        return shifted.cholesky().map(|c| (c.solve(&(-grad)), grad.clone()));
    }
    let m = equalities.len();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    for (i, eq) in equalities.iter().enumerate() {
        for j in 0..n {
            kkt[(n + i, j)] = eq.row[j];
            kkt[(j, n + i)] = eq.row[j];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-grad));
    let sol = kkt.lu().solve(&rhs)?;
    let mut reduced = grad.clone();
    for (i, eq) in equalities.iter().enumerate() {
        reduced.axpy(sol[n + i], &eq.row, 1.0);
    }
    Some((sol.rows(0, n).into_owned(), reduced))
}

struct Centering<'a, O: Objective> {
    objective: &'a O,
    constraints: &'a [Constraint],
    equalities: &'a [Equality],
    t: f64,
}

impl<O: Objective> Centering<'_, O> {
    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        let mut barrier = 0.0;
        for c in self.constraints {
            let g = c.eval(x);
            if !(g < 0.0) {
                return None;
            }
            barrier -= (-g).ln();
        }
        Some(self.t * self.objective.value(x)? + barrier)
    }

    fn grad_hess(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut grad = self.objective.gradient(x) * self.t;
        let mut hess = self.objective.hessian(x) * self.t;
        for c in self.constraints {
            let g = c.eval(x);
            let dg = c.gradient(x);
            grad.axpy(-1.0 / g, &dg, 1.0);
            hess.ger(1.0 / (g * g), &dg, &dg, 1.0);
            c.add_hessian(&mut hess, -1.0 / g);
        }
        (grad, hess)
    }

    /// Directional derivative of the centering objective along `dx`.
    fn slope(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        let mut d = self.t * self.objective.gradient(x).dot(dx);
        for c in self.constraints {
            d -= c.gradient(x).dot(dx) / c.eval(x);
        }
        d
    }

    /// Damped Newton until the decrement drops below `tol`. Returns the
    /// number of steps taken.
    fn center(&self, x: &mut DVector<f64>, tol: f64, max_steps: usize) -> Result<usize> {
        let mut current = self.value(x).ok_or_else(|| Error::NonConvergence {
            iterations: 0,
            reason: "centering started outside the barrier domain".into(),
            residual: f64::INFINITY,
            last_iterate: x.as_slice().to_vec(),
        })?;
        for step in 0..max_steps {
            let (grad, hess) = self.grad_hess(x);
            let (dx, reduced) = newton_direction(hess, &grad, self.equalities).ok_or_else(|| {
                Error::NonConvergence {
                    iterations: step,
                    reason: "singular Newton system".into(),
                    residual: grad.amax(),
                    last_iterate: x.as_slice().to_vec(),
                }
            })?;
            let decrement = -grad.dot(&dx);
            // The decrement alone hides gradient components along stiff
            // barrier directions at large t, which would skew the multipliers.
            let stationary = reduced.amax() <= 1e-9 * self.t.max(1.0);
            if (decrement / 2.0 <= tol && stationary) || !decrement.is_finite() || decrement <= 0.0 {
                return Ok(step);
            }
            // Inside the quadratic convergence region the full step is taken
            // whenever it stays strictly feasible; objective differences are
            // below floating point resolution there.
            if decrement < 1e-6 {
                let trial = &*x + &dx;
                if let Some(v) = self.value(&trial) {
                    *x = trial;
                    current = v;
                    continue;
                }
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..80 {
                let trial = &*x + &dx * alpha;
                if let Some(v) = self.value(&trial) {
                    // Value comparisons lose resolution when t f is large; a
                    // non-positive directional derivative at the trial point
                    // also certifies descent along a convex line.
                    if v <= current - 0.25 * alpha * decrement || self.slope(&trial, &dx) <= 0.0 {
                        *x = trial;
                        current = v;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // No progress representable in floating point: centered as
                // well as the arithmetic allows.
                return Ok(step);
            }
        }
        Ok(max_steps)
    }
}

/// Finds a point with every constraint strictly negative, starting from a
/// point that satisfies the equalities.
pub fn find_interior_point(
    constraints: &[Constraint],
    equalities: &[Equality],
    start: &DVector<f64>,
) -> Result<DVector<f64>> {
    if max_violation(constraints, start) < 0.0 {
        return Ok(start.clone());
    }
    let n = start.len();
    // Auxiliary problem in (x, s): minimize s subject to g_i(x) - s ≤ 0.
    let lifted: Vec<Constraint> = constraints
        .iter()
        .map(|c| {
            let mut linear = c.linear.clone().resize_vertically(n + 1, 0.0);
            linear[n] = -1.0;
            Constraint {
                factors: c
                    .factors
                    .iter()
                    .map(|f| f.clone().resize_vertically(n + 1, 0.0))
                    .collect(),
                linear,
                bound: c.bound,
            }
        })
        .collect();
    let lifted_eq: Vec<Equality> = equalities
        .iter()
        .map(|e| Equality {
            row: e.row.clone().resize_vertically(n + 1, 0.0),
            rhs: e.rhs,
        })
        .collect();
    struct Slack(usize);
    impl Objective for Slack {
        fn value(&self, x: &DVector<f64>) -> Option<f64> {
            Some(x[self.0])
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            let mut g = DVector::zeros(x.len());
            g[self.0] = 1.0;
            g
        }
        fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(x.len(), x.len())
        }
    }
    let objective = Slack(n);
    let mut z = start.clone().resize_vertically(n + 1, 0.0);
    z[n] = max_violation(constraints, start).max(0.0) + 1.0;
    let mut t = 1.0;
    for _ in 0..60 {
        let centering = Centering {
            objective: &objective,
            constraints: &lifted,
            equalities: &lifted_eq,
            t,
        };
        // A few Newton steps per stage are enough: the stage is only a
        // vehicle for driving s below zero.
        let mut steps_left = 200;
        while steps_left > 0 {
            let taken = centering.center(&mut z, 1e-10, 1)?;
            steps_left -= 1;
            let x = z.rows(0, n).into_owned();
            if max_violation(constraints, &x) < 0.0 {
                return Ok(x);
            }
            if taken == 0 {
                break;
            }
        }
        if (lifted.len() as f64) / t < 1e-13 {
            break;
        }
        t *= 10.0;
    }
    Err(Error::InfeasibleRegion(format!(
        "constraint set has no strictly feasible point (best max residual {:.3e})",
        max_violation(constraints, &z.rows(0, n).into_owned())
    )))
}

/// Least-squares fit of `∇f + Σ λ_i ∇g_i + Eᵀν = 0` over the multipliers of
/// the listed constraints and all equalities; the others keep `fixed`.
fn fit_multipliers(
    grad: &DVector<f64>,
    constraints: &[Constraint],
    equalities: &[Equality],
    x: &DVector<f64>,
    fixed: &[f64],
    free: &[usize],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut rhs = -grad.clone();
    for (i, c) in constraints.iter().enumerate() {
        if !free.contains(&i) {
            rhs.axpy(-fixed[i], &c.gradient(x), 1.0);
        }
    }
    let columns: Vec<DVector<f64>> = free
        .iter()
        .map(|i| constraints[*i].gradient(x))
        .chain(equalities.iter().map(|q| q.row.clone()))
        .collect();
    let mut lambda = fixed.to_vec();
    if columns.is_empty() {
        return Some((lambda, Vec::new()));
    }
    let sol = DMatrix::from_columns(&columns).svd(true, true).solve(&rhs, 1e-12).ok()?;
    for (k, i) in free.iter().enumerate() {
        lambda[*i] = sol[k];
    }
    Some((lambda, sol.rows(free.len(), equalities.len()).iter().copied().collect()))
}

/// Minimizes `objective` over the constraint set from a strictly feasible
/// start.
pub fn minimize<O: Objective>(
    objective: &O,
    constraints: &[Constraint],
    equalities: &[Equality],
    start: DVector<f64>,
    options: &BarrierOptions,
) -> Result<BarrierSolution> {
    let mut x = start;
    let mut t = options.t0;
    let mut total = 0;
    loop {
        let centering = Centering {
            objective,
            constraints,
            equalities,
            t,
        };
        total += centering.center(&mut x, options.newton_tol, options.max_newton)?;
        if constraints.is_empty() || 1.0 / t <= options.complementarity_tol {
            break;
        }
        if total >= options.max_newton * 20 {
            return Err(Error::NonConvergence {
                iterations: total,
                reason: "barrier parameter did not reach its target".into(),
                residual: 1.0 / t,
                last_iterate: x.as_slice().to_vec(),
            });
        }
        t *= options.mu;
    }

    let barrier_estimate: Vec<f64> = constraints.iter().map(|c| -1.0 / (t * c.eval(&x))).collect();
    let grad = objective.gradient(&x);
    // `-1 / (t g)` loses accuracy when `g` is within rounding of zero, so the
    // multipliers of nearly active constraints are re-fitted; the barrier
    // values stay if the fit turns negative. Steep constraints count as
    // nearly active by distance rather than by value.
    let active: Vec<usize> = constraints
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let reach = c.gradient(&x).norm() * (1.0 + x.amax());
            -c.eval(&x) <= 1e-6 * (1.0 + c.bound.abs()) || -c.eval(&x) <= 1e-8 * reach
        })
        .map(|(i, _)| i)
        .collect();
    let (multipliers, nu) =
        match fit_multipliers(&grad, constraints, equalities, &x, &barrier_estimate, &active) {
            Some((l, nu)) if l.iter().all(|v| *v >= 0.0) => (l, nu),
            _ => fit_multipliers(&grad, constraints, equalities, &x, &barrier_estimate, &[])
                .unwrap_or((barrier_estimate.clone(), vec![0.0; equalities.len()])),
        };
    // Stationarity is measured relative to the largest term of the sum.
    let mut scale = grad.amax().max(1.0);
    let mut residual = grad;
    for (c, lambda) in constraints.iter().zip(&multipliers) {
        let g = c.gradient(&x) * *lambda;
        scale = scale.max(g.amax());
        residual += g;
    }
    for (q, n) in equalities.iter().zip(&nu) {
        scale = scale.max((&q.row * *n).amax());
        residual.axpy(*n, &q.row, 1.0);
    }
    let complementarity = constraints
        .iter()
        .zip(&multipliers)
        .map(|(c, l)| (l * c.eval(&x)).abs())
        .fold(0.0, f64::max);
    let primal = constraints
        .iter()
        .map(|c| c.eval(&x).max(0.0))
        .chain(equalities.iter().map(|q| (q.row.dot(&x) - q.rhs).abs()))
        .fold(0.0, f64::max);
    Ok(BarrierSolution {
        kkt: KktResidual {
            stationarity: residual.amax() / scale,
            complementarity,
            primal,
        },
        x,
        multipliers,
        newton_steps: total,
    })
}
