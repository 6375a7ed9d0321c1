//! The per-step optimization layer
//!
//! `x = argmin_x l(x, c) + λᵀ g(x, c)  s.t.  g(x, c) ≤ b,  x_min ≤ x ≤ x_max`
//!
//! and the implicit derivatives of its solution with respect to `λ`, `b`
//! and `c`, obtained by differentiating the KKT system. Box bounds join the
//! KKT system as extra rows when active; they carry no `λ` or `b` coupling.

use crate::error::{Error, Result};
use crate::linalg::{pinv_solve, robust_inverse, smallest_singular_value, solve_spd};
use crate::problem::{FairnessFamily, Matrix, Problem, Vector};

/// Relative slack under which a constraint counts as active.
pub const ACTIVE_TOL: f64 = 1e-7;
/// Dual magnitude under which an active constraint is flagged degenerate.
pub const DUAL_TOL: f64 = 1e-8;
/// Minimum singular value of the stacked active gradients.
pub const INDEPENDENCE_TOL: f64 = 1e-8;

/// A constraint of the per-step problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintRef {
    /// `g_m(x, c) ≤ b_m`
    Resource(usize),
    /// `x_i ≥ lower_i`
    Lower(usize),
    /// `x_i ≤ upper_i`
    Upper(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptSolution {
    pub x: Vector,
    /// Duals of the resource constraints.
    pub mu: Vector,
    pub lower_dual: Vector,
    pub upper_dual: Vector,
    pub active_set: Vec<ConstraintRef>,
    pub kkt_residual: f64,
}

impl OptSolution {
    pub fn dual(&self, constraint: ConstraintRef) -> f64 {
        match constraint {
            ConstraintRef::Resource(m) => self.mu[m],
            ConstraintRef::Lower(i) => self.lower_dual[i],
            ConstraintRef::Upper(i) => self.upper_dual[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_stages: usize,
    pub barrier_growth: f64,
    pub max_newton_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_stages: 100,
            barrier_growth: 10.0,
            max_newton_steps: 200,
        }
    }
}

fn validate_inputs<P: Problem + ?Sized>(problem: &P, c: &[f64], lambda: &Vector, b: &Vector) -> Result<()> {
    let dims = problem.dims();
    problem.validate_context(c)?;
    if lambda.len() != dims.resources || b.len() != dims.resources {
        return Err(Error::Invalid(format!(
            "expected {} multipliers and budgets, got {} and {}",
            dims.resources,
            lambda.len(),
            b.len()
        )));
    }
    if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Invalid(format!("multipliers must be finite and nonnegative: {:?}", lambda.as_slice())));
    }
    if b.iter().any(|v| v.is_nan()) {
        return Err(Error::Invalid("budget is NaN".into()));
    }
    Ok(())
}

/// Solve the per-step layer, using the family's closed form when it has one.
pub fn solve_opt_layer<P: Problem + ?Sized>(problem: &P, c: &[f64], lambda: &Vector, b: &Vector) -> Result<OptSolution> {
    validate_inputs(problem, c, lambda, b)?;
    match problem.closed_form_step(c, lambda, b) {
        Some(sol) => sol,
        None => solve_barrier(problem, c, lambda, b, &SolverOptions::default()),
    }
}

fn is_active(slack: f64, bound: f64) -> bool {
    slack <= ACTIVE_TOL * bound.abs().max(1.0)
}

/// Constraints within the activity threshold at `x`.
pub fn active_set<P: Problem + ?Sized>(problem: &P, x: &Vector, c: &[f64], b: &Vector) -> Vec<ConstraintRef> {
    let g = problem.constraints(x, c);
    let bounds = problem.bounds();
    let mut active = Vec::new();
    for m in 0..g.len() {
        if b[m].is_finite() && is_active(b[m] - g[m], b[m]) {
            active.push(ConstraintRef::Resource(m));
        }
    }
    for i in 0..x.len() {
        let lo = bounds.lower[i];
        if lo.is_finite() && is_active(x[i] - lo, lo) {
            active.push(ConstraintRef::Lower(i));
        }
        let hi = bounds.upper[i];
        if hi.is_finite() && is_active(hi - x[i], hi) {
            active.push(ConstraintRef::Upper(i));
        }
    }
    active
}

/// Infinity norm of stationarity and complementary slackness.
pub fn kkt_residual<P: Problem + ?Sized>(
    problem: &P,
    c: &[f64],
    lambda: &Vector,
    b: &Vector,
    x: &Vector,
    mu: &Vector,
    lower_dual: &Vector,
    upper_dual: &Vector,
) -> f64 {
    let g = problem.constraints(x, c);
    let jac = problem.constraint_jacobian(x, c);
    let weights = lambda + mu;
    let mut stationarity = problem.loss_gradient(x, c) + jac.transpose() * weights;
    stationarity -= lower_dual;
    stationarity += upper_dual;
    let mut residual = stationarity.amax();
    for m in 0..g.len() {
        if b[m].is_finite() {
            residual = residual.max((mu[m] * (g[m] - b[m])).abs());
        } else {
            residual = residual.max(mu[m].abs());
        }
    }
    let bounds = problem.bounds();
    for i in 0..x.len() {
        if bounds.lower[i].is_finite() {
            residual = residual.max((lower_dual[i] * (x[i] - bounds.lower[i])).abs());
        }
        if bounds.upper[i].is_finite() {
            residual = residual.max((upper_dual[i] * (bounds.upper[i] - x[i])).abs());
        }
    }
    residual
}

fn finish<P: Problem + ?Sized>(
    problem: &P,
    c: &[f64],
    lambda: &Vector,
    b: &Vector,
    x: Vector,
    mu: Vector,
    lower_dual: Vector,
    upper_dual: Vector,
) -> OptSolution {
    let kkt_residual = kkt_residual(problem, c, lambda, b, &x, &mu, &lower_dual, &upper_dual);
    let active_set = active_set(problem, &x, c, b);
    OptSolution {
        x,
        mu,
        lower_dual,
        upper_dual,
        active_set,
        kkt_residual,
    }
}

/// Closed-form layer for the fairness family:
/// `x = clamp(c/λ, x_min, min(x_max, b))`, with `λ = 0` meaning the upper clamp.
pub fn fairness_closed_form(family: &FairnessFamily, c: f64, lambda: f64, b: f64) -> Result<OptSolution> {
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::Invalid(format!("fairness context must be nonnegative, got {c}")));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Invalid(format!("multiplier must be nonnegative, got {lambda}")));
    }
    let (lo, hi) = (family.x_min(), family.x_max());
    let cap = hi.min(b);
    if cap.is_nan() || cap < lo - 1e-9 * lo.max(1.0) {
        return Err(Error::Infeasible(format!(
            "remaining budget {b} is below the minimum allocation {lo}"
        )));
    }
    let cap = cap.max(lo);
    let unclamped = if lambda > 0.0 { c / lambda } else { f64::INFINITY };
    let x = unclamped.max(lo).min(cap);

    let (mut mu, mut lower, mut upper) = (0.0, 0.0, 0.0);
    if x != unclamped {
        // μ + ν_hi − ν_lo = c/x − λ
        let r = c / x - lambda;
        if r > 0.0 {
            if b.is_finite() && is_active(b - x, b) {
                mu = r;
            } else {
                upper = r;
            }
        } else {
            lower = -r;
        }
    }
    let one = |v: f64| Vector::from_element(1, v);
    Ok(finish(
        family,
        &[c],
        &one(lambda),
        &one(b),
        one(x),
        one(mu),
        one(lower),
        one(upper),
    ))
}

struct BarrierProblem<'a, P: ?Sized> {
    problem: &'a P,
    c: &'a [f64],
    lambda: &'a Vector,
    b: &'a Vector,
    lower: &'a Vector,
    upper: &'a Vector,
}

struct Slacks {
    resource: Vector,
    lower: Vector,
    upper: Vector,
}

impl<'a, P: Problem + ?Sized> BarrierProblem<'a, P> {
    fn slacks(&self, x: &Vector) -> Option<Slacks> {
        if !self.problem.in_domain(x, self.c) {
            return None;
        }
        let g = self.problem.constraints(x, self.c);
        let resource = Vector::from_fn(g.len(), |m, _| if self.b[m].is_finite() { self.b[m] - g[m] } else { f64::INFINITY });
        let lower = Vector::from_fn(x.len(), |i, _| x[i] - self.lower[i]);
        let upper = Vector::from_fn(x.len(), |i, _| self.upper[i] - x[i]);
        let ok = resource.iter().chain(lower.iter()).chain(upper.iter()).all(|s| *s > 0.0);
        ok.then_some(Slacks { resource, lower, upper })
    }

    fn constraint_count(&self) -> usize {
        self.b.iter().filter(|v| v.is_finite()).count()
            + self.lower.iter().filter(|v| v.is_finite()).count()
            + self.upper.iter().filter(|v| v.is_finite()).count()
    }

    fn objective(&self, x: &Vector) -> f64 {
        self.problem.loss(x, self.c) + self.lambda.dot(&self.problem.constraints(x, self.c))
    }

    /// `f(x) − (1/t) Σ log(slack)`; `+∞` outside the strict interior.
    fn scaled_value(&self, x: &Vector, t: f64) -> f64 {
        match self.slacks(x) {
            None => f64::INFINITY,
            Some(s) => {
                let log_sum: f64 = s
                    .resource
                    .iter()
                    .chain(s.lower.iter())
                    .chain(s.upper.iter())
                    .filter(|v| v.is_finite())
                    .map(|v| v.ln())
                    .sum();
                self.objective(x) - log_sum / t
            }
        }
    }

    /// Gradient and Hessian of `t·f − Σ log(slack)`.
    fn derivatives(&self, x: &Vector, s: &Slacks, t: f64) -> (Vector, Matrix) {
        let d = x.len();
        let jac = self.problem.constraint_jacobian(x, self.c);
        let mut grad = (self.problem.loss_gradient(x, self.c) + jac.transpose() * self.lambda) * t;
        let mut hess = self.problem.loss_hessian(x, self.c) * t;
        for m in 0..self.lambda.len() {
            let mut weight = t * self.lambda[m];
            let finite = s.resource[m].is_finite();
            if finite {
                weight += 1.0 / s.resource[m];
            }
            if weight != 0.0 {
                hess += self.problem.constraint_hessian(m, x, self.c) * weight;
            }
            if finite {
                let row = jac.row(m).transpose();
                grad += &row / s.resource[m];
                hess += &row * row.transpose() / (s.resource[m] * s.resource[m]);
            }
        }
        for i in 0..d {
            if s.lower[i].is_finite() {
                grad[i] -= 1.0 / s.lower[i];
                hess[(i, i)] += 1.0 / (s.lower[i] * s.lower[i]);
            }
            if s.upper[i].is_finite() {
                grad[i] += 1.0 / s.upper[i];
                hess[(i, i)] += 1.0 / (s.upper[i] * s.upper[i]);
            }
        }
        (grad, hess)
    }

    fn start_point(&self) -> Result<Vector> {
        let d = self.lower.len();
        let mut x0 = Vector::zeros(d);
        let mut anchor = Vector::zeros(d);
        for i in 0..d {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            x0[i] = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 1.0,
                (false, true) => hi - 1.0,
                (false, false) => 0.0,
            };
            anchor[i] = if lo.is_finite() { lo } else { 0.0 };
        }
        let mut x = x0.clone();
        for _ in 0..200 {
            if self.slacks(&x).is_some() {
                return Ok(x);
            }
            x = &anchor + (&x - &anchor) * 0.5;
        }
        Err(Error::Infeasible(format!(
            "no strictly feasible point found for budget {:?}",
            self.b.as_slice()
        )))
    }

    fn center(&self, mut x: Vector, t: f64, opts: &SolverOptions) -> Vector {
        for _ in 0..opts.max_newton_steps {
            let slacks = match self.slacks(&x) {
                Some(s) => s,
                None => break,
            };
            let (grad, hess) = self.derivatives(&x, &slacks, t);
            if grad.amax() / t <= 0.01 * opts.tolerance {
                break;
            }
            let step = -solve_spd(&hess, &grad);
            let decrement2 = -grad.dot(&step);
            if !(decrement2 > 1e-28) {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            if decrement2 > 0.25 {
                let f0 = self.scaled_value(&x, t);
                let slope = -decrement2 / t;
                for _ in 0..80 {
                    let trial = &x + &step * alpha;
                    let f1 = self.scaled_value(&trial, t);
                    if f1.is_finite() && f1 <= f0 + 0.25 * alpha * slope {
                        accepted = Some(trial);
                        break;
                    }
                    alpha *= 0.5;
                }
            } else {
                // quadratic region: only keep the iterate strictly feasible
                for _ in 0..80 {
                    let trial = &x + &step * alpha;
                    if self.slacks(&trial).is_some() {
                        accepted = Some(trial);
                        break;
                    }
                    alpha *= 0.5;
                }
            }
            match accepted {
                Some(next) => {
                    let moved = (&next - &x).amax();
                    x = next;
                    if moved == 0.0 {
                        break;
                    }
                }
                None => break,
            }
        }
        x
    }
}

/// Log-barrier Newton solve followed by an active-set polish.
pub fn solve_barrier<P: Problem + ?Sized>(
    problem: &P,
    c: &[f64],
    lambda: &Vector,
    b: &Vector,
    opts: &SolverOptions,
) -> Result<OptSolution> {
    validate_inputs(problem, c, lambda, b)?;
    let bounds = problem.bounds();
    let bp = BarrierProblem {
        problem,
        c,
        lambda,
        b,
        lower: &bounds.lower,
        upper: &bounds.upper,
    };
    let mut x = bp.start_point()?;
    let count = bp.constraint_count().max(1) as f64;
    let mut t = 1.0;
    let mut converged = false;
    for _ in 0..opts.max_stages {
        x = bp.center(x, t, opts);
        if count / t <= 0.1 * opts.tolerance {
            converged = true;
            break;
        }
        t *= opts.barrier_growth;
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "barrier did not reach tolerance in {} stages",
            opts.max_stages
        )));
    }
    let slacks = bp
        .slacks(&x)
        .ok_or_else(|| Error::NonConvergence("barrier iterate left the interior".into()))?;
    let mu = Vector::from_fn(b.len(), |m, _| {
        if slacks.resource[m].is_finite() { 1.0 / (t * slacks.resource[m]) } else { 0.0 }
    });
    let lower_dual = Vector::from_fn(x.len(), |i, _| {
        if slacks.lower[i].is_finite() { 1.0 / (t * slacks.lower[i]) } else { 0.0 }
    });
    let upper_dual = Vector::from_fn(x.len(), |i, _| {
        if slacks.upper[i].is_finite() { 1.0 / (t * slacks.upper[i]) } else { 0.0 }
    });
    let barrier_sol = finish(problem, c, lambda, b, x, mu, lower_dual, upper_dual);
    let sol = match polish(problem, c, lambda, b, &barrier_sol) {
        Some(p) if p.kkt_residual <= barrier_sol.kkt_residual => p,
        _ => barrier_sol,
    };
    let scale = problem.loss_gradient(&sol.x, c).amax().max(1.0);
    if !(sol.kkt_residual <= opts.tolerance * scale) {
        return Err(Error::NonConvergence(format!(
            "KKT residual {:e} above tolerance",
            sol.kkt_residual
        )));
    }
    Ok(sol)
}

/// Newton iterations on the equality-constrained KKT system of the active set.
/// Returns `None` if the polished point is not primal/dual feasible.
fn polish<P: Problem + ?Sized>(
    problem: &P,
    c: &[f64],
    lambda: &Vector,
    b: &Vector,
    start: &OptSolution,
) -> Option<OptSolution> {
    let active = &start.active_set;
    let d = start.x.len();
    let k = active.len();
    let bounds = problem.bounds();
    let mut x = start.x.clone();
    let mut nu = Vector::from_fn(k, |j, _| start.dual(active[j]));

    let residual = |x: &Vector, nu: &Vector| -> Vector {
        let g = problem.constraints(x, c);
        let jac = problem.constraint_jacobian(x, c);
        let mut r = Vector::zeros(d + k);
        let mut stat = problem.loss_gradient(x, c) + jac.transpose() * lambda;
        for (j, con) in active.iter().enumerate() {
            match *con {
                ConstraintRef::Resource(m) => {
                    stat += jac.row(m).transpose() * nu[j];
                    r[d + j] = g[m] - b[m];
                }
                ConstraintRef::Lower(i) => {
                    stat[i] -= nu[j];
                    r[d + j] = bounds.lower[i] - x[i];
                }
                ConstraintRef::Upper(i) => {
                    stat[i] += nu[j];
                    r[d + j] = x[i] - bounds.upper[i];
                }
            }
        }
        r.rows_mut(0, d).copy_from(&stat);
        r
    };

    let mut r = residual(&x, &nu);
    for _ in 0..30 {
        let norm = r.amax();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let jac = problem.constraint_jacobian(&x, c);
        let mut kkt = Matrix::zeros(d + k, d + k);
        let mut h = problem.loss_hessian(&x, c);
        for m in 0..lambda.len() {
            let mut w = lambda[m];
            for (j, con) in active.iter().enumerate() {
                if *con == ConstraintRef::Resource(m) {
                    w += nu[j];
                }
            }
            if w != 0.0 {
                h += problem.constraint_hessian(m, &x, c) * w;
            }
        }
        kkt.view_mut((0, 0), (d, d)).copy_from(&h);
        for (j, con) in active.iter().enumerate() {
            let grad = match *con {
                ConstraintRef::Resource(m) => jac.row(m).transpose(),
                ConstraintRef::Lower(i) => -Vector::from_fn(d, |r, _| if r == i { 1.0 } else { 0.0 }),
                ConstraintRef::Upper(i) => Vector::from_fn(d, |r, _| if r == i { 1.0 } else { 0.0 }),
            };
            kkt.view_mut((0, d + j), (d, 1)).copy_from(&grad);
            kkt.view_mut((d + j, 0), (1, d)).copy_from(&grad.transpose());
        }
        let step = pinv_solve(&kkt, &(-&r));
        let x_next = &x + step.rows(0, d);
        let nu_next = &nu + step.rows(d, k);
        if !problem.in_domain(&x_next, c) {
            break;
        }
        let r_next = residual(&x_next, &nu_next);
        if !(r_next.amax() < norm) {
            break;
        }
        x = x_next;
        nu = nu_next;
        r = r_next;
    }

    // Snap active box coordinates exactly onto their bounds.
    for con in active {
        match *con {
            ConstraintRef::Lower(i) => x[i] = bounds.lower[i],
            ConstraintRef::Upper(i) => x[i] = bounds.upper[i],
            ConstraintRef::Resource(_) => {}
        }
    }
    if !bounds.contains(&x, 0.0) || !problem.in_domain(&x, c) {
        return None;
    }
    let g = problem.constraints(&x, c);
    let is_res_active = |m: usize| active.contains(&ConstraintRef::Resource(m));
    for m in 0..g.len() {
        let slack = b[m] - g[m];
        if slack < 0.0 && !(is_res_active(m) && slack > -1e-12 * b[m].abs().max(1.0)) {
            return None;
        }
    }
    let mut mu = Vector::zeros(b.len());
    let mut lower_dual = Vector::zeros(d);
    let mut upper_dual = Vector::zeros(d);
    for (j, con) in active.iter().enumerate() {
        let v = nu[j];
        if v < -1e-9 {
            return None;
        }
        let v = v.max(0.0);
        match *con {
            ConstraintRef::Resource(m) => mu[m] = v,
            ConstraintRef::Lower(i) => lower_dual[i] = v,
            ConstraintRef::Upper(i) => upper_dual[i] = v,
        }
    }
    Some(finish(problem, c, lambda, b, x, mu, lower_dual, upper_dual))
}

/// Implicit derivatives of the layer solution.
#[derive(Debug, Clone, PartialEq)]
pub struct KktGradients {
    /// `∂x/∂λ`, `d × M`.
    pub dx_dlambda: Matrix,
    /// `∂x/∂b`, `d × M`.
    pub dx_db: Matrix,
    /// `∂x/∂c`, `d × context`.
    pub dx_dc: Matrix,
    /// True iff the sufficient conditions hold and no pseudo-inverse was needed.
    pub exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KktDiagnostic {
    pub nonzero_duals: bool,
    pub cardinality_ok: bool,
    pub independent: bool,
}

impl KktDiagnostic {
    pub fn exact(&self) -> bool {
        self.nonzero_duals && self.cardinality_ok && self.independent
    }
}

fn constraint_gradient<P: Problem + ?Sized>(problem: &P, jac: &Matrix, con: ConstraintRef) -> Vector {
    let d = problem.dims().action;
    let unit = |i: usize, s: f64| Vector::from_fn(d, |r, _| if r == i { s } else { 0.0 });
    match con {
        ConstraintRef::Resource(m) => jac.row(m).transpose(),
        ConstraintRef::Lower(i) => unit(i, -1.0),
        ConstraintRef::Upper(i) => unit(i, 1.0),
    }
}

/// Checks the sufficient conditions for exact differentiation: nonzero duals
/// on the active set, at most `d` active constraints, and linearly independent
/// active gradients.
pub fn check_kkt_conditions<P: Problem + ?Sized>(problem: &P, sol: &OptSolution, c: &[f64]) -> KktDiagnostic {
    let d = problem.dims().action;
    let active = &sol.active_set;
    let nonzero_duals = active.iter().all(|&con| sol.dual(con).abs() > DUAL_TOL);
    let cardinality_ok = active.len() <= d;
    let independent = if active.is_empty() {
        true
    } else {
        let jac = problem.constraint_jacobian(&sol.x, c);
        let mut stacked = Matrix::zeros(active.len(), d);
        for (j, &con) in active.iter().enumerate() {
            stacked.set_row(j, &constraint_gradient(problem, &jac, con).transpose());
        }
        stacked.amax() > 0.0 && smallest_singular_value(&stacked) > INDEPENDENCE_TOL
    };
    KktDiagnostic {
        nonzero_duals,
        cardinality_ok,
        independent,
    }
}

/// Differentiates the KKT conditions at `sol`.
///
/// With `A = Δ₁₁`, `B = Δ₁₂`, `C = Δ₂₁`, `S = Δ₂₂ − C A⁻¹ B`, a parameter
/// perturbation entering as `Δ·[dx; dν] = −[r₁; r₂]` gives
/// `dx = −(A⁻¹ + A⁻¹ B S⁻¹ C A⁻¹) r₁ + A⁻¹ B S⁻¹ r₂`.
pub fn differentiate_kkt<P: Problem + ?Sized>(
    problem: &P,
    sol: &OptSolution,
    c: &[f64],
    lambda: &Vector,
    b: &Vector,
) -> KktGradients {
    let dims = problem.dims();
    let (d, m_count, p) = (dims.action, dims.resources, dims.context);
    let x = &sol.x;
    let jac = problem.constraint_jacobian(x, c);
    let g = problem.constraints(x, c);

    let mut a = problem.loss_hessian(x, c);
    let mut r1_c = problem.loss_cross(x, c);
    for m in 0..m_count {
        let w = lambda[m] + sol.mu[m];
        if w != 0.0 {
            a += problem.constraint_hessian(m, x, c) * w;
            r1_c += problem.constraint_cross(m, x, c) * w;
        }
    }

    // Rows: every finite resource constraint, then active box constraints.
    let mut rows: Vec<(ConstraintRef, f64, f64)> = Vec::new();
    for m in 0..m_count {
        if !b[m].is_finite() {
            continue;
        }
        let con = ConstraintRef::Resource(m);
        let slack = if sol.active_set.contains(&con) { 0.0 } else { g[m] - b[m] };
        rows.push((con, sol.mu[m], slack));
    }
    for &con in &sol.active_set {
        if !matches!(con, ConstraintRef::Resource(_)) {
            rows.push((con, sol.dual(con), 0.0));
        }
    }
    let k = rows.len();

    let (a_inv, a_exact) = robust_inverse(&a);
    let jac_t = jac.transpose();
    let diag = check_kkt_conditions(problem, sol, c);

    if k == 0 {
        return KktGradients {
            dx_dlambda: -(&a_inv * &jac_t),
            dx_db: Matrix::zeros(d, m_count),
            dx_dc: -(&a_inv * &r1_c),
            exact: a_exact && diag.exact(),
        };
    }

    let mut bmat = Matrix::zeros(d, k);
    let mut cmat = Matrix::zeros(k, d);
    let mut dmat = Matrix::zeros(k, k);
    let mut r2_c = Matrix::zeros(k, p);
    let cjac = problem.constraint_context_jacobian(x, c);
    for (j, &(con, dual, slack)) in rows.iter().enumerate() {
        let grad = constraint_gradient(problem, &jac, con);
        bmat.set_column(j, &grad);
        cmat.set_row(j, &(grad.transpose() * dual));
        dmat[(j, j)] = slack;
        if let ConstraintRef::Resource(m) = con {
            r2_c.set_row(j, &(cjac.row(m) * dual));
        }
    }
    let schur = &dmat - &cmat * &a_inv * &bmat;
    let (s_inv, s_exact) = robust_inverse(&schur);
    let p_mat = &a_inv * &bmat * &s_inv;
    let t_mat = &a_inv + &p_mat * &cmat * &a_inv;

    let dx_dlambda = -(&t_mat * &jac_t);
    let mut dx_db = Matrix::zeros(d, m_count);
    for (j, &(con, dual, _)) in rows.iter().enumerate() {
        if let ConstraintRef::Resource(m) = con {
            dx_db.set_column(m, &(p_mat.column(j) * (-dual)));
        }
    }
    let dx_dc = -(&t_mat * &r1_c) + &p_mat * &r2_c;

    KktGradients {
        dx_dlambda,
        dx_db,
        dx_dc,
        exact: a_exact && s_exact && diag.exact(),
    }
}
