//! Problem instances and the loss/constraint function families.
//!
//! A family supplies the per-step loss `l(x, c)` and the resource consumption
//! `g(x, c)` together with the first and second derivatives needed by the
//! barrier solver and by KKT differentiation. Utilities are reported as
//! `-Σ l`; every solver in the crate minimizes `Σ l`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Slack allowed on the budget check `Σ_t g(x_t, c_t) ≤ B`.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Slack allowed on box membership when evaluating oracles.
pub const BOX_TOL: f64 = 1e-9;

/// One problem instance: the context sequence and its budget vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub contexts: Vec<Vec<f64>>,
    pub budgets: Vec<f64>,
}

impl Episode {
    pub fn new(id: impl Into<String>, contexts: Vec<Vec<f64>>, budgets: Vec<f64>) -> Result<Self> {
        let episode = Self {
            id: id.into(),
            contexts,
            budgets,
        };
        if episode.contexts.is_empty() {
            return Err(Error::Invalid(format!("episode {} has no steps", episode.id)));
        }
        if episode.budgets.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Invalid(format!(
                "episode {} has a non-positive budget",
                episode.id
            )));
        }
        Ok(episode)
    }

    /// Convenience constructor for scalar contexts and a single budget.
    pub fn scalar(id: impl Into<String>, contexts: &[f64], budget: f64) -> Result<Self> {
        Self::new(id, contexts.iter().map(|&c| vec![c]).collect(), vec![budget])
    }

    pub fn horizon(&self) -> usize {
        self.contexts.len()
    }

    pub fn budget_vector(&self) -> Vector {
        Vector::from_column_slice(&self.budgets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Action dimension `d`.
    pub action: usize,
    /// Number of resource constraints `M`.
    pub resources: usize,
    /// Context dimension.
    pub context: usize,
}

/// Elementwise box `lower ≤ x ≤ upper`; infinite entries mean "no bound".
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vector,
    pub upper: Vector,
}

impl BoxBounds {
    pub fn new(lower: Vector, upper: Vector) -> Self {
        assert_eq!(lower.len(), upper.len(), "box bound dimensions differ");
        Self { lower, upper }
    }

    pub fn unbounded(dim: usize) -> Self {
        Self::new(
            Vector::from_element(dim, f64::NEG_INFINITY),
            Vector::from_element(dim, f64::INFINITY),
        )
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(&v, (&lo, &hi))| v >= lo - tol && v <= hi + tol)
    }

    pub fn clamp(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&v, (&lo, &hi))| v.max(lo).min(hi)),
        )
    }
}

/// Which oracle carries the strong convexity the KKT differentiation needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrongConvexity {
    Loss,
    Constraint(usize),
}

/// Running budget `b_t` at step `t` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetState {
    pub remaining: Vector,
    pub step: usize,
}

impl BudgetState {
    pub fn new(budgets: Vector) -> Self {
        Self {
            remaining: budgets,
            step: 0,
        }
    }

    pub fn consume(&mut self, usage: &Vector) {
        self.remaining -= usage;
        self.step += 1;
    }
}

/// A loss/constraint family with derivative oracles.
///
/// Shapes: `x` has length `d`, `c` length `context`, `g` length `M`.
/// `constraint_jacobian` is `M × d`, cross derivatives `∇ₓ꜀` are `d × context`
/// and `constraint_context_jacobian` is `M × context`.
pub trait Problem: Send + Sync {
    fn dims(&self) -> Dims;
    fn bounds(&self) -> &BoxBounds;
    fn strong_convexity(&self) -> StrongConvexity;

    fn loss(&self, x: &Vector, c: &[f64]) -> f64;
    fn loss_gradient(&self, x: &Vector, c: &[f64]) -> Vector;
    fn loss_hessian(&self, x: &Vector, c: &[f64]) -> Matrix;
    fn loss_cross(&self, x: &Vector, c: &[f64]) -> Matrix;

    fn constraints(&self, x: &Vector, c: &[f64]) -> Vector;
    fn constraint_jacobian(&self, x: &Vector, c: &[f64]) -> Matrix;
    fn constraint_hessian(&self, m: usize, x: &Vector, c: &[f64]) -> Matrix;
    fn constraint_context_jacobian(&self, x: &Vector, c: &[f64]) -> Matrix;
    fn constraint_cross(&self, m: usize, x: &Vector, c: &[f64]) -> Matrix;

    /// Whether `x` lies in the domain where the oracles are defined.
    fn in_domain(&self, x: &Vector, _c: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite())
    }

    fn validate_context(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.dims().context {
            return Err(Error::Invalid(format!(
                "context has dimension {}, expected {}",
                c.len(),
                self.dims().context
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite context".into()));
        }
        Ok(())
    }

    /// A context-independent lower bound on `g` over the box, used to reserve
    /// budget for the steps that remain. `None` when no such bound exists.
    fn min_step_consumption(&self) -> Option<Vector> {
        None
    }

    /// True for families with `d = M = 1` and `g(x, c) = x`.
    fn is_scalar_allocation(&self) -> bool {
        false
    }

    /// Closed-form solution of the per-step relaxed problem, when the family
    /// has one. Returns `None` to fall back to the barrier solver.
    fn closed_form_step(
        &self,
        _c: &[f64],
        _lambda: &Vector,
        _budget: &Vector,
    ) -> Option<Result<crate::opt_layer::OptSolution>> {
        None
    }

    /// Full-information optimum of a whole episode, when the family has a
    /// specialized solver. Returns `None` to fall back to the stacked barrier
    /// problem.
    fn offline_optimum(&self, _contexts: &[Vec<f64>], _budgets: &Vector) -> Option<Result<Vec<Vector>>> {
        None
    }

    /// Typical magnitude of each context coordinate when no data is at hand.
    fn default_context_scale(&self) -> Vec<f64> {
        vec![1.0; self.dims().context]
    }

    /// Typical per-step action magnitude, used to normalize budgets.
    fn action_scale(&self) -> f64 {
        1.0
    }
}

fn check_box<P: Problem + ?Sized>(problem: &P, x: &Vector, c: &[f64]) -> Result<()> {
    if x.len() != problem.dims().action {
        return Err(Error::Domain(format!(
            "action has dimension {}, expected {}",
            x.len(),
            problem.dims().action
        )));
    }
    if !problem.bounds().contains(x, BOX_TOL) {
        return Err(Error::Domain(format!("action {:?} outside the box", x.as_slice())));
    }
    if !problem.in_domain(x, c) {
        return Err(Error::Domain(format!("action {:?} outside the oracle domain", x.as_slice())));
    }
    Ok(())
}

pub fn eval_loss<P: Problem + ?Sized>(problem: &P, x: &Vector, c: &[f64]) -> Result<f64> {
    check_box(problem, x, c)?;
    Ok(problem.loss(x, c))
}

pub fn eval_constraints<P: Problem + ?Sized>(problem: &P, x: &Vector, c: &[f64]) -> Result<Vector> {
    check_box(problem, x, c)?;
    Ok(problem.constraints(x, c))
}

/// `Σ_t g(x_t, c_t)` over an episode.
pub fn total_consumption<P: Problem + ?Sized>(
    problem: &P,
    episode: &Episode,
    actions: &[Vector],
) -> Result<Vector> {
    if actions.len() != episode.horizon() {
        return Err(Error::Invalid(format!(
            "{} actions for an episode of length {}",
            actions.len(),
            episode.horizon()
        )));
    }
    let mut used = Vector::zeros(problem.dims().resources);
    for (x, c) in actions.iter().zip(&episode.contexts) {
        used += eval_constraints(problem, x, c)?;
    }
    Ok(used)
}

/// Errors unless `Σ_t g(x_t, c_t) ≤ B + FEASIBILITY_TOL` on every coordinate.
pub fn check_feasibility<P: Problem + ?Sized>(
    problem: &P,
    episode: &Episode,
    actions: &[Vector],
) -> Result<Vector> {
    let used = total_consumption(problem, episode, actions)?;
    for (m, (&u, &b)) in used.iter().zip(&episode.budgets).enumerate() {
        if u > b + FEASIBILITY_TOL {
            return Err(Error::Infeasible(format!(
                "episode {}: resource {m} uses {u} of budget {b}",
                episode.id
            )));
        }
    }
    Ok(used)
}

/// Reported utility `-Σ_t l(x_t, c_t)` of a feasible action sequence.
pub fn total_utility<P: Problem + ?Sized>(
    problem: &P,
    episode: &Episode,
    actions: &[Vector],
) -> Result<f64> {
    check_feasibility(problem, episode, actions)?;
    let mut loss = 0.0;
    for (x, c) in actions.iter().zip(&episode.contexts) {
        loss += eval_loss(problem, x, c)?;
    }
    Ok(-loss)
}

/// Weighted log-fairness: `l(x, c) = -c·ln x`, `g(x, c) = x`, `x ∈ [x_min, x_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessFamily {
    bounds: BoxBounds,
}

impl Default for FairnessFamily {
    fn default() -> Self {
        Self::new(1.0, 40.0)
    }
}

impl FairnessFamily {
    pub fn new(x_min: f64, x_max: f64) -> Self {
        assert!(x_min > 0.0 && x_max > x_min, "fairness box must satisfy 0 < x_min < x_max");
        Self {
            bounds: BoxBounds::new(
                Vector::from_element(1, x_min),
                Vector::from_element(1, x_max),
            ),
        }
    }

    pub fn x_min(&self) -> f64 {
        self.bounds.lower[0]
    }

    pub fn x_max(&self) -> f64 {
        self.bounds.upper[0]
    }
}

impl Problem for FairnessFamily {
    fn dims(&self) -> Dims {
        Dims {
            action: 1,
            resources: 1,
            context: 1,
        }
    }

    fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    fn strong_convexity(&self) -> StrongConvexity {
        StrongConvexity::Loss
    }

    fn loss(&self, x: &Vector, c: &[f64]) -> f64 {
        -c[0] * x[0].ln()
    }

    fn loss_gradient(&self, x: &Vector, c: &[f64]) -> Vector {
        Vector::from_element(1, -c[0] / x[0])
    }

    fn loss_hessian(&self, x: &Vector, c: &[f64]) -> Matrix {
        Matrix::from_element(1, 1, c[0] / (x[0] * x[0]))
    }

    fn loss_cross(&self, x: &Vector, _c: &[f64]) -> Matrix {
        Matrix::from_element(1, 1, -1.0 / x[0])
    }

    fn constraints(&self, x: &Vector, _c: &[f64]) -> Vector {
        x.clone()
    }

    fn constraint_jacobian(&self, _x: &Vector, _c: &[f64]) -> Matrix {
        Matrix::identity(1, 1)
    }

    fn constraint_hessian(&self, _m: usize, _x: &Vector, _c: &[f64]) -> Matrix {
        Matrix::zeros(1, 1)
    }

    fn constraint_context_jacobian(&self, _x: &Vector, _c: &[f64]) -> Matrix {
        Matrix::zeros(1, 1)
    }

    fn constraint_cross(&self, _m: usize, _x: &Vector, _c: &[f64]) -> Matrix {
        Matrix::zeros(1, 1)
    }

    fn in_domain(&self, x: &Vector, _c: &[f64]) -> bool {
        x[0].is_finite() && x[0] > 0.0
    }

    fn validate_context(&self, c: &[f64]) -> Result<()> {
        if c.len() != 1 || !c[0].is_finite() || c[0] < 0.0 {
            return Err(Error::Invalid(format!(
                "fairness contexts are nonnegative scalars, got {c:?}"
            )));
        }
        Ok(())
    }

    fn min_step_consumption(&self) -> Option<Vector> {
        Some(Vector::from_element(1, self.x_min()))
    }

    fn is_scalar_allocation(&self) -> bool {
        true
    }

    fn closed_form_step(
        &self,
        c: &[f64],
        lambda: &Vector,
        budget: &Vector,
    ) -> Option<Result<crate::opt_layer::OptSolution>> {
        Some(crate::opt_layer::fairness_closed_form(self, c[0], lambda[0], budget[0]))
    }

    fn offline_optimum(&self, contexts: &[Vec<f64>], budgets: &Vector) -> Option<Result<Vec<Vector>>> {
        let c: Vec<f64> = contexts.iter().map(|c| c[0]).collect();
        Some(
            crate::baselines::fairness_water_filling(self, &c, budgets[0])
                .map(|xs| xs.into_iter().map(|x| Vector::from_element(1, x)).collect()),
        )
    }

    fn action_scale(&self) -> f64 {
        self.x_max()
    }
}

/// Convex quadratic loss with quadratic-or-linear resource usage:
///
/// `l(x, c) = ½ (x − K c)ᵀ Q (x − K c) + qᵀ x`
/// `g_m(x, c) = ½ ρ_m ‖x‖² + a_mᵀ x + e_mᵀ c + s_m`
///
/// Used for the scalar toy `l = (x − c)²/2, g = x` and for randomized
/// differentiation checks. Nonnegativity of `g` over the feasible set is the
/// caller's responsibility.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFamily {
    pub q_matrix: Matrix,
    pub context_map: Matrix,
    pub linear: Vector,
    pub curvature: Vec<f64>,
    pub usage: Matrix,
    pub context_usage: Matrix,
    pub offset: Vector,
    pub bounds: BoxBounds,
}

impl QuadraticFamily {
    /// `l = (x − c)²/2`, `g = x`, optionally boxed.
    pub fn scalar_toy(bounds: Option<(f64, f64)>) -> Self {
        let bounds = match bounds {
            Some((lo, hi)) => BoxBounds::new(Vector::from_element(1, lo), Vector::from_element(1, hi)),
            None => BoxBounds::unbounded(1),
        };
        Self {
            q_matrix: Matrix::identity(1, 1),
            context_map: Matrix::identity(1, 1),
            linear: Vector::zeros(1),
            curvature: vec![0.0],
            usage: Matrix::identity(1, 1),
            context_usage: Matrix::zeros(1, 1),
            offset: Vector::zeros(1),
            bounds,
        }
    }
}

impl Problem for QuadraticFamily {
    fn dims(&self) -> Dims {
        Dims {
            action: self.q_matrix.nrows(),
            resources: self.usage.nrows(),
            context: self.context_map.ncols(),
        }
    }

    fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    fn strong_convexity(&self) -> StrongConvexity {
        StrongConvexity::Loss
    }

    fn loss(&self, x: &Vector, c: &[f64]) -> f64 {
        let r = x - &self.context_map * Vector::from_column_slice(c);
        0.5 * r.dot(&(&self.q_matrix * &r)) + self.linear.dot(x)
    }

    fn loss_gradient(&self, x: &Vector, c: &[f64]) -> Vector {
        let r = x - &self.context_map * Vector::from_column_slice(c);
        &self.q_matrix * r + &self.linear
    }

    fn loss_hessian(&self, _x: &Vector, _c: &[f64]) -> Matrix {
        self.q_matrix.clone()
    }

    fn loss_cross(&self, _x: &Vector, _c: &[f64]) -> Matrix {
        -(&self.q_matrix * &self.context_map)
    }

    fn constraints(&self, x: &Vector, c: &[f64]) -> Vector {
        let c = Vector::from_column_slice(c);
        let sq = x.norm_squared();
        let mut g = &self.usage * x + &self.context_usage * c + &self.offset;
        for (gm, rho) in g.iter_mut().zip(&self.curvature) {
            *gm += 0.5 * rho * sq;
        }
        g
    }

    fn constraint_jacobian(&self, x: &Vector, _c: &[f64]) -> Matrix {
        let mut jac = self.usage.clone();
        for (m, rho) in self.curvature.iter().enumerate() {
            for i in 0..x.len() {
                jac[(m, i)] += rho * x[i];
            }
        }
        jac
    }

    fn constraint_hessian(&self, m: usize, x: &Vector, _c: &[f64]) -> Matrix {
        Matrix::identity(x.len(), x.len()) * self.curvature[m]
    }

    fn constraint_context_jacobian(&self, _x: &Vector, _c: &[f64]) -> Matrix {
        self.context_usage.clone()
    }

    fn constraint_cross(&self, _m: usize, x: &Vector, c: &[f64]) -> Matrix {
        Matrix::zeros(x.len(), c.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    #[test]
    fn fairness_loss_values() {
        let f = FairnessFamily::default();
        assert_eq!(eval_loss(&f, &v(1.0), &[5.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(eval_loss(&f, &v(std::f64::consts::E), &[2.0]).unwrap(), -2.0, epsilon = 1e-15);
        // -ln 13
        assert_abs_diff_eq!(eval_loss(&f, &v(13.0), &[1.0]).unwrap(), -2.564_949_357_461_536_7, epsilon = 1e-14);
    }

    #[test]
    fn fairness_loss_outside_box_is_domain_error() {
        let f = FairnessFamily::default();
        assert!(matches!(eval_loss(&f, &v(0.5), &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(eval_loss(&f, &v(41.0), &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(eval_constraints(&f, &v(-1.0), &[1.0]), Err(Error::Domain(_))));
        let unboxed = QuadraticFamily::scalar_toy(None);
        assert!(eval_loss(&unboxed, &v(-3.0), &[0.0]).is_ok());
    }

    #[test]
    fn fairness_constraint_is_identity() {
        let f = FairnessFamily::default();
        for x in [13.0, 1.0, 40.0] {
            assert_eq!(eval_constraints(&f, &v(x), &[1.0]).unwrap()[0], x);
        }
    }

    #[test]
    fn total_utility_examples() {
        let f = FairnessFamily::default();
        let e = std::f64::consts::E;
        let ep = Episode::scalar("a", &[1.0, 1.0], 10.0).unwrap();
        assert_eq!(total_utility(&f, &ep, &[v(1.0), v(1.0)]).unwrap(), 0.0);
        let ep = Episode::scalar("b", &[2.0, 3.0], 10.0).unwrap();
        assert_abs_diff_eq!(total_utility(&f, &ep, &[v(e), v(e)]).unwrap(), 5.0, epsilon = 1e-14);
        let ep = Episode::scalar("c", &[1.0, 1.0, 2.0], 8.0).unwrap();
        // 2 ln 2 + 2 ln 4 = 6 ln 2
        assert_abs_diff_eq!(
            total_utility(&f, &ep, &[v(2.0), v(2.0), v(4.0)]).unwrap(),
            4.158_883_083_359_671_5,
            epsilon = 1e-13
        );
    }

    #[test]
    fn total_utility_rejects_overspend() {
        let f = FairnessFamily::default();
        let ep = Episode::scalar("x", &[1.0, 1.0], 10.0).unwrap();
        let err = total_utility(&f, &ep, &[v(6.0), v(5.0)]).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        // within tolerance is fine
        assert!(total_utility(&f, &ep, &[v(5.0), v(5.0 + 1e-10)]).is_ok());
    }

    #[test]
    fn episode_validation() {
        assert!(Episode::scalar("e", &[], 1.0).is_err());
        assert!(Episode::scalar("e", &[1.0], 0.0).is_err());
        assert!(Episode::scalar("e", &[1.0], -2.0).is_err());
        assert!(FairnessFamily::default().validate_context(&[-0.1]).is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn fairness_derivatives_match_finite_differences() {
        let f = FairnessFamily::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let x = rng.random_range(1.5..39.5);
            let c = rng.random_range(0.1..5.0);
            let fd_grad = (f.loss(&v(x + h), &[c]) - f.loss(&v(x - h), &[c])) / (2.0 * h);
            assert!(rel_err(f.loss_gradient(&v(x), &[c])[0], fd_grad) < 1e-6);
            let fd_hess = (f.loss_gradient(&v(x + h), &[c])[0] - f.loss_gradient(&v(x - h), &[c])[0]) / (2.0 * h);
            assert!(rel_err(f.loss_hessian(&v(x), &[c])[(0, 0)], fd_hess) < 1e-6);
            let fd_cross = (f.loss_gradient(&v(x), &[c + h])[0] - f.loss_gradient(&v(x), &[c - h])[0]) / (2.0 * h);
            assert!(rel_err(f.loss_cross(&v(x), &[c])[(0, 0)], fd_cross) < 1e-6);
            let fd_g = (f.constraints(&v(x + h), &[c])[0] - f.constraints(&v(x - h), &[c])[0]) / (2.0 * h);
            assert!(rel_err(f.constraint_jacobian(&v(x), &[c])[(0, 0)], fd_g) < 1e-6);
        }
    }

    #[test]
    fn fairness_usage_nonnegative_on_box() {
        let f = FairnessFamily::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = rng.random_range(f.x_min()..=f.x_max());
            let c = rng.random_range(0.0..10.0);
            assert!(eval_constraints(&f, &v(x), &[c]).unwrap()[0] >= 0.0);
        }
    }

    #[test]
    fn quadratic_family_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let p = 2;
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let fam = QuadraticFamily {
            q_matrix: &a * a.transpose() + Matrix::identity(d, d),
            context_map: Matrix::from_fn(d, p, |_, _| rng.random_range(-1.0..1.0)),
            linear: Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            curvature: vec![0.5, 0.0],
            usage: Matrix::from_fn(2, d, |_, _| rng.random_range(-1.0..1.0)),
            context_usage: Matrix::from_fn(2, p, |_, _| rng.random_range(-1.0..1.0)),
            offset: Vector::from_element(2, 0.3),
            bounds: BoxBounds::unbounded(d),
        };
        let x = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let c = [0.4, -0.7];
        let h = 1e-6;
        let grad = fam.loss_gradient(&x, &c);
        let jac = fam.constraint_jacobian(&x, &c);
        let cjac = fam.constraint_context_jacobian(&x, &c);
        let cross = fam.loss_cross(&x, &c);
        for i in 0..d {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (fam.loss(&xp, &c) - fam.loss(&xm, &c)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7);
            let gd = (fam.constraints(&xp, &c) - fam.constraints(&xm, &c)) / (2.0 * h);
            for m in 0..2 {
                assert!((gd[m] - jac[(m, i)]).abs() < 1e-7);
            }
        }
        for k in 0..p {
            let mut cp = c;
            cp[k] += h;
            let mut cm = c;
            cm[k] -= h;
            let gd = (fam.constraints(&x, &cp) - fam.constraints(&x, &cm)) / (2.0 * h);
            let ld = (fam.loss_gradient(&x, &cp) - fam.loss_gradient(&x, &cm)) / (2.0 * h);
            for m in 0..2 {
                assert!((gd[m] - cjac[(m, k)]).abs() < 1e-7);
            }
            for i in 0..d {
                assert!((ld[i] - cross[(i, k)]).abs() < 1e-7);
            }
        }
    }
}
