//! Comparison algorithms: the full-information optimum, fixed allocations,
//! fixed and adaptive multipliers, and a directly trained allocation policy.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelParams, MultiplierModel, Normalization};
use crate::opt_layer::solve_opt_layer;
use crate::problem::{
    BoxBounds, BudgetState, Dims, Episode, FairnessFamily, Matrix, Problem, StrongConvexity, Vector,
};
use crate::train::EpisodePolicy;
use crate::unroll::check_episode_feasible;

/// Actions and bookkeeping of one algorithm on one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub actions: Vec<Vector>,
    /// Multiplier used at each step; empty for methods without one.
    pub multipliers: Vec<Vector>,
    pub total_loss: f64,
    pub remaining: Vector,
}

impl Rollout {
    fn from_actions<P: Problem + ?Sized>(problem: &P, episode: &Episode, actions: Vec<Vector>, multipliers: Vec<Vector>) -> Self {
        let mut remaining = episode.budget_vector();
        let mut total_loss = 0.0;
        for (x, c) in actions.iter().zip(&episode.contexts) {
            remaining -= problem.constraints(x, c);
            total_loss += problem.loss(x, c);
        }
        Self {
            actions,
            multipliers,
            total_loss,
            remaining,
        }
    }

    pub fn utility(&self) -> f64 {
        -self.total_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// DGD step size; `None` means `1/√N`.
    pub dgd_eta: Option<f64>,
    /// MW step size; `None` means `1/√N`.
    pub mw_eta: Option<f64>,
    pub mw_init: f64,
    /// DGD/MW spend what is left at the last step (`λ_N = 0`).
    pub last_step_fix: bool,
    /// Reserve `(N − t)·g_min` so later steps stay feasible.
    pub reserve: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            dgd_eta: None,
            mw_eta: None,
            mw_init: 1.0,
            last_step_fix: true,
            reserve: true,
        }
    }
}

impl BaselineConfig {
    pub fn dgd_step(&self, horizon: usize) -> f64 {
        self.dgd_eta.unwrap_or(1.0 / (horizon as f64).sqrt())
    }

    pub fn mw_step(&self, horizon: usize) -> f64 {
        self.mw_eta.unwrap_or(1.0 / (horizon as f64).sqrt())
    }
}

/// Water-filling for the fairness family: `x_t = clamp(c_t/λ*, x_min, x_max)`
/// with `λ*` chosen so the budget is exhausted or every clamp binds.
pub fn fairness_water_filling(family: &FairnessFamily, contexts: &[f64], budget: f64) -> Result<Vec<f64>> {
    let (lo, hi) = (family.x_min(), family.x_max());
    let n = contexts.len() as f64;
    if contexts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Invalid("fairness contexts must be finite and nonnegative".into()));
    }
    if n * lo > budget + crate::problem::FEASIBILITY_TOL {
        return Err(Error::Infeasible(format!(
            "budget {budget} cannot cover {} steps at the minimum allocation {lo}",
            contexts.len()
        )));
    }
    let alloc = |lambda: f64| -> Vec<f64> {
        contexts
            .iter()
            .map(|&c| if c == 0.0 { lo } else { (c / lambda).clamp(lo, hi) })
            .collect()
    };
    let greedy: Vec<f64> = contexts.iter().map(|&c| if c == 0.0 { lo } else { hi }).collect();
    if greedy.iter().sum::<f64>() <= budget {
        return Ok(greedy);
    }
    let c_max = contexts.iter().cloned().fold(0.0, f64::max);
    // f(λ) = Σ x_t(λ) is nonincreasing; f(λ_hi) = N·x_min ≤ B < f(λ_lo).
    let (mut lam_lo, mut lam_hi) = (0.0, c_max / lo);
    for _ in 0..400 {
        let mid = 0.5 * (lam_lo + lam_hi);
        if mid <= lam_lo || mid >= lam_hi {
            break;
        }
        if alloc(mid).iter().sum::<f64>() > budget {
            lam_lo = mid;
        } else {
            lam_hi = mid;
        }
    }
    Ok(alloc(lam_hi))
}

/// The episode as a single `N·d`-dimensional problem with `Σ_t g ≤ B`.
pub struct StackedProblem<'a, P: ?Sized> {
    inner: &'a P,
    horizon: usize,
    bounds: BoxBounds,
}

impl<'a, P: Problem + ?Sized> StackedProblem<'a, P> {
    pub fn new(inner: &'a P, horizon: usize) -> Self {
        let b = inner.bounds();
        let rep = |v: &Vector| Vector::from_iterator(v.len() * horizon, (0..horizon).flat_map(|_| v.iter().cloned()));
        Self {
            inner,
            horizon,
            bounds: BoxBounds::new(rep(&b.lower), rep(&b.upper)),
        }
    }

    fn d(&self) -> usize {
        self.inner.dims().action
    }

    fn p(&self) -> usize {
        self.inner.dims().context
    }

    fn block(&self, x: &Vector, t: usize) -> Vector {
        x.rows(t * self.d(), self.d()).into_owned()
    }

    fn ctx<'c>(&self, c: &'c [f64], t: usize) -> &'c [f64] {
        &c[t * self.p()..(t + 1) * self.p()]
    }

    fn block_diag(&self, rows: usize, cols: usize, f: impl Fn(&Vector, &[f64]) -> Matrix, x: &Vector, c: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(rows * self.horizon, cols * self.horizon);
        for t in 0..self.horizon {
            let blk = f(&self.block(x, t), self.ctx(c, t));
            out.view_mut((t * rows, t * cols), (rows, cols)).copy_from(&blk);
        }
        out
    }

    fn horizontal(&self, cols: usize, f: impl Fn(&Vector, &[f64]) -> Matrix, x: &Vector, c: &[f64]) -> Matrix {
        let m = self.inner.dims().resources;
        let mut out = Matrix::zeros(m, cols * self.horizon);
        for t in 0..self.horizon {
            let blk = f(&self.block(x, t), self.ctx(c, t));
            out.view_mut((0, t * cols), (m, cols)).copy_from(&blk);
        }
        out
    }
}

impl<P: Problem + ?Sized> Problem for StackedProblem<'_, P> {
    fn dims(&self) -> Dims {
        let inner = self.inner.dims();
        Dims {
            action: inner.action * self.horizon,
            resources: inner.resources,
            context: inner.context * self.horizon,
        }
    }

    fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    fn strong_convexity(&self) -> StrongConvexity {
        self.inner.strong_convexity()
    }

    fn loss(&self, x: &Vector, c: &[f64]) -> f64 {
        (0..self.horizon).map(|t| self.inner.loss(&self.block(x, t), self.ctx(c, t))).sum()
    }

    fn loss_gradient(&self, x: &Vector, c: &[f64]) -> Vector {
        let d = self.d();
        let mut g = Vector::zeros(d * self.horizon);
        for t in 0..self.horizon {
            g.rows_mut(t * d, d)
                .copy_from(&self.inner.loss_gradient(&self.block(x, t), self.ctx(c, t)));
        }
        g
    }

    fn loss_hessian(&self, x: &Vector, c: &[f64]) -> Matrix {
        self.block_diag(self.d(), self.d(), |x, c| self.inner.loss_hessian(x, c), x, c)
    }

    fn loss_cross(&self, x: &Vector, c: &[f64]) -> Matrix {
        self.block_diag(self.d(), self.p(), |x, c| self.inner.loss_cross(x, c), x, c)
    }

    fn constraints(&self, x: &Vector, c: &[f64]) -> Vector {
        let mut g = Vector::zeros(self.inner.dims().resources);
        for t in 0..self.horizon {
            g += self.inner.constraints(&self.block(x, t), self.ctx(c, t));
        }
        g
    }

    fn constraint_jacobian(&self, x: &Vector, c: &[f64]) -> Matrix {
        self.horizontal(self.d(), |x, c| self.inner.constraint_jacobian(x, c), x, c)
    }

    fn constraint_hessian(&self, m: usize, x: &Vector, c: &[f64]) -> Matrix {
        self.block_diag(self.d(), self.d(), |x, c| self.inner.constraint_hessian(m, x, c), x, c)
    }

    fn constraint_context_jacobian(&self, x: &Vector, c: &[f64]) -> Matrix {
        self.horizontal(self.p(), |x, c| self.inner.constraint_context_jacobian(x, c), x, c)
    }

    fn constraint_cross(&self, m: usize, x: &Vector, c: &[f64]) -> Matrix {
        self.block_diag(self.d(), self.p(), |x, c| self.inner.constraint_cross(m, x, c), x, c)
    }

    fn in_domain(&self, x: &Vector, c: &[f64]) -> bool {
        (0..self.horizon).all(|t| self.inner.in_domain(&self.block(x, t), self.ctx(c, t)))
    }
}

/// Full-information optimum of the episode.
pub fn solve_offline_opt<P: Problem + ?Sized>(problem: &P, episode: &Episode) -> Result<Rollout> {
    let budgets = episode.budget_vector();
    check_episode_feasible(problem, &budgets, episode.horizon())?;
    let actions = match problem.offline_optimum(&episode.contexts, &budgets) {
        Some(sol) => sol?,
        None => solve_stacked(problem, episode)?,
    };
    Ok(Rollout::from_actions(problem, episode, actions, Vec::new()))
}

/// Full-information optimum through the generic barrier solver.
pub fn solve_stacked<P: Problem + ?Sized>(problem: &P, episode: &Episode) -> Result<Vec<Vector>> {
    let n = episode.horizon();
    let stacked = StackedProblem::new(problem, n);
    let flat: Vec<f64> = episode.contexts.iter().flatten().cloned().collect();
    let m = problem.dims().resources;
    let sol = solve_opt_layer(&stacked, &flat, &Vector::zeros(m), &episode.budget_vector())?;
    Ok((0..n).map(|t| stacked.block(&sol.x, t)).collect())
}

/// `x_t = clamp(B/N)` for scalar allocation families.
pub fn run_equal<P: Problem + ?Sized>(problem: &P, episode: &Episode) -> Result<Rollout> {
    if !problem.is_scalar_allocation() {
        return Err(Error::Unsupported("equal split needs a scalar allocation family".into()));
    }
    let share = episode.budgets[0] / episode.horizon() as f64;
    let x = problem.bounds().clamp(&Vector::from_element(1, share));
    let actions = vec![x; episode.horizon()];
    Ok(Rollout::from_actions(problem, episode, actions, Vec::new()))
}

fn reserve<P: Problem + ?Sized>(problem: &P, enabled: bool, steps_left: usize) -> Vector {
    match (enabled, problem.min_step_consumption()) {
        (true, Some(g)) => g * steps_left as f64,
        _ => Vector::zeros(problem.dims().resources),
    }
}

/// Runs the per-step layer with multipliers produced by `update`, which maps
/// `(λ_t, g(x_t, c_t), B/N)` to `λ_{t+1}`.
fn run_dual<P, F>(
    problem: &P,
    episode: &Episode,
    lambda0: Vector,
    cfg: &BaselineConfig,
    last_step_fix: bool,
    mut update: F,
) -> Result<Rollout>
where
    P: Problem + ?Sized,
    F: FnMut(&Vector, &Vector, &Vector) -> Vector,
{
    let n = episode.horizon();
    let budgets = episode.budget_vector();
    check_episode_feasible(problem, &budgets, n)?;
    let per_step = &budgets / n as f64;
    let mut state = BudgetState::new(budgets);
    let mut lambda = lambda0;
    let mut actions = Vec::with_capacity(n);
    let mut multipliers = Vec::with_capacity(n);
    for (t, c) in episode.contexts.iter().enumerate() {
        let used = if last_step_fix && t + 1 == n {
            Vector::zeros(lambda.len())
        } else {
            lambda.clone()
        };
        let b_eff = &state.remaining - reserve(problem, cfg.reserve, n - t - 1);
        let sol = solve_opt_layer(problem, c, &used, &b_eff)?;
        let g = problem.constraints(&sol.x, c);
        state.consume(&g);
        lambda = update(&lambda, &g, &per_step);
        multipliers.push(used);
        actions.push(sol.x);
    }
    Ok(Rollout::from_actions(problem, episode, actions, multipliers))
}

/// Fixed multiplier `λ_P` at every step, with no last-step fix.
pub fn run_avg_lt<P: Problem + ?Sized>(problem: &P, episode: &Episode, lambda_p: &Vector, cfg: &BaselineConfig) -> Result<Rollout> {
    if lambda_p.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Invalid("λ_P must be finite and nonnegative".into()));
    }
    run_dual(problem, episode, lambda_p.clone(), cfg, false, |l, _, _| l.clone())
}

/// Sample-average per-episode consumption of the relaxed problem at `λ·1`.
fn relaxed_consumption<P: Problem + ?Sized>(problem: &P, episodes: &[Episode], lambda: f64) -> Result<Vector> {
    let m = problem.dims().resources;
    let lam = Vector::from_element(m, lambda);
    let free = Vector::from_element(m, f64::INFINITY);
    let per_episode: Vec<Vector> = episodes
        .par_iter()
        .map(|ep| {
            let mut total = Vector::zeros(m);
            for c in &ep.contexts {
                let sol = solve_opt_layer(problem, c, &lam, &free)?;
                total += problem.constraints(&sol.x, c);
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    let mut sum = Vector::zeros(m);
    for v in &per_episode {
        sum += v;
    }
    Ok(sum / episodes.len() as f64)
}

/// Multiplier `λ_P` (shared by all resources) at which the relaxed problem's
/// average consumption matches the average budget within 0.1%.
pub fn calibrate_avg_lt<P: Problem + ?Sized>(problem: &P, episodes: &[Episode]) -> Result<Vector> {
    if episodes.is_empty() {
        return Err(Error::Invalid("calibration set is empty".into()));
    }
    let m = problem.dims().resources;
    let mut mean_budget = Vector::zeros(m);
    for ep in episodes {
        mean_budget += ep.budget_vector();
    }
    mean_budget /= episodes.len() as f64;
    // ratio(λ) = max_m consumption_m / budget_m, nonincreasing in λ
    let ratio = |lambda: f64| -> Result<f64> {
        let cons = relaxed_consumption(problem, episodes, lambda)?;
        Ok((0..m).map(|k| cons[k] / mean_budget[k]).fold(f64::NEG_INFINITY, f64::max))
    };
    let scalar = |v: f64| Vector::from_element(m, v);
    if ratio(0.0)? <= 1.0 {
        return Ok(scalar(0.0));
    }
    let mut hi = 1.0;
    while ratio(hi)? > 1.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Ok(scalar(hi));
        }
    }
    let mut lo = 0.0;
    let mut best = hi;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = ratio(mid)?;
        if (r - 1.0).abs() <= 1e-3 {
            best = mid;
            break;
        }
        if r > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        best = hi;
    }
    Ok(scalar(best))
}

/// `λ_{t+1} = max(λ_t + η(g − B/N), 0)`.
pub fn dgd_update(lambda: &Vector, usage: &Vector, per_step: &Vector, eta: f64) -> Vector {
    (lambda + (usage - per_step) * eta).map(|v| v.max(0.0))
}

pub const MW_CLIP: (f64, f64) = (1e-6, 1e6);

/// `λ_{t+1} = λ_t · exp(η (g − B/N)/(B/N))`, clipped to `MW_CLIP`.
pub fn mw_update(lambda: &Vector, usage: &Vector, per_step: &Vector, eta: f64) -> Vector {
    Vector::from_iterator(
        lambda.len(),
        (0..lambda.len()).map(|m| {
            let drift = (usage[m] - per_step[m]) / per_step[m];
            (lambda[m] * (eta * drift).exp()).clamp(MW_CLIP.0, MW_CLIP.1)
        }),
    )
}

/// Dual gradient descent starting from `λ₁ = 0`.
pub fn run_dgd<P: Problem + ?Sized>(problem: &P, episode: &Episode, eta: f64, cfg: &BaselineConfig) -> Result<Rollout> {
    if !(eta > 0.0) {
        return Err(Error::Invalid("DGD step size must be positive".into()));
    }
    let m = problem.dims().resources;
    run_dual(problem, episode, Vector::zeros(m), cfg, cfg.last_step_fix, |l, g, s| {
        dgd_update(l, g, s, eta)
    })
}

/// Multiplicative-weights multiplier updates starting from `λ₁ = cfg.mw_init`.
pub fn run_mw<P: Problem + ?Sized>(problem: &P, episode: &Episode, eta: f64, cfg: &BaselineConfig) -> Result<Rollout> {
    if !(eta > 0.0) {
        return Err(Error::Invalid("MW step size must be positive".into()));
    }
    if !(cfg.mw_init > 0.0) {
        return Err(Error::Invalid("MW initial multiplier must be positive".into()));
    }
    let m = problem.dims().resources;
    run_dual(problem, episode, Vector::from_element(m, cfg.mw_init), cfg, cfg.last_step_fix, |l, g, s| {
        mw_update(l, g, s, eta)
    })
}

/// Network that outputs the allocation directly; its output is projected onto
/// `{x_min ≤ x ≤ min(x_max, b_t − reserve)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectPolicy {
    pub net: ModelParams,
    /// Multiplies the softplus output.
    pub action_scale: f64,
    pub reserve: bool,
}

impl DirectPolicy {
    pub fn new<P: Problem + ?Sized>(problem: &P, kind: ModelKind, norm: Normalization, seed: u64) -> Result<Self> {
        if !problem.is_scalar_allocation() {
            return Err(Error::Unsupported("the direct policy needs a scalar allocation family".into()));
        }
        let dims = problem.dims();
        Ok(Self {
            net: ModelParams::random(kind, dims.resources, dims.context, dims.action, norm, seed),
            action_scale: problem.action_scale(),
            reserve: true,
        })
    }

    fn rollout(&self, problem: &dyn Problem, episode: &Episode, with_grad: bool) -> Result<(Rollout, Vec<f64>)> {
        if !problem.is_scalar_allocation() {
            return Err(Error::Unsupported("the direct policy needs a scalar allocation family".into()));
        }
        let n = episode.horizon();
        check_episode_feasible(problem, &episode.budget_vector(), n)?;
        let (lo, hi) = (problem.bounds().lower[0], problem.bounds().upper[0]);
        let n_params = self.net.num_params();
        let mut budget = episode.budgets[0];
        let mut budget_jac = vec![0.0; n_params];
        let mut grad = vec![0.0; n_params];
        let mut actions = Vec::with_capacity(n);
        for (t, c) in episode.contexts.iter().enumerate() {
            let tbar = (n - t - 1) as f64 / n as f64;
            let b = Vector::from_element(1, budget);
            let raw = self.action_scale * self.net.forward(&b, c, tbar)[0];
            let b_eff = budget - reserve(problem, self.reserve, n - t - 1)[0];
            let cap = hi.min(b_eff);
            if cap < lo - crate::problem::FEASIBILITY_TOL {
                return Err(Error::Infeasible(format!("step {}: remaining budget below x_min", t + 1)));
            }
            let cap = cap.max(lo);
            let x = raw.max(lo).min(cap);
            if !x.is_finite() {
                return Err(Error::Numerical {
                    step: t + 1,
                    what: "non-finite direct-policy action".into(),
                });
            }
            if with_grad {
                let mut x_jac = vec![0.0; n_params];
                if raw > lo && raw < cap {
                    let mg = self.net.backward(&b, c, tbar);
                    for (i, v) in x_jac.iter_mut().enumerate() {
                        *v = self.action_scale * (mg.d_params[(0, i)] + mg.d_budget[(0, 0)] * budget_jac[i]);
                    }
                } else if raw >= cap && b_eff < hi && b_eff > lo {
                    x_jac.copy_from_slice(&budget_jac);
                }
                let xv = Vector::from_element(1, x);
                let dl = problem.loss_gradient(&xv, c)[0];
                for i in 0..n_params {
                    grad[i] += dl * x_jac[i];
                    budget_jac[i] -= x_jac[i];
                }
            }
            budget -= x;
            actions.push(Vector::from_element(1, x));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                step: n,
                what: "non-finite direct-policy gradient".into(),
            });
        }
        Ok((Rollout::from_actions(problem, episode, actions, Vec::new()), grad))
    }
}

impl EpisodePolicy for DirectPolicy {
    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    fn episode_loss(&self, problem: &dyn Problem, episode: &Episode) -> Result<f64> {
        Ok(self.rollout(problem, episode, false)?.0.total_loss)
    }

    fn loss_and_gradient(&self, problem: &dyn Problem, episode: &Episode) -> Result<(f64, Vec<f64>)> {
        let (r, g) = self.rollout(problem, episode, true)?;
        Ok((r.total_loss, g))
    }
}

pub fn run_direct_policy(problem: &dyn Problem, episode: &Episode, policy: &DirectPolicy) -> Result<Rollout> {
    Ok(policy.rollout(problem, episode, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{check_feasibility, QuadraticFamily};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fairness_episode(rng: &mut ChaCha8Rng, n: usize) -> Episode {
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let b = rng.random_range(10.0 * n as f64..15.0 * n as f64);
        Episode::scalar("r", &c, b).unwrap()
    }

    fn xs(r: &Rollout) -> Vec<f64> {
        r.actions.iter().map(|x| x[0]).collect()
    }

    #[test]
    fn water_filling_examples() {
        let f = FairnessFamily::default();
        let r = solve_offline_opt(&f, &Episode::scalar("a", &[1.0, 1.0, 2.0], 8.0).unwrap()).unwrap();
        for (x, e) in xs(&r).iter().zip([2.0, 2.0, 4.0]) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-9);
        }
        let expected = 2.0 * 2f64.ln() + 2.0 * 4f64.ln();
        assert_abs_diff_eq!(r.utility(), expected, epsilon = 1e-9);

        let r = solve_offline_opt(&f, &Episode::scalar("b", &[1.0, 1.0], 2.0).unwrap()).unwrap();
        assert_eq!(xs(&r), vec![1.0, 1.0]);
        let r = solve_offline_opt(&f, &Episode::scalar("c", &[1.0, 1.0], 100.0).unwrap()).unwrap();
        assert_eq!(xs(&r), vec![40.0, 40.0]);
    }

    #[test]
    fn water_filling_matches_independent_oracles() {
        let f = FairnessFamily::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let ep = fairness_episode(&mut rng, 5);
            let wf = solve_offline_opt(&f, &ep).unwrap();
            let stacked = solve_stacked(&f, &ep).unwrap();
            let su: f64 = stacked.iter().zip(&ep.contexts).map(|(x, c)| -f.loss(x, c)).sum();
            assert!((wf.utility() - su).abs() < 1e-7, "{} vs {}", wf.utility(), su);
            // no feasible perturbation improves on the optimum
            let x = xs(&wf);
            for _ in 0..200 {
                let (i, j) = (rng.random_range(0..5), rng.random_range(0..5));
                let d = rng.random_range(-2.0..2.0);
                let mut y = x.clone();
                y[i] = (y[i] + d).clamp(1.0, 40.0);
                y[j] = (y[j] - d).clamp(1.0, 40.0);
                if y.iter().sum::<f64>() > ep.budgets[0] {
                    continue;
                }
                let u: f64 = y.iter().zip(&ep.contexts).map(|(y, c)| c[0] * y.ln()).sum();
                assert!(u <= wf.utility() + 1e-9);
            }
        }
    }

    #[test]
    fn stacked_quadratic_matches_shift_formula() {
        let toy = QuadraticFamily::scalar_toy(None);
        let ep = Episode::scalar("q", &[1.0, 2.0, 3.0], 3.0).unwrap();
        let r = solve_offline_opt(&toy, &ep).unwrap();
        for (x, e) in xs(&r).iter().zip([0.0, 1.0, 2.0]) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-7);
        }
    }

    #[test]
    fn equal_split_examples() {
        let f = FairnessFamily::default();
        let n = 20;
        let ones = vec![1.0; n];
        let r = run_equal(&f, &Episode::scalar("a", &ones, 260.0).unwrap()).unwrap();
        assert!(xs(&r).iter().all(|x| *x == 13.0));
        let ep = Episode::scalar("b", &ones, 10.0).unwrap();
        let r = run_equal(&f, &ep).unwrap();
        assert!(xs(&r).iter().all(|x| *x == 1.0));
        assert!(check_feasibility(&f, &ep, &r.actions).is_err());
        let r = run_equal(&f, &Episode::scalar("c", &ones, 1000.0).unwrap()).unwrap();
        assert!(xs(&r).iter().all(|x| *x == 40.0));
    }

    #[test]
    fn avg_lt_extremes() {
        let f = FairnessFamily::default();
        let ep = Episode::scalar("a", &[1.0, 2.0, 0.5, 1.0], 50.0).unwrap();
        let cfg = BaselineConfig::default();
        let r = run_avg_lt(&f, &ep, &Vector::from_element(1, 0.0), &cfg).unwrap();
        // greedy: min(b − reserve, 40)
        assert_eq!(xs(&r), vec![40.0, 8.0, 1.0, 1.0]);
        let r = run_avg_lt(&f, &ep, &Vector::from_element(1, 1e9), &cfg).unwrap();
        assert!(xs(&r).iter().all(|x| *x == 1.0));
    }

    #[test]
    fn avg_lt_calibration() {
        let f = FairnessFamily::default();
        let one = Episode::scalar("s", &[1.0], 10.0).unwrap();
        let lp = calibrate_avg_lt(&f, &[one]).unwrap()[0];
        assert!(((1.0 / lp).clamp(1.0, 40.0) - 10.0).abs() <= 1e-2);

        let rich = Episode::scalar("r", &[1.0, 2.0], 100.0).unwrap();
        assert_eq!(calibrate_avg_lt(&f, &[rich]).unwrap()[0], 0.0);

        // lognormal-ish contexts with mean ~1, E[B] = 12.5N
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10;
        let eps: Vec<Episode> = (0..200)
            .map(|i| {
                let c: Vec<f64> = (0..n).map(|_| (rng.random_range(-1.0f64..1.0)).exp() / 1.1752).collect();
                Episode::scalar(format!("{i}"), &c, rng.random_range(100.0..150.0)).unwrap()
            })
            .collect();
        let lp = calibrate_avg_lt(&f, &eps).unwrap()[0];
        let mean_b: f64 = eps.iter().map(|e| e.budgets[0]).sum::<f64>() / eps.len() as f64;
        let mean_use: f64 = eps
            .iter()
            .map(|e| e.contexts.iter().map(|c| (c[0] / lp).clamp(1.0, 40.0)).sum::<f64>())
            .sum::<f64>()
            / eps.len() as f64;
        assert!((mean_use - mean_b).abs() / mean_b < 0.01, "{mean_use} vs {mean_b}");
    }

    #[test]
    fn calibration_is_monotone_in_budget_scale() {
        let f = FairnessFamily::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base: Vec<Episode> = (0..50).map(|_| fairness_episode(&mut rng, 10)).collect();
        let scaled = |s: f64| -> Vec<Episode> {
            base.iter()
                .map(|e| Episode::new(e.id.clone(), e.contexts.clone(), vec![e.budgets[0] * s]).unwrap())
                .collect()
        };
        let l: Vec<f64> = [0.8, 1.0, 1.2].iter().map(|s| calibrate_avg_lt(&f, &scaled(*s)).unwrap()[0]).collect();
        assert!(l[0] >= l[1] && l[1] >= l[2], "{l:?}");
    }

    #[test]
    fn dual_update_examples() {
        let v = |x: f64| Vector::from_element(1, x);
        assert_abs_diff_eq!(dgd_update(&v(0.0), &v(15.0), &v(13.0), 0.1)[0], 0.2, epsilon = 1e-15);
        assert_eq!(dgd_update(&v(0.0), &v(13.0), &v(13.0), 0.1)[0], 0.0);
        assert_eq!(mw_update(&v(0.7), &v(13.0), &v(13.0), 0.5)[0], 0.7);
        assert_abs_diff_eq!(mw_update(&v(0.7), &v(26.0), &v(13.0), 1.0)[0], 0.7 * std::f64::consts::E, epsilon = 1e-15);
    }

    #[test]
    fn dgd_constant_consumption_keeps_zero_multiplier() {
        // toy: x = c − λ; c_t = B/N with λ = 0 consumes exactly B/N
        let toy = QuadraticFamily::scalar_toy(None);
        let ep = Episode::scalar("q", &[2.0, 2.0, 2.0, 2.0], 8.0).unwrap();
        let r = run_dgd(&toy, &ep, 0.3, &BaselineConfig::default()).unwrap();
        assert!(r.multipliers.iter().all(|l| l[0] == 0.0));
    }

    #[test]
    fn online_baselines_feasible_and_dominated_by_opt() {
        let f = FairnessFamily::default();
        let cfg = BaselineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cal: Vec<Episode> = (0..30).map(|_| fairness_episode(&mut rng, 10)).collect();
        let lp = calibrate_avg_lt(&f, &cal).unwrap();
        let direct = DirectPolicy::new(&f, ModelKind::paper_mlp(), Normalization::identity(1), 2).unwrap();
        for _ in 0..200 {
            let ep = fairness_episode(&mut rng, 10);
            let opt = solve_offline_opt(&f, &ep).unwrap();
            let runs = [
                run_equal(&f, &ep).unwrap(),
                run_avg_lt(&f, &ep, &lp, &cfg).unwrap(),
                run_dgd(&f, &ep, cfg.dgd_step(10), &cfg).unwrap(),
                run_mw(&f, &ep, cfg.mw_step(10), &cfg).unwrap(),
                run_direct_policy(&f, &ep, &direct).unwrap(),
            ];
            for r in &runs {
                check_feasibility(&f, &ep, &r.actions).unwrap();
                assert!(opt.utility() >= r.utility() - 1e-6);
            }
            assert!(runs[2].multipliers.iter().chain(&runs[3].multipliers).all(|l| l[0] >= 0.0));
        }
    }

    #[test]
    fn last_step_fix_spends_remaining_budget() {
        let f = FairnessFamily::default();
        let ep = Episode::scalar("a", &[1.0, 1.0, 1.0], 30.0).unwrap();
        let r = run_mw(&f, &ep, 0.5, &BaselineConfig::default()).unwrap();
        let x = xs(&r);
        // λ₁ = 1 → x₁ = 1; drift pushes λ down; last step takes the rest up to 40.
        assert_eq!(x[0], 1.0);
        assert_abs_diff_eq!(x[2], (30.0 - x[0] - x[1]).min(40.0), epsilon = 1e-12);
    }

    #[test]
    fn direct_policy_examples() {
        let f = FairnessFamily::default();
        let zero = DirectPolicy {
            net: ModelParams::zeros(ModelKind::paper_mlp(), 1, 1, 1, Normalization::identity(1)),
            action_scale: 40.0,
            reserve: true,
        };
        let ep = Episode::scalar("a", &[1.0, 1.0, 1.0], 40.0).unwrap();
        let r = run_direct_policy(&f, &ep, &zero).unwrap();
        let target = 40.0 * 2f64.ln();
        assert_abs_diff_eq!(r.actions[0][0], target, epsilon = 1e-12);
        check_feasibility(&f, &ep, &r.actions).unwrap();
        // step 2 is capped by what the reserve leaves, step 3 gets x_min
        assert_abs_diff_eq!(r.actions[1][0], 40.0 - target - 1.0, epsilon = 1e-12);
        assert_eq!(r.actions[2][0], 1.0);
    }

    #[test]
    fn direct_policy_gradient_matches_fd() {
        let f = FairnessFamily::default();
        let norm = Normalization {
            budget_scale: 200.0,
            context_scale: vec![2.0],
        };
        let mut policy = DirectPolicy::new(&f, ModelKind::paper_mlp(), norm, 11).unwrap();
        policy.action_scale = 15.0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..5 {
            let ep = fairness_episode(&mut rng, 6);
            let (_, g) = policy.loss_and_gradient(&f, &ep).unwrap();
            for i in 0..policy.params().len() {
                let mut p = policy.clone();
                p.params_mut()[i] += h;
                let mut m = policy.clone();
                m.params_mut()[i] -= h;
                let fd = (p.episode_loss(&f, &ep).unwrap() - m.episode_loss(&f, &ep).unwrap()) / (2.0 * h);
                assert!((g[i] - fd).abs() / fd.abs().max(1.0) < 1e-4, "{i}: {} vs {fd}", g[i]);
            }
        }
    }
}
