//! The unrolled decision recurrence: predict `λ_t`, solve the layer, update
//! the budget; and backpropagation through the whole episode.

use crate::error::{Error, Result};
use crate::model::MultiplierModel;
use crate::opt_layer::{differentiate_kkt, solve_opt_layer, KktGradients, OptSolution};
use crate::problem::{BudgetState, Episode, Matrix, Problem, Vector, FEASIBILITY_TOL};

/// How `∂b_{t+1}/∂θ` is accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetRecurrence {
    /// Total derivative through both the `λ` and the `b` inputs of `x_t`.
    #[default]
    Full,
    /// Only the `λ` path through `x_t`; ignores how `b_t` shapes `x_t`.
    LambdaPathOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnrollConfig {
    /// Hold back `(N − t) · g_min` so every later step stays feasible.
    pub reserve: bool,
    pub recurrence: BudgetRecurrence,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            reserve: true,
            recurrence: BudgetRecurrence::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// `b_t` before the step.
    pub budget: Vector,
    /// Budget handed to the layer after the reservation.
    pub effective_budget: Vector,
    pub context: Vec<f64>,
    /// `t̄ = (N − t)/N`.
    pub tbar: f64,
    pub lambda: Vector,
    pub solution: OptSolution,
    pub consumption: Vector,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTrace {
    pub episode_id: String,
    pub initial_budget: Vector,
    pub steps: Vec<StepRecord>,
    pub gradients: Vec<KktGradients>,
    pub final_budget: Vector,
    pub total_loss: f64,
}

impl PipelineTrace {
    pub fn actions(&self) -> Vec<Vector> {
        self.steps.iter().map(|s| s.solution.x.clone()).collect()
    }

    /// Steps whose layer gradients came from the pseudo-inverse fallback.
    pub fn inexact_steps(&self) -> Vec<usize> {
        self.gradients
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.exact)
            .map(|(t, _)| t + 1)
            .collect()
    }

    pub fn utility(&self) -> f64 {
        -self.total_loss
    }
}

/// `∂(Σ_t l(x_t, c_t))/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGradient {
    pub gradient: Vec<f64>,
    pub inexact_steps: usize,
}

fn reserve_for<P: Problem + ?Sized>(problem: &P, cfg: &UnrollConfig, steps_left: usize) -> Vector {
    let m = problem.dims().resources;
    match (cfg.reserve, problem.min_step_consumption()) {
        (true, Some(g_min)) => g_min * steps_left as f64,
        _ => Vector::zeros(m),
    }
}

/// Errors unless `B ≥ N · g_min` on every coordinate.
pub fn check_episode_feasible<P: Problem + ?Sized>(problem: &P, budgets: &Vector, horizon: usize) -> Result<()> {
    if let Some(g_min) = problem.min_step_consumption() {
        let need = &g_min * horizon as f64;
        for m in 0..budgets.len() {
            if need[m] > budgets[m] + FEASIBILITY_TOL {
                return Err(Error::Infeasible(format!(
                    "budget {} cannot cover {horizon} steps of minimum usage {}",
                    budgets[m], g_min[m]
                )));
            }
        }
    }
    Ok(())
}

/// Step-by-step executor: each call sees only the context of the current step.
pub struct Unroller<'a, M: ?Sized, P: ?Sized> {
    model: &'a M,
    problem: &'a P,
    cfg: UnrollConfig,
    horizon: usize,
    state: BudgetState,
}

impl<'a, M: MultiplierModel + ?Sized, P: Problem + ?Sized> Unroller<'a, M, P> {
    pub fn new(model: &'a M, problem: &'a P, budgets: Vector, horizon: usize, cfg: UnrollConfig) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        if budgets.len() != problem.dims().resources {
            return Err(Error::Invalid("budget dimension mismatch".into()));
        }
        check_episode_feasible(problem, &budgets, horizon)?;
        Ok(Self {
            model,
            problem,
            cfg,
            horizon,
            state: BudgetState::new(budgets),
        })
    }

    pub fn remaining(&self) -> &Vector {
        &self.state.remaining
    }

    pub fn steps_taken(&self) -> usize {
        self.state.step
    }

    pub fn step(&mut self, context: &[f64]) -> Result<StepRecord> {
        let t = self.state.step + 1;
        if t > self.horizon {
            return Err(Error::Invalid(format!("episode already has {} steps", self.horizon)));
        }
        self.problem.validate_context(context)?;
        let budget = self.state.remaining.clone();
        let tbar = (self.horizon - t) as f64 / self.horizon as f64;
        let lambda = if t == self.horizon {
            Vector::zeros(self.problem.dims().resources)
        } else {
            self.model.forward(&budget, context, tbar)
        };
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                what: "model produced a non-finite multiplier".into(),
            });
        }
        let effective_budget = &budget - reserve_for(self.problem, &self.cfg, self.horizon - t);
        let solution = solve_opt_layer(self.problem, context, &lambda, &effective_budget)?;
        let consumption = self.problem.constraints(&solution.x, context);
        let loss = self.problem.loss(&solution.x, context);
        self.state.consume(&consumption);
        Ok(StepRecord {
            budget,
            effective_budget,
            context: context.to_vec(),
            tbar,
            lambda,
            solution,
            consumption,
            loss,
        })
    }
}

/// Runs the full recurrence over an episode and caches the layer gradients.
pub fn forward_episode<M: MultiplierModel + ?Sized, P: Problem + ?Sized>(
    model: &M,
    problem: &P,
    episode: &Episode,
    cfg: &UnrollConfig,
) -> Result<PipelineTrace> {
    let initial_budget = episode.budget_vector();
    let mut unroller = Unroller::new(model, problem, initial_budget.clone(), episode.horizon(), *cfg)?;
    let mut steps = Vec::with_capacity(episode.horizon());
    let mut gradients = Vec::with_capacity(episode.horizon());
    let mut total_loss = 0.0;
    for context in &episode.contexts {
        let record = unroller.step(context)?;
        gradients.push(differentiate_kkt(
            problem,
            &record.solution,
            context,
            &record.lambda,
            &record.effective_budget,
        ));
        total_loss += record.loss;
        steps.push(record);
    }
    Ok(PipelineTrace {
        episode_id: episode.id.clone(),
        initial_budget,
        steps,
        gradients,
        final_budget: unroller.remaining().clone(),
        total_loss,
    })
}

/// Episode loss only, without layer differentiation.
pub fn episode_loss<M: MultiplierModel + ?Sized, P: Problem + ?Sized>(
    model: &M,
    problem: &P,
    episode: &Episode,
    cfg: &UnrollConfig,
) -> Result<f64> {
    let mut unroller = Unroller::new(model, problem, episode.budget_vector(), episode.horizon(), *cfg)?;
    let mut total = 0.0;
    for context in &episode.contexts {
        total += unroller.step(context)?.loss;
    }
    Ok(total)
}

/// Backpropagates the episode loss to the model parameters.
///
/// With `J_λ = ∂x_t/∂λ_t`, `J_b = ∂x_t/∂b_t`:
/// `∂λ_t/∂θ = ∂f/∂θ + ∂f/∂b · ∂b_t/∂θ` (zero at `t = N`),
/// `∂x_t/∂θ = J_λ ∂λ_t/∂θ + J_b ∂b_t/∂θ`,
/// `∂b_{t+1}/∂θ = ∂b_t/∂θ − ∇ₓg · ∂x_t/∂θ`, starting from `∂b_1/∂θ = 0`.
pub fn backward_episode<M: MultiplierModel + ?Sized, P: Problem + ?Sized>(
    trace: &PipelineTrace,
    model: &M,
    problem: &P,
    cfg: &UnrollConfig,
) -> Result<ThetaGradient> {
    let n_params = model.num_params();
    let m = problem.dims().resources;
    let horizon = trace.steps.len();
    let mut budget_jac = Matrix::zeros(m, n_params);
    let mut gradient = Vector::zeros(n_params);

    for (idx, (step, kkt)) in trace.steps.iter().zip(&trace.gradients).enumerate() {
        let t = idx + 1;
        let x = &step.solution.x;
        let lambda_path = if t == horizon {
            Matrix::zeros(x.len(), n_params)
        } else {
            let mg = model.backward(&step.budget, &step.context, step.tbar);
            let lambda_jac = mg.d_params + mg.d_budget * &budget_jac;
            &kkt.dx_dlambda * lambda_jac
        };
        let budget_path = &kkt.dx_db * &budget_jac;
        let x_jac = &lambda_path + &budget_path;

        let loss_grad = problem.loss_gradient(x, &step.context);
        gradient += x_jac.transpose() * loss_grad;

        let usage_jac = problem.constraint_jacobian(x, &step.context);
        match cfg.recurrence {
            BudgetRecurrence::Full => budget_jac -= usage_jac * x_jac,
            BudgetRecurrence::LambdaPathOnly => budget_jac -= usage_jac * lambda_path,
        }

        if gradient.iter().chain(budget_jac.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                what: "non-finite gradient during backpropagation".into(),
            });
        }
    }
    Ok(ThetaGradient {
        gradient: gradient.as_slice().to_vec(),
        inexact_steps: trace.inexact_steps().len(),
    })
}

/// Streams actions: pulls one context, commits its action, then moves on.
pub struct OnlineActions<'a, M: ?Sized, P: ?Sized, I> {
    unroller: Unroller<'a, M, P>,
    contexts: I,
    horizon: usize,
    failed: bool,
}

impl<'a, M, P, I> Iterator for OnlineActions<'a, M, P, I>
where
    M: MultiplierModel + ?Sized,
    P: Problem + ?Sized,
    I: Iterator<Item = Vec<f64>>,
{
    type Item = Result<Vector>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.unroller.steps_taken() >= self.horizon {
            return None;
        }
        let context = self.contexts.next()?;
        match self.unroller.step(&context) {
            Ok(record) => Some(Ok(record.solution.x)),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Online inference over a stream of contexts revealed one at a time.
pub fn infer_online<'a, M, P, I>(
    model: &'a M,
    problem: &'a P,
    budgets: Vector,
    horizon: usize,
    contexts: I,
    cfg: UnrollConfig,
) -> Result<OnlineActions<'a, M, P, I::IntoIter>>
where
    M: MultiplierModel + ?Sized,
    P: Problem + ?Sized,
    I: IntoIterator<Item = Vec<f64>>,
{
    Ok(OnlineActions {
        unroller: Unroller::new(model, problem, budgets, horizon, cfg)?,
        contexts: contexts.into_iter(),
        horizon,
        failed: false,
    })
}
