//! Finite-difference audits of the layer Jacobians and of the end-to-end
//! parameter gradient.

use laau_core::opt_layer::{check_kkt_conditions, differentiate_kkt, solve_opt_layer, ConstraintRef, OptSolution};
use laau_core::problem::{BoxBounds, Matrix, QuadraticFamily, Vector};
use laau_core::unroll::{backward_episode, episode_loss, forward_episode, BudgetRecurrence, UnrollConfig};
use laau_core::{Episode, FairnessFamily, ModelKind, ModelParams, MultiplierModel, Normalization, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;

/// Perturbation for the central differences.
const FD_STEP: f64 = 1e-6;

/// Margin from a change of active set required for a finite difference to be
/// meaningful: inactive slacks and active duals both exceed it.
const FD_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub layer_instances: usize,
    pub pipeline_episodes: usize,
    pub pipeline_horizon: usize,
    pub seed: u64,
    /// Use the λ-path-only budget recurrence.
    pub lambda_path_only: bool,
    /// Restrict the pipeline suite to episodes whose budget binds before the
    /// last step.
    pub budget_active: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            layer_instances: 200,
            pipeline_episodes: 20,
            pipeline_horizon: 4,
            seed: 0,
            lambda_path_only: false,
            budget_active: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub instances: usize,
    /// Drawn instances skipped by the condition checker or the margin test.
    pub rejected: usize,
    pub max_rel_dlambda: f64,
    pub max_rel_db: f64,
    pub max_rel_dc: f64,
    pub active_constraint_counts: Vec<usize>,
}

impl LayerCheck {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_dlambda.max(self.max_rel_db).max(self.max_rel_dc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCheck {
    pub episodes: usize,
    pub max_rel: f64,
    pub inexact_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub layer: LayerCheck,
    pub pipeline: PipelineCheck,
    pub layer_pass: bool,
    pub pipeline_pass: bool,
}

/// `max |a − b| / max(max |b|, 1)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = numeric.amax().max(1.0);
    (analytic - numeric).amax() / scale
}

/// Random convex instance with `p = 2` contexts that is strictly feasible at
/// `x = 0`: `(family, c, λ, b)`.
pub fn random_instance(rng: &mut ChaCha8Rng, d: usize, m: usize) -> (QuadraticFamily, Vec<f64>, Vector, Vector) {
    let p = 2;
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let l = Matrix::from_fn(d, d, |_, _| u(-1.0, 1.0));
    let q_matrix = &l * l.transpose() + Matrix::identity(d, d) * 0.5;
    let context_map = Matrix::from_fn(d, p, |_, _| u(-1.0, 1.0));
    let linear = Vector::from_fn(d, |_, _| u(-0.5, 0.5));
    let curvature = (0..m).map(|_| u(0.0, 0.5)).collect();
    let usage = Matrix::from_fn(m, d, |_, _| u(-1.0, 1.0));
    let context_usage = Matrix::from_fn(m, p, |_, _| u(-0.5, 0.5));
    let offset = Vector::from_fn(m, |_, _| u(0.0, 0.5));
    let lower = Vector::from_fn(d, |_, _| u(-2.0, -0.3));
    let upper = Vector::from_fn(d, |_, _| u(0.3, 2.0));
    let family = QuadraticFamily {
        q_matrix,
        context_map,
        linear,
        curvature,
        usage,
        context_usage,
        offset,
        bounds: BoxBounds::new(lower, upper),
    };
    let c: Vec<f64> = (0..p).map(|_| u(-1.5, 1.5)).collect();
    let lambda = Vector::from_fn(m, |_, _| u(0.0, 1.0));
    let g0 = family.constraints(&Vector::zeros(d), &c);
    let b = Vector::from_fn(m, |i, _| g0[i] + u(0.05, 1.0));
    (family, c, lambda, b)
}

fn has_fd_margin<P: Problem + ?Sized>(problem: &P, sol: &OptSolution, c: &[f64], b: &Vector) -> bool {
    let g = problem.constraints(&sol.x, c);
    let bounds = problem.bounds();
    let d = sol.x.len();
    let mut all = Vec::new();
    for m in 0..g.len() {
        all.push((ConstraintRef::Resource(m), b[m] - g[m]));
    }
    for i in 0..d {
        all.push((ConstraintRef::Lower(i), sol.x[i] - bounds.lower[i]));
        all.push((ConstraintRef::Upper(i), bounds.upper[i] - sol.x[i]));
    }
    all.iter().all(|&(con, slack)| {
        if sol.active_set.contains(&con) {
            sol.dual(con) > FD_MARGIN
        } else {
            slack > FD_MARGIN
        }
    })
}

fn fd_columns<F: Fn(usize, f64) -> Vector>(d: usize, n: usize, solve: F) -> Matrix {
    let mut out = Matrix::zeros(d, n);
    for j in 0..n {
        let col = (solve(j, FD_STEP) - solve(j, -FD_STEP)) / (2.0 * FD_STEP);
        out.set_column(j, &col);
    }
    out
}

struct LayerSample {
    errors: (f64, f64, f64),
    active: usize,
}

fn check_one(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Option<LayerSample> {
    let (fam, c, lambda, b) = random_instance(rng, d, m);
    let sol = solve_opt_layer(&fam, &c, &lambda, &b).ok()?;
    if !check_kkt_conditions(&fam, &sol, &c).exact() || !has_fd_margin(&fam, &sol, &c, &b) {
        return None;
    }
    let grads = differentiate_kkt(&fam, &sol, &c, &lambda, &b);
    let x_at = |lam: &Vector, bb: &Vector, cc: &[f64]| solve_opt_layer(&fam, cc, lam, bb).map(|s| s.x);
    let mut ok = true;
    let mut solve_or_flag = |r: laau_core::Result<Vector>| {
        r.unwrap_or_else(|_| {
            ok = false;
            Vector::zeros(d)
        })
    };
    let mut num_l = Matrix::zeros(d, m);
    let mut num_b = Matrix::zeros(d, m);
    for j in 0..m {
        let mut lp = lambda.clone();
        lp[j] += FD_STEP;
        let mut lm = lambda.clone();
        lm[j] -= FD_STEP;
        let col = (solve_or_flag(x_at(&lp, &b, &c)) - solve_or_flag(x_at(&lm, &b, &c))) / (2.0 * FD_STEP);
        num_l.set_column(j, &col);
        let mut bp = b.clone();
        bp[j] += FD_STEP;
        let mut bm = b.clone();
        bm[j] -= FD_STEP;
        let col = (solve_or_flag(x_at(&lambda, &bp, &c)) - solve_or_flag(x_at(&lambda, &bm, &c))) / (2.0 * FD_STEP);
        num_b.set_column(j, &col);
    }
    let num_c = fd_columns(d, c.len(), |j, h| {
        let mut cc = c.clone();
        cc[j] += h;
        x_at(&lambda, &b, &cc).unwrap_or_else(|_| Vector::from_element(d, f64::NAN))
    });
    if !ok || num_c.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(LayerSample {
        errors: (
            relative_error(&grads.dx_dlambda, &num_l),
            relative_error(&grads.dx_db, &num_b),
            relative_error(&grads.dx_dc, &num_c),
        ),
        active: sol.active_set.len(),
    })
}

/// Layer Jacobians against central differences on random instances with
/// `d ∈ {1, 3}`, `M ∈ {1, 2}` that pass the condition checker.
pub fn check_layer(cfg: &GradCheckConfig) -> LayerCheck {
    let shapes = [(1, 1), (1, 2), (3, 1), (3, 2)];
    let per_shape = cfg.layer_instances.div_ceil(shapes.len());
    let results: Vec<(Vec<LayerSample>, usize)> = shapes
        .par_iter()
        .enumerate()
        .map(|(k, &(d, m))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(k as u64));
            let want = per_shape.min(cfg.layer_instances.saturating_sub(k * per_shape));
            let mut samples = Vec::new();
            let mut rejected = 0;
            while samples.len() < want && rejected < 100 * want.max(1) {
                match check_one(&mut rng, d, m) {
                    Some(s) => samples.push(s),
                    None => rejected += 1,
                }
            }
            (samples, rejected)
        })
        .collect();
    let mut out = LayerCheck {
        instances: 0,
        rejected: 0,
        max_rel_dlambda: 0.0,
        max_rel_db: 0.0,
        max_rel_dc: 0.0,
        active_constraint_counts: vec![0; 8],
    };
    for (samples, rejected) in results {
        out.rejected += rejected;
        for s in samples {
            out.instances += 1;
            out.max_rel_dlambda = out.max_rel_dlambda.max(s.errors.0);
            out.max_rel_db = out.max_rel_db.max(s.errors.1);
            out.max_rel_dc = out.max_rel_dc.max(s.errors.2);
            out.active_constraint_counts[s.active.min(7)] += 1;
        }
    }
    while out.active_constraint_counts.last() == Some(&0) && out.active_constraint_counts.len() > 1 {
        out.active_constraint_counts.pop();
    }
    out
}

fn pipeline_episode(rng: &mut ChaCha8Rng, n: usize) -> Episode {
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let b = rng.random_range(10.0 * n as f64..15.0 * n as f64);
    Episode::scalar("fd", &c, b).expect("valid episode")
}

fn budget_binds_early(trace: &laau_core::PipelineTrace) -> bool {
    let n = trace.steps.len();
    trace.steps[..n - 1]
        .iter()
        .any(|s| s.solution.mu.iter().any(|&mu| mu > FD_MARGIN))
}

/// `∂(episode loss)/∂θ` against central differences on fairness episodes
/// with a random MLP.
pub fn check_pipeline(cfg: &GradCheckConfig) -> PipelineCheck {
    let family = FairnessFamily::default();
    let n = cfg.pipeline_horizon;
    let unroll = UnrollConfig {
        reserve: true,
        recurrence: if cfg.lambda_path_only {
            BudgetRecurrence::LambdaPathOnly
        } else {
            BudgetRecurrence::Full
        },
    };
    let norm = Normalization {
        budget_scale: n as f64 * family.x_max(),
        context_scale: vec![2.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfd);
    let mut model = ModelParams::random(ModelKind::paper_mlp(), 1, 1, 1, norm, cfg.seed);
    if cfg.budget_active {
        // small multipliers so allocations run into the budget early
        if let Some(bias) = model.params_mut().last_mut() {
            *bias = -4.0;
        }
    }
    let mut episodes = Vec::new();
    let mut attempts = 0;
    while episodes.len() < cfg.pipeline_episodes && attempts < 1000 * cfg.pipeline_episodes.max(1) {
        attempts += 1;
        let ep = pipeline_episode(&mut rng, n);
        let Ok(trace) = forward_episode(&model, &family, &ep, &unroll) else { continue };
        if cfg.budget_active && !budget_binds_early(&trace) {
            continue;
        }
        episodes.push((ep, trace));
    }
    let errors: Vec<(f64, usize)> = episodes
        .par_iter()
        .map(|(ep, trace)| {
            let analytic = backward_episode(trace, &model, &family, &unroll)
                .map(|g| g.gradient)
                .unwrap_or_else(|_| vec![f64::NAN; model.num_params()]);
            let numeric: Vec<f64> = (0..model.num_params())
                .map(|i| {
                    let mut plus = model.clone();
                    plus.params_mut()[i] += FD_STEP;
                    let mut minus = model.clone();
                    minus.params_mut()[i] -= FD_STEP;
                    let lp = episode_loss(&plus, &family, ep, &unroll).unwrap_or(f64::NAN);
                    let lm = episode_loss(&minus, &family, ep, &unroll).unwrap_or(f64::NAN);
                    (lp - lm) / (2.0 * FD_STEP)
                })
                .collect();
            let a = Matrix::from_column_slice(analytic.len(), 1, &analytic);
            let b = Matrix::from_column_slice(numeric.len(), 1, &numeric);
            let err = relative_error(&a, &b);
            (if err.is_finite() { err } else { f64::INFINITY }, trace.inexact_steps().len())
        })
        .collect();
    PipelineCheck {
        episodes: errors.len(),
        max_rel: errors.iter().map(|e| e.0).fold(0.0, f64::max),
        inexact_steps: errors.iter().map(|e| e.1).sum(),
    }
}

pub fn grad_check(cfg: &GradCheckConfig) -> GradCheckReport {
    let layer = check_layer(cfg);
    let pipeline = check_pipeline(cfg);
    GradCheckReport {
        config: cfg.clone(),
        layer_pass: layer.instances > 0 && layer.max_rel() <= LAYER_TOLERANCE,
        pipeline_pass: pipeline.episodes > 0 && pipeline.max_rel <= PIPELINE_TOLERANCE,
        layer,
        pipeline,
    }
}
