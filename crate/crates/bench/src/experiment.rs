//! Training, evaluation and the experiment protocols behind the CLI.

use std::time::Instant;

use laau_core::baselines::{
    calibrate_avg_lt, run_avg_lt, run_dgd, run_direct_policy, run_equal, run_mw, solve_offline_opt, DirectPolicy,
    Rollout,
};
use laau_core::problem::{check_feasibility, Vector};
use laau_core::train::{train_offline, train_online, EpisodePolicy, Laau, TrainLog};
use laau_core::unroll::infer_online;
use laau_core::{Episode, FairnessFamily, ModelParams, Normalization, Problem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Algorithm, ExperimentConfig};
use crate::dataset::{generate_dataset, Dataset, DatasetSpec};
use crate::error::{BenchError, Result};
use crate::ood::calibrate_noise;
use crate::report::{version_string, AlgorithmSummary, EpisodeRow, ReportMeta, RunReport};

pub type LaauPolicy = Laau<ModelParams>;

/// Everything fitted on the training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub laau: Option<LaauPolicy>,
    pub laau_log: Option<TrainLog>,
    pub direct: Option<DirectPolicy>,
    pub direct_log: Option<TrainLog>,
    pub avg_lt: Option<Vector>,
}

pub fn untrained_laau(cfg: &ExperimentConfig, problem: &FairnessFamily, data: &Dataset) -> LaauPolicy {
    let norm = Normalization::from_episodes(problem, &data.train, data.horizon);
    let mut policy = Laau::new(ModelParams::for_problem(problem, cfg.model.kind(), norm, cfg.model.seed));
    policy.unroll = cfg.unroll.build();
    policy
}

pub fn train_laau(cfg: &ExperimentConfig, problem: &FairnessFamily, data: &Dataset) -> Result<(LaauPolicy, TrainLog)> {
    let init = untrained_laau(cfg, problem, data);
    Ok(train_offline(&init, problem, &data.train, &data.val, &cfg.training.build())?)
}

pub fn train_direct(cfg: &ExperimentConfig, problem: &FairnessFamily, data: &Dataset) -> Result<(DirectPolicy, TrainLog)> {
    let norm = Normalization::from_episodes(problem, &data.train, data.horizon);
    let mut init = DirectPolicy::new(problem, cfg.model.kind(), norm, cfg.baselines.direct_seed)?;
    init.reserve = cfg.unroll.reserve;
    Ok(train_offline(&init, problem, &data.train, &data.val, &cfg.training.build())?)
}

/// Fits what the selected algorithms need. A supplied LAAU policy is used
/// as-is instead of training one.
pub fn prepare(
    cfg: &ExperimentConfig,
    problem: &FairnessFamily,
    data: &Dataset,
    laau: Option<LaauPolicy>,
) -> Result<Prepared> {
    let wants = |a| cfg.algorithms.contains(&a);
    let (laau, laau_log) = match (wants(Algorithm::Laau), laau) {
        (false, _) => (None, None),
        (true, Some(p)) => (Some(p), None),
        (true, None) => {
            let (p, log) = train_laau(cfg, problem, data)?;
            (Some(p), Some(log))
        }
    };
    let (direct, direct_log) = if wants(Algorithm::Direct) {
        let (p, log) = train_direct(cfg, problem, data)?;
        (Some(p), Some(log))
    } else {
        (None, None)
    };
    let avg_lt = if wants(Algorithm::AvgLt) {
        Some(calibrate_avg_lt(problem, &data.train)?)
    } else {
        None
    };
    Ok(Prepared {
        laau,
        laau_log,
        direct,
        direct_log,
        avg_lt,
    })
}

fn laau_rollout(policy: &LaauPolicy, problem: &FairnessFamily, ep: &Episode) -> laau_core::Result<Rollout> {
    let actions: Vec<Vector> = infer_online(
        &policy.model,
        problem,
        ep.budget_vector(),
        ep.horizon(),
        ep.contexts.iter().cloned(),
        policy.unroll,
    )?
    .collect::<laau_core::Result<_>>()?;
    let mut remaining = ep.budget_vector();
    let mut total_loss = 0.0;
    for (x, c) in actions.iter().zip(&ep.contexts) {
        remaining -= problem.constraints(x, c);
        total_loss += problem.loss(x, c);
    }
    Ok(Rollout {
        actions,
        multipliers: Vec::new(),
        total_loss,
        remaining,
    })
}

fn missing(what: &str) -> BenchError {
    BenchError::Config(format!("{what} was not prepared"))
}

/// One algorithm on one episode.
pub fn run_algorithm(
    alg: Algorithm,
    cfg: &ExperimentConfig,
    problem: &FairnessFamily,
    prepared: &Prepared,
    ep: &Episode,
) -> Result<Rollout> {
    let bcfg = cfg.baseline_config();
    let n = ep.horizon();
    let out = match alg {
        Algorithm::Laau => laau_rollout(prepared.laau.as_ref().ok_or_else(|| missing("LAAU policy"))?, problem, ep),
        Algorithm::Opt => solve_offline_opt(problem, ep),
        Algorithm::Equal => run_equal(problem, ep),
        Algorithm::AvgLt => run_avg_lt(problem, ep, prepared.avg_lt.as_ref().ok_or_else(|| missing("λ_P"))?, &bcfg),
        Algorithm::Dgd => run_dgd(problem, ep, bcfg.dgd_step(n), &bcfg),
        Algorithm::Mw => run_mw(problem, ep, bcfg.mw_step(n), &bcfg),
        Algorithm::Direct => run_direct_policy(
            problem,
            ep,
            prepared.direct.as_ref().ok_or_else(|| missing("direct policy"))?,
        ),
    };
    out.map_err(|e| BenchError::episode(&ep.id, e))
}

/// Evaluates every selected algorithm on `test`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    problem: &FairnessFamily,
    prepared: &Prepared,
    test: &[Episode],
) -> Result<RunReport> {
    let horizon = test.first().map_or(0, Episode::horizon);
    let mut summaries = Vec::new();
    let mut rows_all = Vec::new();
    for &alg in &cfg.algorithms {
        let clock = Instant::now();
        let rows: Vec<EpisodeRow> = test
            .par_iter()
            .map(|ep| {
                let r = run_algorithm(alg, cfg, problem, prepared, ep)?;
                let feasible = check_feasibility(problem, ep, &r.actions).is_ok();
                let frac = (0..ep.budgets.len())
                    .map(|m| r.remaining[m] / ep.budgets[m])
                    .sum::<f64>()
                    / ep.budgets.len() as f64;
                Ok(EpisodeRow {
                    algorithm: alg.name().to_string(),
                    episode_id: ep.id.clone(),
                    utility: r.utility(),
                    remaining_budget_frac: frac,
                    feasible,
                })
            })
            .collect::<Result<_>>()?;
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        summaries.push(AlgorithmSummary::from_rows(alg.name(), horizon, &rows, wall_ms));
        rows_all.extend(rows);
    }
    Ok(RunReport {
        meta: ReportMeta {
            schema_version: crate::report::REPORT_SCHEMA_VERSION,
            version: version_string(),
            horizon,
            test_episodes: test.len(),
            seeds: json!({
                "dataset": cfg.dataset.seed,
                "model": cfg.model.seed,
                "training": cfg.training.seed,
                "direct": cfg.baselines.direct_seed,
            }),
            config: serde_json::to_value(cfg).expect("config serializes"),
            notes: None,
        },
        algorithms: summaries,
        episodes: rows_all,
    })
}

pub fn first_violation(report: &RunReport) -> Option<BenchError> {
    let bad: Vec<&EpisodeRow> = report.episodes.iter().filter(|r| !r.feasible).collect();
    bad.first().map(|r| BenchError::Violation {
        count: bad.len(),
        first: format!("{} ({})", r.episode_id, r.algorithm),
    })
}

/// Generates data, fits the algorithms and evaluates them on the test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunReport, Prepared, Dataset)> {
    cfg.validate()?;
    let problem = cfg.family.build()?;
    let data = generate_dataset(&cfg.dataset)?;
    let prepared = prepare(cfg, &problem, &data, None)?;
    let report = evaluate(cfg, &problem, &prepared, &data.test)?;
    Ok((report, prepared, data))
}

/// `run_experiment` at every horizon in `cfg.horizons`.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    cfg.horizons
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.dataset.horizon = n;
            run_experiment(&c).map(|(r, _, _)| r)
        })
        .collect()
}

/// Fresh episodes from the dataset law, one per round.
pub fn online_stream(spec: &DatasetSpec, rounds: usize) -> Result<Vec<Episode>> {
    let mut s = spec.clone();
    s.train = rounds.max(1);
    s.val = 1;
    s.test = 1;
    s.seed = spec.seed ^ 0x5eed_0000_0000;
    let mut data = generate_dataset(&s)?;
    data.train.truncate(rounds);
    for (i, ep) in data.train.iter_mut().enumerate() {
        ep.id = format!("round-{}", i + 1);
    }
    Ok(data.train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub rounds: usize,
    pub first_window_mean: f64,
    pub last_window_mean: f64,
    /// Means of consecutive non-overlapping blocks.
    pub block_means: Vec<f64>,
    pub block: usize,
}

impl OnlineSummary {
    pub fn from_log(log: &TrainLog, window: usize, block: usize) -> Self {
        let losses: Vec<f64> = log.rounds.iter().map(|r| r.loss).collect();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        let w = window.min(losses.len());
        Self {
            rounds: losses.len(),
            first_window_mean: mean(&losses[..w]),
            last_window_mean: mean(&losses[losses.len() - w..]),
            block_means: losses.chunks(block.max(1)).filter(|c| c.len() == block).map(mean).collect(),
            block,
        }
    }

    pub fn blocks_nonincreasing(&self) -> bool {
        self.block_means.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Online SGD over a stationary stream, starting from an untrained model
/// whose normalization uses only family defaults.
pub fn run_online(cfg: &ExperimentConfig) -> Result<(LaauPolicy, TrainLog)> {
    cfg.validate()?;
    let problem = cfg.family.build()?;
    let stream = online_stream(&cfg.dataset, cfg.online.rounds)?;
    let norm = Normalization {
        budget_scale: cfg.dataset.horizon as f64 * problem.action_scale(),
        context_scale: problem.default_context_scale(),
    };
    let mut init = Laau::new(ModelParams::for_problem(&problem, cfg.model.kind(), norm, cfg.model.seed));
    init.unroll = cfg.unroll.build();
    Ok(train_online(&init, &problem, stream, &cfg.online.build())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodLevel {
    pub target: f64,
    /// Injected `W₁` per seed.
    pub injected: Vec<f64>,
    pub noise_sigma: Vec<f64>,
    pub laau_drop: Vec<f64>,
    pub direct_drop: Vec<f64>,
    pub laau_median_drop: f64,
    pub direct_median_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub version: String,
    pub seeds: Vec<u64>,
    pub laau_in_distribution: Vec<f64>,
    pub direct_in_distribution: Vec<f64>,
    pub levels: Vec<OodLevel>,
}

impl OodReport {
    pub fn laau_more_robust(&self) -> Vec<bool> {
        self.levels
            .iter()
            .map(|l| l.laau_median_drop <= l.direct_median_drop)
            .collect()
    }
}

pub fn median(v: &[f64]) -> f64 {
    crate::report::Quartiles::of(v).median
}

fn mean_utility<T: EpisodePolicy>(policy: &T, problem: &FairnessFamily, test: &[Episode]) -> Result<f64> {
    Ok(-laau_core::train::mean_loss(policy, problem, test)?)
}

/// Trains LAAU and the direct policy on clean and on noise-perturbed training
/// data and reports each one's utility drop on the clean test split.
pub fn run_ood(cfg: &ExperimentConfig) -> Result<OodReport> {
    cfg.validate()?;
    let problem = cfg.family.build()?;
    let mut laau_in = Vec::new();
    let mut direct_in = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &cfg.ood.seeds {
        let c = cfg.clone().with_seed(seed);
        let data = generate_dataset(&c.dataset)?;
        let (laau, _) = train_laau(&c, &problem, &data)?;
        let (direct, _) = train_direct(&c, &problem, &data)?;
        let lu = mean_utility(&laau, &problem, &data.test)?;
        let du = mean_utility(&direct, &problem, &data.test)?;
        laau_in.push(lu);
        direct_in.push(du);
        let mut levels = Vec::new();
        for (k, &target) in cfg.ood.targets.iter().enumerate() {
            let noise_seed = seed.wrapping_mul(1_000).wrapping_add(k as u64);
            let (spec, train, dw) = calibrate_noise(&data.train, target, noise_seed)?;
            let (val, _) = crate::ood::apply_ood(
                &data.val,
                &crate::ood::OodSpec {
                    seed: noise_seed ^ 1,
                    ..spec
                },
            )?;
            let shifted = Dataset {
                horizon: data.horizon,
                train,
                val,
                test: data.test.clone(),
            };
            let (laau_o, _) = train_laau(&c, &problem, &shifted)?;
            let (direct_o, _) = train_direct(&c, &problem, &shifted)?;
            let lo = mean_utility(&laau_o, &problem, &data.test)?;
            let dout = mean_utility(&direct_o, &problem, &data.test)?;
            levels.push((dw, spec.sigma, lu - lo, du - dout));
        }
        per_seed.push(levels);
    }
    let levels = cfg
        .ood
        .targets
        .iter()
        .enumerate()
        .map(|(k, &target)| {
            let col = |f: fn(&(f64, f64, f64, f64)) -> f64| per_seed.iter().map(|s| f(&s[k])).collect::<Vec<_>>();
            let laau_drop = col(|l| l.2);
            let direct_drop = col(|l| l.3);
            OodLevel {
                target,
                injected: col(|l| l.0),
                noise_sigma: col(|l| l.1),
                laau_median_drop: median(&laau_drop),
                direct_median_drop: median(&direct_drop),
                laau_drop,
                direct_drop,
            }
        })
        .collect();
    Ok(OodReport {
        version: version_string(),
        seeds: cfg.ood.seeds.clone(),
        laau_in_distribution: laau_in,
        direct_in_distribution: direct_in,
        levels,
    })
}
