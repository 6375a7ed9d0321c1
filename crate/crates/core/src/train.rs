//! Offline minibatch training and online per-episode SGD over the unrolled
//! episode loss.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::MultiplierModel;
use crate::problem::{Episode, Problem};
use crate::unroll::{backward_episode, episode_loss, forward_episode, UnrollConfig};

/// A parametric online policy whose episode loss is differentiable in its
/// parameters.
pub trait EpisodePolicy: Clone + Send + Sync {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn episode_loss(&self, problem: &dyn Problem, episode: &Episode) -> Result<f64>;
    fn loss_and_gradient(&self, problem: &dyn Problem, episode: &Episode) -> Result<(f64, Vec<f64>)>;
}

/// Multiplier model driving the unrolled layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Laau<M> {
    pub model: M,
    pub unroll: UnrollConfig,
}

impl<M> Laau<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            unroll: UnrollConfig::default(),
        }
    }
}

impl<M: MultiplierModel + Clone> EpisodePolicy for Laau<M> {
    fn params(&self) -> &[f64] {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.model.params_mut()
    }

    fn episode_loss(&self, problem: &dyn Problem, episode: &Episode) -> Result<f64> {
        episode_loss(&self.model, problem, episode, &self.unroll)
    }

    fn loss_and_gradient(&self, problem: &dyn Problem, episode: &Episode) -> Result<(f64, Vec<f64>)> {
        let trace = forward_episode(&self.model, problem, episode, &self.unroll)?;
        let grad = backward_episode(&trace, &self.model, problem, &self.unroll)?;
        Ok((trace.total_loss, grad.gradient))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// `(epochs, rate)` phases run in order.
    pub schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Return the parameters with the lowest validation loss instead of the
    /// final ones.
    pub select_best: bool,
}

impl TrainConfig {
    /// Adam, batch 10, `5e−3` for 50 epochs then `2.5e−3` for 30.
    pub fn paper() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            schedule: vec![(50, 5e-3), (30, 2.5e-3)],
            batch_size: 10,
            seed: 0,
            clip_norm: Some(10.0),
            select_best: true,
        }
    }

    pub fn sgd(epochs: usize, rate: f64, batch_size: usize) -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            schedule: vec![(epochs, rate)],
            batch_size,
            seed: 0,
            clip_norm: None,
            select_best: false,
        }
    }

    pub fn epochs(&self) -> usize {
        self.schedule.iter().map(|(e, _)| e).sum()
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mut start = 0;
        for &(len, rate) in &self.schedule {
            if epoch < start + len {
                return rate;
            }
            start += len;
        }
        self.schedule.last().map_or(0.0, |s| s.1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if self.schedule.iter().any(|(_, r)| !r.is_finite() || *r < 0.0) {
            return Err(Error::Invalid("learning rates must be finite and nonnegative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Invalid("clip norm must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub loss: f64,
    pub running_avg: f64,
    /// Number of parameter updates applied before this round's inference.
    pub params_version: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.rounds.is_empty() {
            out.push_str("epoch,train_loss,val_loss,wall_ms\n");
            for r in &self.epochs {
                let val = r.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
                let _ = writeln!(out, "{},{:?},{},{:.3}", r.epoch, r.train_loss, val, r.wall_ms);
            }
        } else {
            out.push_str("round,loss,running_avg\n");
            for r in &self.rounds {
                let _ = writeln!(out, "{},{:?},{:?}", r.round, r.loss, r.running_avg);
            }
        }
        out
    }

    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .min_by(|a, b| selection_loss(a).total_cmp(&selection_loss(b)))
    }
}

fn selection_loss(r: &EpochRecord) -> f64 {
    r.val_loss.unwrap_or(r.train_loss)
}

/// Scales `grad` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Debug, Clone)]
struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], rate: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= rate * g;
                }
            }
            OptimizerKind::Adam => {
                self.step += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.step);
                let c2 = 1.0 - Self::BETA2.powi(self.step);
                for i in 0..params.len() {
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
                    params[i] -= rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Mean episode loss `(1/n) Σᵢ Σ_t l(x_{i,t}, c_{i,t})`.
pub fn mean_loss<T: EpisodePolicy>(policy: &T, problem: &dyn Problem, episodes: &[Episode]) -> Result<f64> {
    let losses: Vec<f64> = episodes
        .par_iter()
        .map(|ep| policy.episode_loss(problem, ep))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn batch_gradient<T: EpisodePolicy>(
    policy: &T,
    problem: &dyn Problem,
    batch: &[&Episode],
) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ep| {
            policy
                .loss_and_gradient(problem, ep)
                .map_err(|e| annotate(e, &ep.id))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

fn annotate(e: Error, id: &str) -> Error {
    match e {
        Error::Numerical { step, what } => Error::Numerical {
            step,
            what: format!("episode {id}: {what}"),
        },
        other => other,
    }
}

fn check_finite(loss: f64, grad: &[f64], at: &str) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!("non-finite loss or gradient at {at}")));
    }
    Ok(())
}

/// Minibatch training on `train`, logging train/validation loss per epoch.
pub fn train_offline<T: EpisodePolicy>(
    policy: &T,
    problem: &dyn Problem,
    train: &[Episode],
    validation: &[Episode],
    cfg: &TrainConfig,
) -> Result<(T, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut current = policy.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, current.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let clock = Instant::now();

    let evaluate = |p: &T| -> Result<(f64, Option<f64>)> {
        let tl = mean_loss(p, problem, train)?;
        let vl = if validation.is_empty() {
            None
        } else {
            Some(mean_loss(p, problem, validation)?)
        };
        if !tl.is_finite() || vl.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite epoch loss".into()));
        }
        Ok((tl, vl))
    };

    let (tl, vl) = evaluate(&current)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: tl,
        val_loss: vl,
        wall_ms: clock.elapsed().as_secs_f64() * 1e3,
    });
    let mut best = (selection_loss(&log.epochs[0]), current.clone());

    for epoch in 0..cfg.epochs() {
        let rate = cfg.rate_at(epoch);
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Episode> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = batch_gradient(&current, problem, &batch)?;
            check_finite(loss, &grad, &format!("epoch {} batch {}", epoch + 1, b + 1))?;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grad, c);
            }
            optimizer.apply(current.params_mut(), &grad, rate);
        }
        let (tl, vl) = evaluate(&current)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: tl,
            val_loss: vl,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        if selection_loss(&record) < best.0 {
            best = (selection_loss(&record), current.clone());
        }
        log.epochs.push(record);
    }
    let out = if cfg.select_best { best.1 } else { current };
    Ok((out, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    /// `ᾱ`.
    pub step_size: f64,
    pub clip_norm: Option<f64>,
}

impl OnlineConfig {
    pub fn new(step_size: f64) -> Self {
        Self {
            step_size,
            clip_norm: None,
        }
    }
}

/// One gradient step per arriving episode, after acting on it with the
/// current weights.
pub fn train_online<T, I>(policy: &T, problem: &dyn Problem, stream: I, cfg: &OnlineConfig) -> Result<(T, TrainLog)>
where
    T: EpisodePolicy,
    I: IntoIterator<Item = Episode>,
{
    if !(cfg.step_size >= 0.0) || !cfg.step_size.is_finite() {
        return Err(Error::Invalid("step size must be finite and nonnegative".into()));
    }
    let mut current = policy.clone();
    let mut log = TrainLog::default();
    let mut version = 0usize;
    let mut total = 0.0;
    for (i, episode) in stream.into_iter().enumerate() {
        let (loss, mut grad) = current
            .loss_and_gradient(problem, &episode)
            .map_err(|e| annotate(e, &episode.id))?;
        check_finite(loss, &grad, &format!("round {}", i + 1))?;
        total += loss;
        log.rounds.push(RoundRecord {
            round: i + 1,
            loss,
            running_avg: total / (i + 1) as f64,
            params_version: version,
        });
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grad, c);
        }
        for (p, g) in current.params_mut().iter_mut().zip(&grad) {
            *p -= cfg.step_size * g;
        }
        version += 1;
    }
    Ok((current, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, ModelParams, Normalization};
    use crate::problem::{FairnessFamily, QuadraticFamily};
    use proptest::prelude::*;
    use rand::Rng;

    fn fairness_set(seed: u64, n_eps: usize, horizon: usize) -> Vec<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_eps)
            .map(|i| {
                let c: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.1..3.0)).collect();
                let b = rng.random_range(10.0 * horizon as f64..15.0 * horizon as f64);
                Episode::scalar(format!("e{i}"), &c, b).unwrap()
            })
            .collect()
    }

    fn mlp(seed: u64) -> Laau<ModelParams> {
        let norm = Normalization {
            budget_scale: 400.0,
            context_scale: vec![2.0],
        };
        Laau::new(ModelParams::random(ModelKind::paper_mlp(), 1, 1, 1, norm, seed))
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let f = FairnessFamily::default();
        let data = fairness_set(1, 20, 10);
        let policy = mlp(3);
        let mut cfg = TrainConfig::sgd(3, 0.0, 5);
        cfg.select_best = false;
        let (trained, log) = train_offline(&policy, &f, &data, &[], &cfg).unwrap();
        assert_eq!(trained.params(), policy.params());
        assert_eq!(log.epochs.len(), 4);
        assert!(log.epochs.iter().all(|e| e.train_loss == log.epochs[0].train_loss));
    }

    #[test]
    fn quadratic_toy_reaches_offline_optimum() {
        // c = (1,2,3), B = 3: optimum x_t = c_t − 1, loss 3/2.
        let toy = QuadraticFamily::scalar_toy(None);
        let ep = Episode::scalar("toy", &[1.0, 2.0, 3.0], 3.0).unwrap();
        let norm = Normalization {
            budget_scale: 3.0,
            context_scale: vec![3.0],
        };
        let model = ModelParams::zeros(ModelKind::Linear, 1, 1, 1, norm);
        let policy = Laau::new(model);
        let cfg = TrainConfig::sgd(200, 0.2, 1);
        let (_, log) = train_offline(&policy, &toy, std::slice::from_ref(&ep), &[], &cfg).unwrap();
        let last = log.epochs.last().unwrap().train_loss;
        assert!((last - 1.5).abs() < 1e-3, "final loss {last}");
    }

    #[test]
    fn offline_training_is_deterministic() {
        let f = FairnessFamily::default();
        let data = fairness_set(4, 40, 10);
        let val = fairness_set(5, 10, 10);
        let mut cfg = TrainConfig::paper();
        cfg.schedule = vec![(3, 5e-3)];
        cfg.seed = 9;
        let (a, la) = train_offline(&mlp(1), &f, &data, &val, &cfg).unwrap();
        let (b, lb) = train_offline(&mlp(1), &f, &data, &val, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        let strip = |l: &TrainLog| l.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));
    }

    #[test]
    fn best_validation_checkpoint_is_returned() {
        let f = FairnessFamily::default();
        let data = fairness_set(6, 30, 10);
        let val = fairness_set(7, 10, 10);
        let mut cfg = TrainConfig::paper();
        cfg.schedule = vec![(4, 2e-2)];
        let (trained, log) = train_offline(&mlp(2), &f, &data, &val, &cfg).unwrap();
        let best = log.best_epoch().unwrap().val_loss.unwrap();
        let got = mean_loss(&trained, &f, &val).unwrap();
        assert_eq!(got, best);
    }

    #[test]
    fn one_online_round_equals_one_sgd_epoch() {
        let f = FairnessFamily::default();
        let ep = fairness_set(8, 1, 10).remove(0);
        let policy = mlp(4);
        let (online, _) = train_online(&policy, &f, [ep.clone()], &OnlineConfig::new(0.01)).unwrap();
        let (offline, _) = train_offline(&policy, &f, &[ep], &[], &TrainConfig::sgd(1, 0.01, 1)).unwrap();
        assert_eq!(online.params(), offline.params());
    }

    #[test]
    fn zero_step_size_keeps_weights_and_versions_are_causal() {
        let f = FairnessFamily::default();
        let stream = fairness_set(9, 15, 10);
        let policy = mlp(5);
        let (after, log) = train_online(&policy, &f, stream.clone(), &OnlineConfig::new(0.0)).unwrap();
        assert_eq!(after.params(), policy.params());
        for (i, r) in log.rounds.iter().enumerate() {
            assert_eq!(r.params_version, i);
            assert_eq!(r.loss, policy.episode_loss(&f, &stream[i]).unwrap());
        }
        let (_, moving) = train_online(&policy, &f, stream, &OnlineConfig::new(0.01)).unwrap();
        assert!(moving.rounds.iter().enumerate().all(|(i, r)| r.params_version == i));
    }

    #[test]
    fn divergence_is_reported() {
        let f = FairnessFamily::default();
        let data = fairness_set(10, 5, 10);
        let mut policy = mlp(6);
        policy.params_mut()[0] = f64::NAN;
        let err = train_offline(&policy, &f, &data, &[], &TrainConfig::sgd(1, 0.1, 5)).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. } | Error::Divergence(_)), "{err:?}");
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let f = FairnessFamily::default();
        let data = fairness_set(11, 10, 10);
        let (_, log) = train_offline(&mlp(7), &f, &data, &[], &TrainConfig::sgd(2, 1e-3, 5)).unwrap();
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3);
        assert!(csv.starts_with("epoch,train_loss,val_loss,wall_ms"));
    }

    proptest! {
        #[test]
        fn clipping_preserves_direction(g in prop::collection::vec(-100.0f64..100.0, 1..20), c in 0.1f64..50.0) {
            let mut clipped = g.clone();
            clip_global_norm(&mut clipped, c);
            let norm = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= c * (1.0 + 1e-12));
            let orig = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if orig > 0.0 {
                let dot: f64 = g.iter().zip(&clipped).map(|(a, b)| a * b).sum();
                prop_assert!((dot - orig * norm).abs() <= 1e-9 * orig * norm.max(1e-300));
            }
        }
    }
}
