//! Browser demo bindings for the fairness allocation family.
//!
//! Each exported function returns a JSON string; the native functions with the
//! same names (minus the `js_` prefix) return typed values.

use laau_core::baselines::{run_dgd, run_equal, run_mw, solve_offline_opt, BaselineConfig, Rollout};
use laau_core::problem::Vector;
use laau_core::unroll::{forward_episode, UnrollConfig};
use laau_core::{ConstantMultiplier, Episode, FairnessFamily, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCurve {
    pub lambda: Vec<f64>,
    pub x: Vec<f64>,
}

/// The per-step action as the multiplier sweeps `[0, lambda_max]`.
pub fn layer_curve(c: f64, b: f64, lambda_max: f64, points: usize) -> Result<LayerCurve> {
    let family = FairnessFamily::default();
    let points = points.max(2);
    let mut curve = LayerCurve { lambda: Vec::new(), x: Vec::new() };
    for i in 0..points {
        let l = lambda_max * i as f64 / (points - 1) as f64;
        let sol = laau_core::solve_opt_layer(&family, &[c], &Vector::from_element(1, l), &Vector::from_element(1, b))?;
        curve.lambda.push(l);
        curve.x.push(sol.x[0]);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledEpisode {
    pub contexts: Vec<f64>,
    pub budget: f64,
}

/// Lognormal contexts with mean 1 and a budget uniform on `[10N, 15N]`.
pub fn sample_episode(horizon: usize, sigma: f64, seed: u64) -> SampledEpisode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = sigma.max(0.0);
    let law = LogNormal::new(-0.5 * sigma * sigma, sigma).expect("finite σ");
    let n = horizon.max(2);
    let contexts = (0..n).map(|_| law.sample(&mut rng)).collect();
    let budget = rng.random_range(10.0 * n as f64..15.0 * n as f64);
    SampledEpisode { contexts, budget }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmRun {
    pub name: String,
    pub actions: Vec<f64>,
    pub utility: f64,
    pub remaining: f64,
}

fn summarize(name: &str, r: &Rollout) -> AlgorithmRun {
    AlgorithmRun {
        name: name.to_string(),
        actions: r.actions.iter().map(|x| x[0]).collect(),
        utility: r.utility(),
        remaining: r.remaining[0],
    }
}

/// Allocations of the offline optimum, the equal split, the two online dual
/// methods and the unrolled layer driven by a constant multiplier.
pub fn compare_episode(contexts: &[f64], budget: f64, lambda: f64) -> Result<Vec<AlgorithmRun>> {
    let family = FairnessFamily::default();
    let episode = Episode::scalar("demo", contexts, budget)?;
    let n = episode.horizon();
    let cfg = BaselineConfig::default();
    let trace = forward_episode(
        &ConstantMultiplier::new(vec![lambda.max(0.0)], 1),
        &family,
        &episode,
        &UnrollConfig::default(),
    )?;
    Ok(vec![
        summarize("opt", &solve_offline_opt(&family, &episode)?),
        summarize("equal", &run_equal(&family, &episode)?),
        summarize("dgd", &run_dgd(&family, &episode, cfg.dgd_step(n), &cfg)?),
        summarize("mw", &run_mw(&family, &episode, cfg.mw_step(n), &cfg)?),
        AlgorithmRun {
            name: "unrolled".into(),
            actions: trace.actions().iter().map(|x| x[0]).collect(),
            utility: trace.utility(),
            remaining: trace.final_budget[0],
        },
    ])
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("serializable"))
        .map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn js_layer_curve(c: f64, b: f64, lambda_max: f64, points: usize) -> std::result::Result<String, JsError> {
    to_js(layer_curve(c, b, lambda_max, points))
}

#[wasm_bindgen]
pub fn js_sample_episode(horizon: usize, sigma: f64, seed: u64) -> String {
    serde_json::to_string(&sample_episode(horizon, sigma, seed)).expect("serializable")
}

#[wasm_bindgen]
pub fn js_compare_episode(contexts: Vec<f64>, budget: f64, lambda: f64) -> std::result::Result<String, JsError> {
    to_js(compare_episode(&contexts, budget, lambda))
}
