//! Episode sampling, trace ingestion and episode files.

use std::fs;
use std::path::{Path, PathBuf};

use laau_core::Episode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextSource {
    /// i.i.d. lognormal contexts with the given mean and log-scale σ.
    Lognormal { mean: f64, sigma: f64 },
    /// `episode_id,t,c` CSV, chunked into episodes of length `horizon`.
    Trace { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub horizon: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Budgets are drawn from `U[budget_low·N, budget_high·N]`.
    pub budget_low: f64,
    pub budget_high: f64,
    pub source: ContextSource,
    pub seed: u64,
}

pub const DEFAULT_SIGMA: f64 = 1.0;

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            horizon: 20,
            train: 500,
            val: 100,
            test: 200,
            budget_low: 10.0,
            budget_high: 15.0,
            source: ContextSource::Lognormal {
                mean: 1.0,
                sigma: DEFAULT_SIGMA,
            },
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// 5000 / 1000 / 2000 episodes.
    pub fn paper_scale(mut self) -> Self {
        self.train = 5000;
        self.val = 1000;
        self.test = 2000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(BenchError::Config("horizon must be at least 2".into()));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(BenchError::Config("every split needs at least one episode".into()));
        }
        if !(self.budget_low > 0.0 && self.budget_high >= self.budget_low && self.budget_high.is_finite()) {
            return Err(BenchError::Config("budget bounds must satisfy 0 < low ≤ high".into()));
        }
        if let ContextSource::Lognormal { mean, sigma } = self.source {
            if !(mean > 0.0 && sigma >= 0.0 && mean.is_finite() && sigma.is_finite()) {
                return Err(BenchError::Config("lognormal mean must be positive and σ nonnegative".into()));
            }
        }
        Ok(())
    }

    fn budget(&self, rng: &mut ChaCha8Rng) -> f64 {
        let n = self.horizon as f64;
        if self.budget_high > self.budget_low {
            rng.random_range(self.budget_low * n..self.budget_high * n)
        } else {
            self.budget_low * n
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Independent stream for each `(split, episode)` so generation order and
/// parallelism cannot change the sample.
pub fn episode_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub horizon: usize,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Episode] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn lognormal(mean: f64, sigma: f64) -> Result<LogNormal<f64>> {
    LogNormal::new(mean.ln() - 0.5 * sigma * sigma, sigma).map_err(|e| BenchError::Config(e.to_string()))
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let count = |s: Split| match s {
        Split::Train => spec.train,
        Split::Val => spec.val,
        Split::Test => spec.test,
    };
    let mut splits: Vec<Vec<Episode>> = Vec::new();
    match &spec.source {
        ContextSource::Lognormal { mean, sigma } => {
            let law = lognormal(*mean, *sigma)?;
            for s in Split::ALL {
                let eps = (0..count(s))
                    .map(|i| {
                        let mut rng = episode_rng(spec.seed, s.tag(), i);
                        let c: Vec<f64> = (0..spec.horizon).map(|_| law.sample(&mut rng)).collect();
                        let b = spec.budget(&mut rng);
                        Episode::scalar(format!("{}-{i}", s.name()), &c, b).map_err(BenchError::from)
                    })
                    .collect::<Result<Vec<_>>>()?;
                splits.push(eps);
            }
        }
        ContextSource::Trace { path } => {
            let (all, _warnings) = load_trace(path, spec)?;
            let needed = spec.train + spec.val + spec.test;
            if all.len() < needed {
                return Err(BenchError::TraceLength(format!(
                    "{} episodes available, {needed} requested",
                    all.len()
                )));
            }
            let mut it = all.into_iter();
            for s in Split::ALL {
                let eps = it
                    .by_ref()
                    .take(count(s))
                    .enumerate()
                    .map(|(i, e)| Episode::new(format!("{}-{i}", s.name()), e.contexts, e.budgets))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                splits.push(eps);
            }
        }
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Dataset {
        horizon: spec.horizon,
        train,
        val,
        test,
    })
}

/// Reads an `episode_id,t,c` trace and chunks every trace into episodes of
/// length `spec.horizon`, drawing budgets from the spec's law. Trailing rows
/// that do not fill an episode are dropped with a warning.
pub fn load_trace(path: &Path, spec: &DatasetSpec) -> Result<(Vec<Episode>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    parse_trace(&text, spec)
}

pub fn parse_trace(text: &str, spec: &DatasetSpec) -> Result<(Vec<Episode>, Vec<String>)> {
    let n = spec.horizon;
    if n == 0 {
        return Err(BenchError::Config("horizon must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| BenchError::Trace { line: 1, msg: e.to_string() })?
        .clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols != ["episode_id", "t", "c"] {
        return Err(BenchError::Trace {
            line: 1,
            msg: format!("expected header episode_id,t,c, found {}", cols.join(",")),
        });
    }

    let mut traces: Vec<(String, Vec<f64>)> = Vec::new();
    let mut last_t: Option<u64> = None;
    for record in reader.records() {
        let record = record.map_err(|e| BenchError::Trace {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| BenchError::Trace { line, msg };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let id = record[0].trim().to_string();
        let t: u64 = record[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("invalid step index {:?}", &record[1])))?;
        let c: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("invalid context value {:?}", &record[2])))?;
        if !c.is_finite() || c < 0.0 {
            return Err(bad(format!("context must be finite and nonnegative, got {c}")));
        }
        match traces.last_mut() {
            Some((cur, values)) if *cur == id => {
                let prev = last_t.unwrap_or(0);
                if t != prev + 1 {
                    return Err(bad(format!("trace {id}: step {t} does not follow {prev}")));
                }
                values.push(c);
            }
            _ => {
                if traces.iter().any(|(seen, _)| *seen == id) {
                    return Err(bad(format!("trace {id} is not contiguous")));
                }
                traces.push((id, vec![c]));
            }
        }
        last_t = Some(t);
    }

    let mut episodes = Vec::new();
    let mut warnings = Vec::new();
    for (id, values) in &traces {
        let full = values.len() / n;
        let dropped = values.len() - full * n;
        if dropped > 0 {
            warnings.push(format!("trace {id}: dropped {dropped} trailing row(s) that do not fill an episode"));
        }
        for k in 0..full {
            let mut rng = episode_rng(spec.seed, 0, episodes.len());
            let b = spec.budget(&mut rng);
            episodes.push(Episode::scalar(format!("{id}/{k}"), &values[k * n..(k + 1) * n], b)?);
        }
    }
    if episodes.is_empty() {
        return Err(BenchError::TraceLength(format!(
            "no trace has at least {n} rows"
        )));
    }
    Ok((episodes, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeRecord {
    id: String,
    contexts: Vec<Vec<f64>>,
    budgets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeFile {
    format: String,
    version: u32,
    horizon: usize,
    episodes: Vec<EpisodeRecord>,
}

const EPISODE_FORMAT: &str = "laau-episodes";

pub fn episodes_to_json(horizon: usize, episodes: &[Episode]) -> String {
    let file = EpisodeFile {
        format: EPISODE_FORMAT.into(),
        version: 1,
        horizon,
        episodes: episodes
            .iter()
            .map(|e| EpisodeRecord {
                id: e.id.clone(),
                contexts: e.contexts.clone(),
                budgets: e.budgets.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("episode records serialize")
}

pub fn write_episodes(path: &Path, horizon: usize, episodes: &[Episode]) -> Result<()> {
    fs::write(path, episodes_to_json(horizon, episodes)).map_err(|e| BenchError::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<(usize, Vec<Episode>)> {
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let file: EpisodeFile = serde_json::from_str(&text).map_err(|source| BenchError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if file.format != EPISODE_FORMAT || file.version != 1 {
        return Err(BenchError::Config(format!("{}: not a version-1 episode file", path.display())));
    }
    let episodes = file
        .episodes
        .into_iter()
        .map(|r| {
            if r.contexts.len() != file.horizon {
                return Err(BenchError::TraceLength(format!(
                    "episode {} has {} steps, file horizon is {}",
                    r.id,
                    r.contexts.len(),
                    file.horizon
                )));
            }
            Episode::new(r.id, r.contexts, r.budgets).map_err(BenchError::from)
        })
        .collect::<Result<_>>()?;
    Ok((file.horizon, episodes))
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    for s in Split::ALL {
        write_episodes(&dir.join(format!("{}.json", s.name())), data.horizon, data.split(s))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (horizon, train) = read_episodes(&dir.join("train.json"))?;
    let (_, val) = read_episodes(&dir.join("val.json"))?;
    let (_, test) = read_episodes(&dir.join("test.json"))?;
    Ok(Dataset {
        horizon,
        train,
        val,
        test,
    })
}

/// All context coordinates of all episodes, in order.
pub fn flatten_contexts(episodes: &[Episode]) -> Vec<f64> {
    episodes
        .iter()
        .flat_map(|e| e.contexts.iter().flatten().cloned())
        .collect()
}
