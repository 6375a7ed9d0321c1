use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use laau_bench::config::ExperimentConfig;
use laau_bench::dataset::{generate_dataset, load_trace, read_dataset, write_dataset, ContextSource};
use laau_bench::error::{BenchError, Result};
use laau_bench::experiment::{
    evaluate, first_violation, prepare, run_compare, run_ood, run_online, train_laau, OnlineSummary,
};
use laau_bench::grad_check::{grad_check, GradCheckConfig};
use laau_core::train::Laau;
use laau_core::ModelParams;

#[derive(Parser)]
#[command(name = "laau", version, about = "Learning-assisted algorithm unrolling: data, training and benchmarks")]
struct Cli {
    /// JSON experiment configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use 5000/1000/2000 train/validation/test episodes.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train/val/test episode files.
    GenData {
        /// Build episodes from an `episode_id,t,c` trace instead of sampling contexts.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Train the multiplier model offline and write a checkpoint.
    Train {
        /// Directory written by `gen-data`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Online per-episode SGD over a stationary stream.
    TrainOnline {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
    },
    /// Evaluate the configured algorithms on the test split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained model; trained from the config if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate every algorithm at every configured horizon.
    Compare,
    /// Train on noise-perturbed data and compare utility drops.
    Ood,
    /// Finite-difference audit of layer and pipeline gradients.
    GradCheck {
        #[arg(long)]
        instances: Option<usize>,
        /// Use the λ-path-only budget recurrence.
        #[arg(long)]
        lambda_path_only: bool,
        /// Only episodes whose budget binds before the last step.
        #[arg(long)]
        budget_active: bool,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<laau_bench::Dataset> {
    match dir {
        Some(d) => read_dataset(d),
        None => generate_dataset(&cfg.dataset),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::GenData { trace, horizon } => {
            if let Some(n) = horizon {
                cfg.dataset.horizon = n;
            }
            if let Some(path) = trace {
                let (_, warnings) = load_trace(&path, &cfg.dataset)?;
                for w in warnings {
                    eprintln!("warning: {w}");
                }
                cfg.dataset.source = ContextSource::Trace { path };
            }
            let data = generate_dataset(&cfg.dataset)?;
            write_dataset(&out, &data)?;
            println!(
                "wrote {} / {} / {} episodes (N = {}) to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                data.horizon,
                out.display()
            );
        }
        Command::Train { data } => {
            let problem = cfg.family.build()?;
            let data = dataset(&cfg, data.as_deref())?;
            let (policy, log) = train_laau(&cfg, &problem, &data)?;
            write(&out.join("laau.ckpt"), &policy.model.to_checkpoint())?;
            write(&out.join("train_log.csv"), &log.to_csv())?;
            if let Some(best) = log.best_epoch() {
                println!(
                    "trained {} epochs; best epoch {} (train loss {:.6}, val loss {})",
                    log.epochs.len() - 1,
                    best.epoch,
                    best.train_loss,
                    best.val_loss.map_or("-".into(), |v| format!("{v:.6}"))
                );
            }
        }
        Command::TrainOnline { rounds, step_size } => {
            if let Some(r) = rounds {
                cfg.online.rounds = r;
            }
            if let Some(a) = step_size {
                cfg.online.step_size = a;
            }
            let (policy, log) = run_online(&cfg)?;
            write(&out.join("online_log.csv"), &log.to_csv())?;
            write(&out.join("online.ckpt"), &policy.model.to_checkpoint())?;
            let summary = OnlineSummary::from_log(&log, 100, 200);
            write(
                &out.join("online_summary.json"),
                &serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )?;
            println!(
                "{} rounds: first-100 mean loss {:.6}, last-100 mean loss {:.6}",
                summary.rounds, summary.first_window_mean, summary.last_window_mean
            );
        }
        Command::Eval { data, checkpoint } => {
            let problem = cfg.family.build()?;
            let data = dataset(&cfg, data.as_deref())?;
            let laau = match checkpoint {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| BenchError::io(&path, e))?;
                    let mut policy = Laau::new(ModelParams::from_checkpoint(&text)?);
                    policy.unroll = cfg.unroll.build();
                    Some(policy)
                }
                None => None,
            };
            let prepared = prepare(&cfg, &problem, &data, laau)?;
            let report = evaluate(&cfg, &problem, &prepared, &data.test)?;
            report.write(&out, "report")?;
            print_summary(&report);
            if let Some(v) = first_violation(&report) {
                return Err(v);
            }
        }
        Command::Compare => {
            for report in run_compare(&cfg)? {
                report.write(&out, &format!("compare_n{}", report.meta.horizon))?;
                println!("N = {}", report.meta.horizon);
                print_summary(&report);
                if let Some(v) = first_violation(&report) {
                    return Err(v);
                }
            }
        }
        Command::Ood => {
            let report = run_ood(&cfg)?;
            write(
                &out.join("ood_report.json"),
                &serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            for l in &report.levels {
                println!(
                    "target W1 {:.3}: median utility drop LAAU {:.4}, direct {:.4}",
                    l.target, l.laau_median_drop, l.direct_median_drop
                );
            }
        }
        Command::GradCheck {
            instances,
            lambda_path_only,
            budget_active,
        } => {
            let mut gc = GradCheckConfig {
                lambda_path_only,
                budget_active,
                seed: cli.seed.unwrap_or(0),
                ..GradCheckConfig::default()
            };
            if let Some(n) = instances {
                gc.layer_instances = n;
            }
            let report = grad_check(&gc);
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            return Ok(report.layer_pass && report.pipeline_pass);
        }
    }
    Ok(true)
}

fn print_summary(report: &laau_bench::RunReport) {
    println!(
        "{:<8} {:>14} {:>10} {:>10} {:>10}",
        "algo", "utility/step", "median", "remaining", "violations"
    );
    for a in &report.algorithms {
        println!(
            "{:<8} {:>14.6} {:>10.4} {:>10.4} {:>10}",
            a.name, a.mean_utility, a.quartiles.median, a.remaining_budget_frac, a.violations
        );
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
