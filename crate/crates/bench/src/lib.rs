//! Experiment harness: dataset generation and trace ingestion, OOD
//! perturbation, algorithm comparison, reports and gradient audits.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod grad_check;
pub mod ood;
pub mod report;

pub use config::{Algorithm, ExperimentConfig};
pub use dataset::{generate_dataset, load_trace, Dataset, DatasetSpec};
pub use error::{BenchError, Result};
pub use report::RunReport;
