//! Batch drivers behind the command-line tool: feature caching, training,
//! scoring, evaluation, corpus simulation and frame-length sweeps.

mod commands;
mod config;
mod features;
mod optim;
mod train;

pub use commands::{eval, score, simulate, sweep, sweep_dir, EvalReport, SweepRow, SWEEP_HEADER};
pub use config::{Optimizer, OptimizerConfig, Paths, RunConfig, CONFIG_KEYS};
pub use features::{cache_path, featurize, load_features, FeaturizeReport};
pub use optim::Adam;
pub use train::{last_path, log_path, sidecar_path, state_path, train, EpochRecord, TrainOutcome, TrainState, LOG_HEADER};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio::AudioError;
use crate::corpus::CorpusError;
use crate::dsp::DspError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("no audio file for {0}")]
    MissingAudio(String),
    #[error("no score for {0}")]
    MissingScore(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch} in batch [{}]", batch.join(", "))]
    NonFiniteLoss { epoch: usize, batch: Vec<String> },
    #[error("{0}")]
    Item(String),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Worker-pool size from `RG_THREADS`, or `None` to use every core.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var("RG_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(PipelineError::Config(format!("RG_THREADS={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Sizes the global rayon pool; later calls are no-ops.
pub fn init_thread_pool() -> Result<()> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_limit()? {
        b = b.num_threads(n);
    }
    // Already initialised is fine: the first caller wins.
    let _ = b.build_global();
    Ok(())
}

/// Creates the parent directory of an output file.
pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).map_err(|e| PipelineError::io(p, e))
        }
        _ => Ok(()),
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}
