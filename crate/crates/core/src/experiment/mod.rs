//! Multi-seed studies: transfer ordering, convergence, similarity table and
//! steering. Every number is a function of the root seed and the scale.

mod studies;

pub use studies::{
    convergence, phase1_runs, similarity_table, steering, transfer_ordering, ConvergenceReport, ConvergenceRow, Corpus,
    Phase1Run, Shared, SteeringReport, SteeringRow, TransferOrderingReport, VariantRow, BASELINE, FROM_SCRATCH, FULL,
    NO_AUG, NO_CNN, NO_LSTM, TRANSFER, WEIGHTS_ONLY_NAME,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkConfig;
use crate::rng::derive_indexed;
use crate::salient::SalientError;
use crate::similarity::{SimilarityError, SimilarityReport};
use crate::synthdata::DataError;
use crate::transfer::{TrainConfig, TransferError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment {0:?}")]
    Unknown(String),
    #[error("invalid scale: {0}")]
    InvalidScale(String),
    #[error("seed {seed} failed: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Salient(#[from] SalientError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TransferOrdering,
    Convergence,
    SimilarityTable,
    Steering,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [
        ExperimentKind::TransferOrdering,
        ExperimentKind::Convergence,
        ExperimentKind::SimilarityTable,
        ExperimentKind::Steering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::TransferOrdering => "transfer-ordering",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::SimilarityTable => "similarity-table",
            ExperimentKind::Steering => "steering",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ExperimentError> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ExperimentError::Unknown(s.to_string()))
    }
}

/// Sizes and schedules of the studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentScale {
    pub seeds: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub sequence_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Source-domain (Phase 1) training sequences.
    pub source_train: usize,
    /// Target-domain training sequences for Phase 2 and the baseline.
    pub target_train: usize,
    /// Sequences in each test set.
    pub test: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub salient_ratio: f64,
    /// Target-domain training sequences in the convergence study.
    pub convergence_train: usize,
    pub convergence_max_epochs: usize,
    pub convergence_threshold: f64,
    pub steering_train: usize,
    pub steering_test: usize,
    pub steering_phase1_epochs: usize,
    pub steering_phase2_epochs: usize,
    pub similarity_pairs: usize,
    /// Frames per dataset for FID.
    pub fid_samples: usize,
    pub scenario_probes: usize,
}

impl Default for ExperimentScale {
    fn default() -> Self {
        ExperimentScale {
            seeds: 5,
            frame_height: 24,
            frame_width: 32,
            sequence_length: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            source_train: 2000,
            target_train: 2000,
            test: 500,
            phase1_epochs: 3,
            phase2_epochs: 3,
            salient_ratio: 0.1,
            convergence_train: 300,
            convergence_max_epochs: 10,
            convergence_threshold: 0.95,
            steering_train: 1000,
            steering_test: 300,
            steering_phase1_epochs: 6,
            steering_phase2_epochs: 6,
            similarity_pairs: crate::similarity::DEFAULT_PAIRS,
            fid_samples: 500,
            scenario_probes: 30,
        }
    }
}

impl ExperimentScale {
    /// A few seconds per study; for tests and quick looks.
    pub fn smoke() -> Self {
        ExperimentScale {
            seeds: 2,
            frame_height: 16,
            frame_width: 16,
            sequence_length: 3,
            source_train: 24,
            target_train: 20,
            test: 10,
            phase1_epochs: 1,
            phase2_epochs: 1,
            convergence_train: 20,
            convergence_max_epochs: 2,
            steering_train: 16,
            steering_test: 8,
            steering_phase1_epochs: 1,
            steering_phase2_epochs: 1,
            similarity_pairs: 20,
            fid_samples: 20,
            scenario_probes: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidScale(m.to_string()));
        if self.seeds == 0 {
            return bad("at least one seed");
        }
        let counts = [
            self.source_train,
            self.target_train,
            self.test,
            self.convergence_train,
            self.steering_train,
            self.steering_test,
            self.similarity_pairs,
            self.scenario_probes,
        ];
        if counts.contains(&0) {
            return bad("dataset sizes must be positive");
        }
        if self.fid_samples < 2 {
            return bad("FID needs at least 2 samples per side");
        }
        if self.sequence_length < 2 {
            return bad("sequences need at least 2 frames");
        }
        if !(0.0..=1.0).contains(&self.salient_ratio) || !(0.0..=1.0).contains(&self.convergence_threshold) {
            return bad("ratios must lie in [0, 1]");
        }
        self.network()
            .validate()
            .map_err(|e| ExperimentError::InvalidScale(e.to_string()))?;
        self.train_config(1, 0).validate()?;
        Ok(())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig::toy(self.frame_height, self.frame_width, self.sequence_length)
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            salient_subset_ratio: 0.0,
            ..TrainConfig::default()
        }
    }
}

/// Per-run seeds derived from the root seed.
pub fn run_seeds(root: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_indexed(root, "seed", i)).collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Output of any study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentReport {
    TransferOrdering(TransferOrderingReport),
    Convergence(ConvergenceReport),
    SimilarityTable(SimilarityReport),
    Steering(SteeringReport),
}

impl ExperimentReport {
    pub fn to_table(&self) -> String {
        match self {
            ExperimentReport::TransferOrdering(r) => r.to_table(),
            ExperimentReport::Convergence(r) => r.to_table(),
            ExperimentReport::SimilarityTable(r) => r.to_table(),
            ExperimentReport::Steering(r) => r.to_table(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Runs one study from scratch.
pub fn run(kind: ExperimentKind, scale: &ExperimentScale, root: u64) -> Result<ExperimentReport, ExperimentError> {
    scale.validate()?;
    Ok(match kind {
        ExperimentKind::TransferOrdering => ExperimentReport::TransferOrdering(transfer_ordering(scale, root, None)?),
        ExperimentKind::Convergence => ExperimentReport::Convergence(convergence(scale, root, None)?),
        ExperimentKind::SimilarityTable => ExperimentReport::SimilarityTable(similarity_table(scale, root, None)?),
        ExperimentKind::Steering => ExperimentReport::Steering(steering(scale, root)?),
    })
}

/// Runs several studies, training the shared Phase-1 models once.
pub fn run_many(
    kinds: &[ExperimentKind],
    scale: &ExperimentScale,
    root: u64,
) -> Result<Vec<ExperimentReport>, ExperimentError> {
    scale.validate()?;
    let needs_shared = kinds.iter().any(|k| *k != ExperimentKind::Steering);
    let shared = needs_shared.then(|| Shared::prepare(scale, root)).transpose()?;
    kinds
        .iter()
        .map(|k| {
            Ok(match k {
                ExperimentKind::TransferOrdering => {
                    ExperimentReport::TransferOrdering(transfer_ordering(scale, root, shared.as_ref())?)
                }
                ExperimentKind::Convergence => {
                    ExperimentReport::Convergence(convergence(scale, root, shared.as_ref())?)
                }
                ExperimentKind::SimilarityTable => {
                    ExperimentReport::SimilarityTable(similarity_table(scale, root, shared.as_ref())?)
                }
                ExperimentKind::Steering => ExperimentReport::Steering(steering(scale, root)?),
            })
        })
        .collect()
}
