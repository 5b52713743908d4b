//! Two-phase training: Phase 1 on the source domain, harvest of weights and
//! LSTM hidden-state embeddings into a [`TransferBundle`], Phase 2 on the
//! target domain starting from the bundle with salient input channels.

mod bundle;
mod eval;
mod train;

pub use bundle::{harvest_bundle, init_phase2, load_bundle, save_bundle, Phase2Init, TransferBundle, BUNDLE_KIND};
pub use eval::{evaluate, predict, EvalMetrics, EVAL_BATCH};
pub use train::{train_phase1, train_phase2, train_with_init, Adam, TrainedModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerError;
use crate::network::NetworkError;
use crate::tensor::{Precision, TensorError};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("label/head mismatch: {0}")]
    LabelMismatch(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("incompatible transfer: {0}")]
    Incompatible(String),
    #[error("salient maps do not match the configured subset: {0}")]
    SalientCoverage(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    MeanSquared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Fraction of the target set that receives salient maps in Phase 2.
    pub salient_subset_ratio: f64,
    pub loss: LossKind,
    /// Parameters are rounded to this precision after every update.
    pub precision: Precision,
    /// Stop after the first epoch whose train accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            salient_subset_ratio: 0.10,
            loss: LossKind::CrossEntropy,
            precision: Precision::Single,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        let bad = |m: &str| Err(TransferError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.salient_subset_ratio) {
            return bad("salient subset ratio must lie in [0, 1]");
        }
        if let Some(a) = self.stop_at_train_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return bad("stop accuracy must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    /// Accuracy (classification) or MAE in degrees (regression) of the
    /// end-of-epoch parameters on the full training set.
    pub train_metric: f64,
    pub validation_metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// First epoch whose train accuracy reaches `threshold`.
    pub fn epochs_to_accuracy(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.train_metric >= threshold)
            .map(|r| r.epoch)
    }
}

/// Which parts of the Phase-1 model seed Phase 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferFlags {
    /// Convolutions, inception modules and the frame projection.
    pub transfer_cnn: bool,
    /// LSTM layers and the fully connected head.
    pub transfer_lstm_weights: bool,
    /// Start Phase 2 from the harvested hidden state instead of noise.
    pub transfer_hidden: bool,
}

impl TransferFlags {
    pub const ALL: TransferFlags = TransferFlags {
        transfer_cnn: true,
        transfer_lstm_weights: true,
        transfer_hidden: true,
    };
    pub const NONE: TransferFlags = TransferFlags {
        transfer_cnn: false,
        transfer_lstm_weights: false,
        transfer_hidden: false,
    };
}

impl Default for TransferFlags {
    fn default() -> Self {
        Self::ALL
    }
}
