use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TransferError;
use crate::network::{decide, forward_batch, HeadKind, HiddenState, ImageSequence, Label, Parameters, Target};
use crate::synthdata::Dataset;

/// Sequences per inference batch.
pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    /// Mean cross-entropy or mean squared error (degrees squared).
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// `confusion[truth][predicted]`, indexed by label.
    pub confusion: Option<[[usize; 2]; 2]>,
    pub mae_deg: Option<f64>,
    /// Mean softmax probability of the collision class.
    pub mean_collision_confidence: Option<f64>,
}

impl EvalMetrics {
    /// Accuracy for classifiers, MAE in degrees for steering models.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.mae_deg).expect("one metric is always set")
    }
}

pub(crate) fn check_targets(head: HeadKind, seqs: &[ImageSequence]) -> Result<(), TransferError> {
    for s in seqs {
        let ok = matches!(
            (head, &s.target),
            (HeadKind::Classification, Target::Class(_)) | (HeadKind::Regression, Target::Steering(_))
        );
        if !ok {
            return Err(TransferError::LabelMismatch(format!(
                "sequence {} does not fit a {} head",
                s.id,
                head.as_str()
            )));
        }
    }
    Ok(())
}

/// `(output, logits)` of one sequence.
pub type Prediction = (Vec<f64>, Vec<f64>);

/// Per-sequence predictions in dataset order.
pub fn predict(params: &Parameters, hidden: &HiddenState, ds: &Dataset) -> Result<Vec<Prediction>, TransferError> {
    let chunks: Vec<&[ImageSequence]> = ds.sequences.chunks(EVAL_BATCH).collect();
    let per_chunk: Vec<Vec<Prediction>> = chunks
        .par_iter()
        .map(|chunk| {
            let seqs: Vec<&ImageSequence> = chunk.iter().collect();
            let maps: Vec<_> = chunk.iter().map(|s| ds.maps_for(s)).collect();
            let out = forward_batch(params, &seqs, &maps, hidden)?;
            Ok((0..chunk.len())
                .map(|i| (out.outputs.row(i).to_vec(), out.logits.row(i).to_vec()))
                .collect())
        })
        .collect::<Result<_, TransferError>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

pub fn evaluate(params: &Parameters, hidden: &HiddenState, ds: &Dataset) -> Result<EvalMetrics, TransferError> {
    if ds.is_empty() {
        return Err(TransferError::EmptyDataset);
    }
    let head = params.config.head;
    check_targets(head, &ds.sequences)?;
    let preds = predict(params, hidden, ds)?;
    let n = preds.len() as f64;
    match head {
        HeadKind::Classification => {
            let mut confusion = [[0usize; 2]; 2];
            let mut loss = 0.0;
            let mut confidence = 0.0;
            for (s, (probs, logits)) in ds.sequences.iter().zip(&preds) {
                let truth = s.target.label().expect("checked");
                confusion[truth.index()][decide(probs).index()] += 1;
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                loss += lse - logits[truth.index()];
                confidence += probs[Label::Collision.index()];
            }
            Ok(EvalMetrics {
                count: preds.len(),
                loss: loss / n,
                accuracy: Some((confusion[0][0] + confusion[1][1]) as f64 / n),
                confusion: Some(confusion),
                mae_deg: None,
                mean_collision_confidence: Some(confidence / n),
            })
        }
        HeadKind::Regression => {
            let (mut se, mut ae) = (0.0, 0.0);
            for (s, (out, _)) in ds.sequences.iter().zip(&preds) {
                let err = out[0] - s.target.angle().expect("checked");
                se += err * err;
                ae += err.abs();
            }
            Ok(EvalMetrics {
                count: preds.len(),
                loss: se / n,
                accuracy: None,
                confusion: None,
                mae_deg: Some(ae / n),
                mean_collision_confidence: None,
            })
        }
    }
}
