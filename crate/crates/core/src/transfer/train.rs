use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::eval::{check_targets, evaluate};
use super::{EpochRecord, LossKind, OptimizerKind, Phase2Init, TrainConfig, TrainingHistory, TransferError};
use crate::network::{
    assemble_input, build_graph, init_hidden_random, init_parameters, HeadKind, HiddenState, ImageSequence,
    NetworkConfig, ParamVars, Parameters,
};
use crate::rng::rng_for;
use crate::synthdata::Dataset;
use crate::tensor::Tape;

/// Parameters after training, the start state they were trained with, and
/// the per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: Parameters,
    pub hidden: HiddenState,
    pub history: TrainingHistory,
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.tensors.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

enum Optimizer {
    Adam(Adam),
    Sgd(f64),
}

impl Optimizer {
    fn step(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Vec<f64>>) {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd(lr) => {
                for (name, g) in grads {
                    let p = params.tensors.get_mut(name).expect("gradient for a known parameter");
                    p.data_mut().iter_mut().zip(g).for_each(|(w, g)| *w -= *lr * g);
                }
            }
        }
    }
}

fn check_loss(head: HeadKind, loss: LossKind) -> Result<(), TransferError> {
    match (head, loss) {
        (HeadKind::Classification, LossKind::CrossEntropy) | (HeadKind::Regression, LossKind::MeanSquared) => Ok(()),
        _ => Err(TransferError::InvalidConfig(format!(
            "{loss:?} loss cannot train a {} head",
            head.as_str()
        ))),
    }
}

/// Minibatch training from an explicit starting point. Every sequence starts
/// from `hidden`. Deterministic in `(params, hidden, data, cfg)`.
pub fn train_with_init(
    mut params: Parameters,
    hidden: HiddenState,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, TransferError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TransferError::EmptyDataset);
    }
    let net = params.config.clone();
    check_loss(net.head, cfg.loss)?;
    check_targets(net.head, &data.sequences)?;
    if let Some(v) = validation {
        check_targets(net.head, &v.sequences)?;
    }
    params.apply_precision(cfg.precision);

    let mut opt = match cfg.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.learning_rate)),
        OptimizerKind::Sgd => Optimizer::Sgd(cfg.learning_rate),
    };
    let mut rng = rng_for(cfg.seed, "train/shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainingHistory::default();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&ImageSequence> = chunk.iter().map(|&i| &data.sequences[i]).collect();
            let maps: Vec<_> = seqs.iter().map(|s| data.maps_for(s)).collect();
            let loss = train_step(&mut params, &hidden, &net, &seqs, &maps, cfg, &mut opt).map_err(|e| match e {
                StepError::NonFinite => TransferError::NonFiniteLoss { epoch, step: step + 1 },
                StepError::Other(e) => e,
            })?;
            loss_sum += loss;
            steps += 1;
        }
        let train = evaluate(&params, &hidden, data)?;
        let validation_metric = validation
            .map(|v| evaluate(&params, &hidden, v))
            .transpose()?
            .map(|m| m.primary());
        let reached = cfg
            .stop_at_train_accuracy
            .is_some_and(|a| train.accuracy.is_some_and(|x| x >= a));
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            train_metric: train.primary(),
            validation_metric,
            seconds: started.elapsed().as_secs_f64(),
        });
        if reached {
            break;
        }
    }
    Ok(TrainedModel {
        params,
        hidden,
        history,
    })
}

enum StepError {
    NonFinite,
    Other(TransferError),
}

impl From<crate::network::NetworkError> for StepError {
    fn from(e: crate::network::NetworkError) -> Self {
        StepError::Other(e.into())
    }
}

impl From<crate::tensor::TensorError> for StepError {
    fn from(e: crate::tensor::TensorError) -> Self {
        StepError::Other(e.into())
    }
}

fn train_step(
    params: &mut Parameters,
    hidden: &HiddenState,
    net: &NetworkConfig,
    seqs: &[&ImageSequence],
    maps: &[Option<&crate::salient::SalientMaps>],
    cfg: &TrainConfig,
    opt: &mut Optimizer,
) -> Result<f64, StepError> {
    let input = assemble_input(net, seqs, maps)?;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, true);
    let x = tape.constant(input);
    let graph = match build_graph(&mut tape, net, &pv, x, seqs.len(), hidden) {
        Err(crate::network::NetworkError::NonFinite { .. }) => return Err(StepError::NonFinite),
        r => r?,
    };
    let loss = match cfg.loss {
        LossKind::CrossEntropy => {
            let labels: Vec<usize> = seqs
                .iter()
                .map(|s| s.target.label().expect("checked").index())
                .collect();
            tape.cross_entropy(graph.logits, &labels)?
        }
        LossKind::MeanSquared => {
            let angles: Vec<f64> = seqs.iter().map(|s| s.target.angle().expect("checked")).collect();
            tape.mse(graph.output, &angles)?
        }
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(StepError::NonFinite);
    }
    tape.backward(loss)?;
    let grads: BTreeMap<String, Vec<f64>> = pv
        .iter()
        .map(|(name, v)| {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);
            (name.to_string(), g)
        })
        .collect();
    if grads.values().flatten().any(|g| !g.is_finite()) {
        return Err(StepError::NonFinite);
    }
    opt.step(params, &grads);
    params.apply_precision(cfg.precision);
    Ok(value)
}

/// From-scratch training on the source domain. The LSTM start state is
/// random noise drawn from the training seed.
pub fn train_phase1(
    data: &Dataset,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<TrainedModel, TransferError> {
    if data.is_empty() {
        return Err(TransferError::EmptyDataset);
    }
    let params = init_parameters(net, cfg.seed)?;
    let hidden = init_hidden_random(net, cfg.seed)?;
    train_with_init(params, hidden, data, validation, cfg)
}

/// Target-domain training from a Phase-2 initialisation. `data.maps` must
/// cover exactly `floor(ratio * |data|)` sequences.
pub fn train_phase2(
    init: Phase2Init,
    data: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<TrainedModel, TransferError> {
    cfg.validate()?;
    let expected = (cfg.salient_subset_ratio * data.len() as f64).floor() as usize;
    if data.maps.len() != expected {
        return Err(TransferError::SalientCoverage(format!(
            "{} sequences carry maps, ratio {} of {} needs {expected}",
            data.maps.len(),
            cfg.salient_subset_ratio,
            data.len()
        )));
    }
    if expected > 0 && init.params.config.input_channels != 6 {
        return Err(TransferError::SalientCoverage(
            "salient maps need a 6-channel target model".into(),
        ));
    }
    data.validate()
        .map_err(|e| TransferError::SalientCoverage(e.to_string()))?;
    train_with_init(init.params, init.hidden, data, validation, cfg)
}
