use std::collections::BTreeMap;
use std::path::Path;

use super::{TransferError, TransferFlags};
use crate::container::Container;
use crate::network::checkpoint::{read_config, read_hidden, write_hidden};
use crate::network::{
    forward_batch, init_hidden_random, init_parameters, param_specs, HiddenState, ImageSequence, LayerState,
    NetworkConfig, ParamGroup, Parameters,
};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;
use crate::transfer::EVAL_BATCH;

pub const BUNDLE_KIND: &str = "bundle";

/// The Phase-1 artefact handed to Phase 2.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferBundle {
    /// Convolutions, inception modules and the frame projection.
    pub cnn_and_inception_weights: BTreeMap<String, Tensor>,
    /// LSTM layers and the fully connected head.
    pub lstm_weights: BTreeMap<String, Tensor>,
    /// Mean final `(h, c)` over the source set, each rollout from zeros.
    pub harvested_hidden: HiddenState,
    pub source_config: NetworkConfig,
    /// [`NetworkConfig::transfer_digest`] of the source model.
    pub source_config_digest: String,
    pub source_checksum: String,
    pub flags: TransferFlags,
}

/// Copies the trained weights and averages the final hidden state over
/// `data`, every sequence starting from the zero state.
pub fn harvest_bundle(
    params: &Parameters,
    data: &Dataset,
    flags: TransferFlags,
) -> Result<TransferBundle, TransferError> {
    if data.is_empty() {
        return Err(TransferError::EmptyDataset);
    }
    params.validate()?;
    let cfg = &params.config;
    let zero = HiddenState::zeros(cfg.lstm_layers, cfg.lstm_hidden);
    let mut acc = zero.clone();
    for chunk in data.sequences.chunks(EVAL_BATCH) {
        let seqs: Vec<&ImageSequence> = chunk.iter().collect();
        let maps: Vec<_> = chunk.iter().map(|s| data.maps_for(s)).collect();
        let out = forward_batch(params, &seqs, &maps, &zero)?;
        for state in &out.hidden {
            for (a, l) in acc.layers.iter_mut().zip(&state.layers) {
                a.h.iter_mut().zip(&l.h).for_each(|(x, y)| *x += y);
                a.c.iter_mut().zip(&l.c).for_each(|(x, y)| *x += y);
            }
        }
    }
    let n = data.len() as f64;
    let harvested_hidden = HiddenState {
        layers: acc
            .layers
            .into_iter()
            .map(|l| LayerState {
                h: l.h.into_iter().map(|v| v / n).collect(),
                c: l.c.into_iter().map(|v| v / n).collect(),
            })
            .collect(),
    };
    let mut cnn = BTreeMap::new();
    let mut lstm = BTreeMap::new();
    for spec in param_specs(cfg) {
        let t = params.get(&spec.name)?.clone();
        match spec.group {
            ParamGroup::Spatial => cnn.insert(spec.name, t),
            ParamGroup::Temporal => lstm.insert(spec.name, t),
        };
    }
    Ok(TransferBundle {
        cnn_and_inception_weights: cnn,
        lstm_weights: lstm,
        harvested_hidden,
        source_config: cfg.clone(),
        source_config_digest: cfg.transfer_digest(),
        source_checksum: params.checksum(),
        flags,
    })
}

/// Starting point of Phase 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase2Init {
    pub params: Parameters,
    pub hidden: HiddenState,
    /// Non-fatal findings, such as a config digest that differs from the
    /// source model's.
    pub warnings: Vec<String>,
}

/// Builds the Phase-2 model: transferred groups are copied, the rest come
/// from `init_parameters(target, seed)`. When the input grows from 3 to 6
/// channels the first convolution's kernels for the new channels are zero,
/// so the model initially ignores the auxiliary channels.
pub fn init_phase2(bundle: &TransferBundle, target: &NetworkConfig, seed: u64) -> Result<Phase2Init, TransferError> {
    target.validate()?;
    let src_ch = bundle.source_config.input_channels;
    if target.input_channels < src_ch {
        return Err(TransferError::Incompatible(format!(
            "target has {} input channels, source has {src_ch}",
            target.input_channels
        )));
    }
    let mut params = init_parameters(target, seed)?;
    let flags = bundle.flags;
    for spec in param_specs(target) {
        let (wanted, group) = match spec.group {
            ParamGroup::Spatial => (flags.transfer_cnn, &bundle.cnn_and_inception_weights),
            ParamGroup::Temporal => (flags.transfer_lstm_weights, &bundle.lstm_weights),
        };
        if !wanted {
            continue;
        }
        let src = group
            .get(&spec.name)
            .ok_or_else(|| TransferError::Incompatible(format!("bundle lacks {}", spec.name)))?;
        let t = if src.shape() == spec.shape.as_slice() {
            src.clone()
        } else if spec.name == "conv1.weight"
            && src.shape()[1] == src_ch
            && src.shape()[0] == spec.shape[0]
            && src.shape()[2..] == spec.shape[2..]
        {
            grow_input_channels(src, target.input_channels)
        } else {
            return Err(TransferError::Incompatible(format!(
                "{} is {:?} in the bundle but {:?} in the target",
                spec.name,
                src.shape(),
                spec.shape
            )));
        };
        params.tensors.insert(spec.name, t);
    }
    let hidden = if flags.transfer_hidden {
        bundle
            .harvested_hidden
            .check_dims(target.lstm_layers, target.lstm_hidden)
            .map_err(|e| TransferError::Incompatible(e.to_string()))?;
        bundle.harvested_hidden.clone()
    } else {
        init_hidden_random(target, seed)?
    };
    let mut warnings = Vec::new();
    if target.transfer_digest() != bundle.source_config_digest {
        warnings.push(format!(
            "target config digest {} differs from the source's {}",
            target.transfer_digest(),
            bundle.source_config_digest
        ));
    }
    Ok(Phase2Init {
        params,
        hidden,
        warnings,
    })
}

/// `[Cout, Cs, k, k]` -> `[Cout, channels, k, k]`, new slices zero.
fn grow_input_channels(src: &Tensor, channels: usize) -> Tensor {
    let s = src.shape();
    let (cout, cs, kk) = (s[0], s[1], s[2] * s[3]);
    Tensor::from_fn(&[cout, channels, s[2], s[3]], |i| {
        let o = i / (channels * kk);
        let c = (i / kk) % channels;
        if c < cs {
            src.data()[(o * cs + c) * kk + i % kk]
        } else {
            0.0
        }
    })
}

pub fn save_bundle(bundle: &TransferBundle, path: &Path) -> Result<(), TransferError> {
    let mut c = Container::new(BUNDLE_KIND);
    for (k, v) in bundle.source_config.to_kv() {
        c.set(&format!("config.{k}"), v);
    }
    c.set("source_config_digest", &bundle.source_config_digest);
    c.set("source_checksum", &bundle.source_checksum);
    c.set("flags.transfer_cnn", bundle.flags.transfer_cnn);
    c.set("flags.transfer_lstm_weights", bundle.flags.transfer_lstm_weights);
    c.set("flags.transfer_hidden", bundle.flags.transfer_hidden);
    for (prefix, group) in [
        ("cnn", &bundle.cnn_and_inception_weights),
        ("lstm", &bundle.lstm_weights),
    ] {
        for (name, t) in group {
            c.push_f32(
                &format!("{prefix}/{name}"),
                t.shape(),
                t.data().iter().map(|&v| v as f32).collect(),
            );
        }
    }
    write_hidden(&mut c, "hidden", &bundle.harvested_hidden);
    Ok(c.write(path)?)
}

pub fn load_bundle(path: &Path) -> Result<TransferBundle, TransferError> {
    let c = Container::read(path)?;
    c.expect_kind(BUNDLE_KIND)?;
    let source_config = read_config(&c)?;
    let mut cnn = BTreeMap::new();
    let mut lstm = BTreeMap::new();
    for spec in param_specs(&source_config) {
        let prefix = match spec.group {
            ParamGroup::Spatial => "cnn",
            ParamGroup::Temporal => "lstm",
        };
        let b = c.blob(&format!("{prefix}/{}", spec.name))?;
        let t = Tensor::new(b.shape.clone(), b.data.to_f64())?;
        if t.shape() != spec.shape.as_slice() {
            return Err(TransferError::Incompatible(format!(
                "{} has the wrong shape",
                spec.name
            )));
        }
        match spec.group {
            ParamGroup::Spatial => cnn.insert(spec.name, t),
            ParamGroup::Temporal => lstm.insert(spec.name, t),
        };
    }
    let harvested_hidden = read_hidden(&c, "hidden", source_config.lstm_layers, source_config.lstm_hidden)
        .map_err(|e| TransferError::Incompatible(e.to_string()))?;
    Ok(TransferBundle {
        cnn_and_inception_weights: cnn,
        lstm_weights: lstm,
        harvested_hidden,
        source_config_digest: c.get("source_config_digest")?.to_string(),
        source_checksum: c.get("source_checksum")?.to_string(),
        flags: TransferFlags {
            transfer_cnn: c.get_parsed("flags.transfer_cnn")?,
            transfer_lstm_weights: c.get_parsed("flags.transfer_lstm_weights")?,
            transfer_hidden: c.get_parsed("flags.transfer_hidden")?,
        },
        source_config,
    })
}
