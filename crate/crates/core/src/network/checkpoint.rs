//! Parameters in the container format: `kind=checkpoint`, the network config
//! under `meta.config.*`, and one `f32` blob per tensor.

use std::path::Path;

use super::{param_specs, HiddenState, LayerState, NetworkConfig, NetworkError, Parameters};
use crate::container::Container;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Writes config, init metadata and tensors into `c`.
pub fn write_params(c: &mut Container, params: &Parameters) {
    for (k, v) in params.config.to_kv() {
        c.set(&format!("config.{k}"), v);
    }
    c.set("config_digest", params.config.digest());
    c.set("init_seed", params.seed);
    c.set("init_scheme", &params.scheme);
    for (name, t) in &params.tensors {
        c.push_f32(
            &format!("param/{name}"),
            t.shape(),
            t.data().iter().map(|&v| v as f32).collect(),
        );
    }
}

pub fn read_config(c: &Container) -> Result<NetworkConfig, NetworkError> {
    let kv = c
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    NetworkConfig::from_kv(&kv)
}

pub fn read_params(c: &Container) -> Result<Parameters, NetworkError> {
    let config = read_config(c)?;
    let mut tensors = std::collections::BTreeMap::new();
    for spec in param_specs(&config) {
        let blob = c.blob(&format!("param/{}", spec.name))?;
        let t = Tensor::new(blob.shape.clone(), blob.data.to_f64())?;
        tensors.insert(spec.name, t);
    }
    let params = Parameters {
        config,
        tensors,
        seed: c.get_parsed("init_seed")?,
        scheme: c.get("init_scheme")?.to_string(),
    };
    params.validate()?;
    Ok(params)
}

pub fn write_hidden(c: &mut Container, prefix: &str, hidden: &HiddenState) {
    for (l, layer) in hidden.layers.iter().enumerate() {
        c.push_f64(&format!("{prefix}/{l}/h"), &[layer.h.len()], layer.h.clone());
        c.push_f64(&format!("{prefix}/{l}/c"), &[layer.c.len()], layer.c.clone());
    }
}

pub fn read_hidden(c: &Container, prefix: &str, n_layers: usize, hidden: usize) -> Result<HiddenState, NetworkError> {
    let layers = (0..n_layers)
        .map(|l| {
            Ok(LayerState {
                h: c.blob(&format!("{prefix}/{l}/h"))?.data.to_f64(),
                c: c.blob(&format!("{prefix}/{l}/c"))?.data.to_f64(),
            })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    let state = HiddenState { layers };
    state.check_dims(n_layers, hidden)?;
    Ok(state)
}

/// Saves parameters and, when given, the LSTM start state the model was
/// trained with (stored in full precision).
pub fn save_checkpoint(params: &Parameters, hidden: Option<&HiddenState>, path: &Path) -> Result<(), NetworkError> {
    let mut c = Container::new(CHECKPOINT_KIND);
    write_params(&mut c, params);
    c.set("param_checksum", params_checksum_f32(params));
    c.set("has_hidden", hidden.is_some());
    if let Some(h) = hidden {
        h.check_dims(params.config.lstm_layers, params.config.lstm_hidden)?;
        write_hidden(&mut c, "hidden", h);
    }
    Ok(c.write(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters, Option<HiddenState>), NetworkError> {
    let c = Container::read(path)?;
    c.expect_kind(CHECKPOINT_KIND)?;
    let params = read_params(&c)?;
    let hidden = if c.get_parsed::<bool>("has_hidden")? {
        Some(read_hidden(
            &c,
            "hidden",
            params.config.lstm_layers,
            params.config.lstm_hidden,
        )?)
    } else {
        None
    };
    Ok((params, hidden))
}

/// Checksum of the parameters after rounding to the stored precision.
fn params_checksum_f32(params: &Parameters) -> String {
    let mut p = params.clone();
    p.apply_precision(crate::tensor::Precision::Single);
    p.checksum()
}
