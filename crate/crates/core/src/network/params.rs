use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::hex_string;
use super::{HiddenState, LayerState, NetworkConfig, NetworkError};
use crate::rng::rng_for;
use crate::tensor::{Precision, Tensor};

/// Standard deviation of the random initial LSTM state.
pub const HIDDEN_NOISE_STD: f64 = 0.1;

/// Which transfer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Convolutions, inception modules and the frame-to-LSTM projection.
    Spatial,
    /// LSTM layers and the fully connected head.
    Temporal,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
    pub group: ParamGroup,
}

fn push_conv(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k],
        fan_in: cin * k * k,
        fan_out: cout * k * k,
        is_bias: false,
        group: ParamGroup::Spatial,
    });
    specs.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![cout],
        fan_in: cin * k * k,
        fan_out: cout * k * k,
        is_bias: true,
        group: ParamGroup::Spatial,
    });
}

fn push_dense(specs: &mut Vec<ParamSpec>, name: &str, input: usize, output: usize, group: ParamGroup) {
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![input, output],
        fan_in: input,
        fan_out: output,
        is_bias: false,
        group,
    });
    specs.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![output],
        fan_in: input,
        fan_out: output,
        is_bias: true,
        group,
    });
}

/// Every learnable tensor of the architecture, in construction order.
pub fn param_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut cin = cfg.input_channels;
    for (i, c) in cfg.conv.iter().enumerate() {
        push_conv(&mut specs, &format!("conv{}", i + 1), cin, c.out_channels, c.kernel);
        cin = c.out_channels;
    }
    for (i, m) in cfg.inception.iter().enumerate() {
        let p = format!("inc{}", i + 1);
        push_conv(&mut specs, &format!("{p}.b1"), cin, m.b1, 1);
        push_conv(&mut specs, &format!("{p}.b2_reduce"), cin, m.b2_reduce, 1);
        push_conv(&mut specs, &format!("{p}.b2"), m.b2_reduce, m.b2, 3);
        push_conv(&mut specs, &format!("{p}.b3_reduce"), cin, m.b3_reduce, 1);
        push_conv(&mut specs, &format!("{p}.b3"), m.b3_reduce, m.b3, 5);
        push_conv(&mut specs, &format!("{p}.b4"), cin, m.b4, 1);
        cin = m.out_channels();
    }
    push_dense(&mut specs, "bridge", cin, cfg.bridge_features, ParamGroup::Spatial);
    let h = cfg.lstm_hidden;
    let mut input = cfg.bridge_features;
    for l in 1..=cfg.lstm_layers {
        let group = ParamGroup::Temporal;
        specs.push(ParamSpec {
            name: format!("lstm{l}.w_ih"),
            shape: vec![input, 4 * h],
            fan_in: input,
            fan_out: 4 * h,
            is_bias: false,
            group,
        });
        specs.push(ParamSpec {
            name: format!("lstm{l}.w_hh"),
            shape: vec![h, 4 * h],
            fan_in: h,
            fan_out: 4 * h,
            is_bias: false,
            group,
        });
        specs.push(ParamSpec {
            name: format!("lstm{l}.bias"),
            shape: vec![4 * h],
            fan_in: input,
            fan_out: 4 * h,
            is_bias: true,
            group,
        });
        input = h;
    }
    push_dense(&mut specs, "fc1", h, cfg.fc_hidden[0], ParamGroup::Temporal);
    push_dense(
        &mut specs,
        "fc2",
        cfg.fc_hidden[0],
        cfg.fc_hidden[1],
        ParamGroup::Temporal,
    );
    push_dense(
        &mut specs,
        "fc3",
        cfg.fc_hidden[1],
        cfg.head.outputs(),
        ParamGroup::Temporal,
    );
    specs
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// All learnable tensors keyed by layer name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: NetworkConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub seed: u64,
    pub scheme: String,
}

impl Parameters {
    pub fn get(&self, name: &str) -> Result<&Tensor, NetworkError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NetworkError::MissingParameter(name.to_string()))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks every tensor against the config and for finiteness.
    pub fn validate(&self) -> Result<(), NetworkError> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        if specs.len() != self.tensors.len() {
            return Err(NetworkError::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(NetworkError::Shape(format!(
                    "{} has shape {:?}, config needs {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            if !t.all_finite() {
                return Err(NetworkError::NonFinite { layer: s.name });
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    pub fn apply_precision(&mut self, precision: Precision) {
        for t in self.tensors.values_mut() {
            precision.apply(t.data_mut());
        }
    }
}

/// Xavier-uniform weights, zero biases; deterministic per `(config, seed)`.
/// Draws are stored at `f32` resolution so checkpoints hold them exactly.
pub fn init_parameters(cfg: &NetworkConfig, seed: u64) -> Result<Parameters, NetworkError> {
    cfg.validate()?;
    let mut tensors = BTreeMap::new();
    for spec in param_specs(cfg) {
        let t = if spec.is_bias {
            Tensor::zeros(&spec.shape)
        } else {
            let bound = xavier_bound(spec.fan_in, spec.fan_out);
            let mut rng = rng_for(seed, &format!("init/{}", spec.name));
            Tensor::from_fn(&spec.shape, |_| rng.random_range(-bound..bound) as f32 as f64)
        };
        tensors.insert(spec.name, t);
    }
    Ok(Parameters {
        config: cfg.clone(),
        tensors,
        seed,
        scheme: "xavier_uniform".into(),
    })
}

/// LSTM start state with every `h` and `c` entry drawn from `N(0, 0.1^2)`.
pub fn init_hidden_random(cfg: &NetworkConfig, seed: u64) -> Result<HiddenState, NetworkError> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "init/hidden");
    let normal = Normal::new(0.0, HIDDEN_NOISE_STD).expect("valid std");
    let layers = (0..cfg.lstm_layers)
        .map(|_| LayerState {
            h: (0..cfg.lstm_hidden).map(|_| normal.sample(&mut rng)).collect(),
            c: (0..cfg.lstm_hidden).map(|_| normal.sample(&mut rng)).collect(),
        })
        .collect();
    Ok(HiddenState { layers })
}
