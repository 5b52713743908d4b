//! CNN + Inception + LSTM forward graph.
//!
//! Per frame: conv1 -> relu -> 2x2 max-pool -> conv2 -> relu -> 2x2 max-pool
//! -> inception1 -> inception2 -> spatial mean -> linear bridge. The bridge
//! features of all frames feed a two-layer LSTM whose final top-layer `h`
//! goes through three fully connected layers and the head.
//!
//! Frames of a batch are laid out sequence-major: row `n * T + t` is frame
//! `t` of sequence `n`.

use std::collections::BTreeMap;

use super::config::STEERING_SCALE_DEG;
use super::{HeadKind, HiddenState, ImageSequence, Label, LayerState, NetworkConfig, NetworkError, Parameters};
use crate::salient::SalientMaps;
use crate::tensor::{Tape, Tensor, Var};

/// Parameter tensors bound to a tape.
#[derive(Clone, Debug)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn bind(tape: &mut Tape, params: &Parameters, requires_grad: bool) -> Self {
        ParamVars(
            params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad)))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Result<Var, NetworkError> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| NetworkError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Handles to the interesting nodes of one forward graph.
#[derive(Clone, Debug)]
pub struct Graph {
    /// Pre-activation head output `[N, outputs]`.
    pub logits: Var,
    /// Softmax probabilities or degrees, `[N, outputs]`.
    pub output: Var,
    /// Second inception module output `[N*T, C, h, w]`.
    pub inception: Var,
    /// Final `(h, c)` per LSTM layer, each `[N, hidden]`.
    pub final_state: Vec<(Var, Var)>,
}

fn check(tape: &Tape, v: Var, layer: &str) -> Result<Var, NetworkError> {
    if tape.value(v).all_finite() {
        Ok(v)
    } else {
        Err(NetworkError::NonFinite {
            layer: layer.to_string(),
        })
    }
}

fn conv(tape: &mut Tape, pv: &ParamVars, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, NetworkError> {
    let w = pv.get(&format!("{name}.weight"))?;
    let b = pv.get(&format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, b, stride, pad)?;
    let y = tape.relu(y);
    check(tape, y, name)
}

fn inception(tape: &mut Tape, pv: &ParamVars, name: &str, x: Var) -> Result<Var, NetworkError> {
    let b1 = conv(tape, pv, &format!("{name}.b1"), x, 1, 0)?;
    let r2 = conv(tape, pv, &format!("{name}.b2_reduce"), x, 1, 0)?;
    let b2 = conv(tape, pv, &format!("{name}.b2"), r2, 1, 1)?;
    let r3 = conv(tape, pv, &format!("{name}.b3_reduce"), x, 1, 0)?;
    let b3 = conv(tape, pv, &format!("{name}.b3"), r3, 1, 2)?;
    let pooled = tape.max_pool2d(x, 3, 1, 1, false)?;
    let b4 = conv(tape, pv, &format!("{name}.b4"), pooled, 1, 0)?;
    Ok(tape.concat_channels(&[b1, b2, b3, b4])?)
}

fn dense(tape: &mut Tape, pv: &ParamVars, name: &str, x: Var) -> Result<Var, NetworkError> {
    let w = pv.get(&format!("{name}.weight"))?;
    let b = pv.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    let y = tape.add_bias(y, b)?;
    check(tape, y, name)
}

/// Per-frame spatial stack. Returns `(inception2 output, bridge features)`.
pub fn build_spatial(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    pv: &ParamVars,
    input: Var,
) -> Result<(Var, Var), NetworkError> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1..] != [cfg.input_channels, cfg.frame_height, cfg.frame_width] {
        return Err(NetworkError::Shape(format!(
            "input {shape:?} does not match [*, {}, {}, {}]",
            cfg.input_channels, cfg.frame_height, cfg.frame_width
        )));
    }
    let mut x = input;
    for (i, c) in cfg.conv.iter().enumerate() {
        x = conv(tape, pv, &format!("conv{}", i + 1), x, c.stride, c.padding())?;
        x = tape.max_pool2d(x, 2, 2, 0, true)?;
    }
    let inc1 = inception(tape, pv, "inc1", x)?;
    let inc2 = inception(tape, pv, "inc2", inc1)?;
    let pooled = tape.avg_pool_spatial(inc2)?;
    let bridge = dense(tape, pv, "bridge", pooled)?;
    Ok((inc2, bridge))
}

fn repeat_rows(v: &[f64], n: usize) -> Tensor {
    Tensor::from_fn(&[n, v.len()], |i| v[i % v.len()])
}

/// Builds the full graph for `batch` sequences laid out in `input`.
pub fn build_graph(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    pv: &ParamVars,
    input: Var,
    batch: usize,
    h0: &HiddenState,
) -> Result<Graph, NetworkError> {
    h0.check_dims(cfg.lstm_layers, cfg.lstm_hidden)?;
    let t_len = cfg.sequence_length;
    if tape.shape(input)[0] != batch * t_len {
        return Err(NetworkError::Shape(format!(
            "input holds {} frames, expected {batch} x {t_len}",
            tape.shape(input)[0]
        )));
    }
    let (inc2, bridge) = build_spatial(tape, cfg, pv, input)?;

    let hidden = cfg.lstm_hidden;
    let mut layer_input: Vec<Var> = (0..t_len)
        .map(|t| {
            let rows: Vec<usize> = (0..batch).map(|n| n * t_len + t).collect();
            tape.select_rows(bridge, &rows)
        })
        .collect::<Result<_, _>>()?;
    let mut final_state = Vec::with_capacity(cfg.lstm_layers);
    for (l, start) in h0.layers.iter().enumerate() {
        let name = format!("lstm{}", l + 1);
        let w_ih = pv.get(&format!("{name}.w_ih"))?;
        let w_hh = pv.get(&format!("{name}.w_hh"))?;
        let bias = pv.get(&format!("{name}.bias"))?;
        let mut h = tape.constant(repeat_rows(&start.h, batch));
        let mut c = tape.constant(repeat_rows(&start.c, batch));
        let mut outputs = Vec::with_capacity(t_len);
        for &x in &layer_input {
            let xi = tape.matmul(x, w_ih)?;
            let hh = tape.matmul(h, w_hh)?;
            let gates = tape.add(xi, hh)?;
            let gates = tape.add_bias(gates, bias)?;
            let i = tape.slice_cols(gates, 0, hidden)?;
            let f = tape.slice_cols(gates, hidden, hidden)?;
            let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
            let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
            let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c);
            h = tape.mul(o, squashed)?;
            outputs.push(h);
        }
        check(tape, h, &name)?;
        check(tape, c, &name)?;
        final_state.push((h, c));
        layer_input = outputs;
    }

    let top = final_state.last().expect("two layers").0;
    let x = dense(tape, pv, "fc1", top)?;
    let x = tape.relu(x);
    let x = dense(tape, pv, "fc2", x)?;
    let x = tape.relu(x);
    let logits = dense(tape, pv, "fc3", x)?;
    let output = match cfg.head {
        HeadKind::Classification => tape.softmax(logits),
        HeadKind::Regression => tape.scale(logits, STEERING_SCALE_DEG),
    };
    Ok(Graph {
        logits,
        output,
        inception: inc2,
        final_state,
    })
}

/// Stacks sequences into a `[N*T, C, H, W]` input. With a 6-channel config,
/// 3-channel frames are extended by the (saliency, gradient, edge) maps when
/// given and by zeros otherwise.
pub fn assemble_input(
    cfg: &NetworkConfig,
    seqs: &[&ImageSequence],
    maps: &[Option<&SalientMaps>],
) -> Result<Tensor, NetworkError> {
    if seqs.is_empty() {
        return Err(NetworkError::Shape("empty batch".into()));
    }
    if maps.len() != seqs.len() {
        return Err(NetworkError::Shape(format!(
            "{} map entries for {} sequences",
            maps.len(),
            seqs.len()
        )));
    }
    let (t_len, ch, h, w) = (
        cfg.sequence_length,
        cfg.input_channels,
        cfg.frame_height,
        cfg.frame_width,
    );
    let plane = h * w;
    let mut data = Vec::with_capacity(seqs.len() * t_len * ch * plane);
    for (seq, m) in seqs.iter().zip(maps) {
        let f = &seq.frames;
        if f.t != t_len || f.h != h || f.w != w {
            return Err(NetworkError::Shape(format!(
                "sequence {} has frames {:?}, model expects T={t_len}, {h}x{w}",
                seq.id,
                f.shape()
            )));
        }
        let extend = match (f.c, ch) {
            (a, b) if a == b => {
                if m.is_some() {
                    return Err(NetworkError::Shape(format!(
                        "sequence {} has salient maps but the model has no auxiliary channels",
                        seq.id
                    )));
                }
                false
            }
            (3, 6) => true,
            (a, b) => {
                return Err(NetworkError::Shape(format!(
                    "sequence {} has {a} channels, model expects {b}",
                    seq.id
                )))
            }
        };
        if let Some(m) = m {
            m.check_matches(f)?;
        }
        for t in 0..t_len {
            data.extend(f.frame(t).iter().map(|&v| v as f64));
            if extend {
                match m {
                    Some(m) => {
                        for aux in [&m.saliency, &m.gradient_map, &m.edges] {
                            data.extend(aux.plane(t, 0).iter().map(|&v| v as f64));
                        }
                    }
                    None => data.extend(std::iter::repeat_n(0.0, 3 * plane)),
                }
            }
        }
    }
    Ok(Tensor::new(vec![seqs.len() * t_len, ch, h, w], data)?)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Probabilities (classification) or degrees (regression).
    pub output: Vec<f64>,
    pub hidden: HiddenState,
    /// `[T, D]`: flattened second-inception output per frame.
    pub inception_features: Tensor,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// `[N, outputs]`.
    pub outputs: Tensor,
    pub logits: Tensor,
    pub hidden: Vec<HiddenState>,
    /// `[N*T, D]`.
    pub inception_features: Tensor,
}

fn read_states(tape: &Tape, graph: &Graph, batch: usize) -> Vec<HiddenState> {
    (0..batch)
        .map(|n| HiddenState {
            layers: graph
                .final_state
                .iter()
                .map(|&(h, c)| LayerState {
                    h: tape.value(h).row(n).to_vec(),
                    c: tape.value(c).row(n).to_vec(),
                })
                .collect(),
        })
        .collect()
}

/// Inference over a batch without recording gradients for parameters.
pub fn forward_batch(
    params: &Parameters,
    seqs: &[&ImageSequence],
    maps: &[Option<&SalientMaps>],
    h0: &HiddenState,
) -> Result<BatchOutput, NetworkError> {
    let cfg = &params.config;
    let input = assemble_input(cfg, seqs, maps)?;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, false);
    let x = tape.constant(input);
    let graph = build_graph(&mut tape, cfg, &pv, x, seqs.len(), h0)?;
    let inc = tape.value(graph.inception);
    let frames = inc.shape()[0];
    let inception_features = inc.clone().reshape(&[frames, inc.numel() / frames])?;
    Ok(BatchOutput {
        outputs: tape.value(graph.output).clone(),
        logits: tape.value(graph.logits).clone(),
        hidden: read_states(&tape, &graph, seqs.len()),
        inception_features,
    })
}

/// Forward pass over one sequence (auxiliary channels zero-filled if the
/// model has them).
pub fn forward(params: &Parameters, seq: &ImageSequence, h0: &HiddenState) -> Result<ForwardOutput, NetworkError> {
    forward_with_maps(params, seq, None, h0)
}

pub fn forward_with_maps(
    params: &Parameters,
    seq: &ImageSequence,
    maps: Option<&SalientMaps>,
    h0: &HiddenState,
) -> Result<ForwardOutput, NetworkError> {
    let mut out = forward_batch(params, &[seq], &[maps], h0)?;
    Ok(ForwardOutput {
        output: out.outputs.row(0).to_vec(),
        hidden: out.hidden.pop().expect("one sequence"),
        inception_features: out.inception_features,
    })
}

/// Argmax of a two-way probability vector; ties go to `Safe`.
pub fn decide(probs: &[f64]) -> Label {
    if probs[Label::Collision.index()] > probs[Label::Safe.index()] {
        Label::Collision
    } else {
        Label::Safe
    }
}

pub fn classify(params: &Parameters, seq: &ImageSequence, h0: &HiddenState) -> Result<Label, NetworkError> {
    if params.config.head != HeadKind::Classification {
        return Err(NetworkError::HeadMismatch(
            "classify needs a classification head".into(),
        ));
    }
    Ok(decide(&forward(params, seq, h0)?.output))
}

/// Flattened second-inception features of individual frames, each run as a
/// single image through the spatial stack.
pub fn frame_features(params: &Parameters, frames: &[(&ImageSequence, usize)]) -> Result<Tensor, NetworkError> {
    let cfg = &params.config;
    let plane = cfg.frame_height * cfg.frame_width;
    let mut data = Vec::with_capacity(frames.len() * cfg.input_channels * plane);
    for (seq, t) in frames {
        let f = &seq.frames;
        if f.h != cfg.frame_height || f.w != cfg.frame_width || *t >= f.t {
            return Err(NetworkError::Shape(format!(
                "frame {t} of {} does not fit the model",
                seq.id
            )));
        }
        if f.c != 3 && f.c != cfg.input_channels {
            return Err(NetworkError::Shape(format!("sequence {} has {} channels", seq.id, f.c)));
        }
        data.extend(f.frame(*t).iter().map(|&v| v as f64));
        data.extend(std::iter::repeat_n(0.0, (cfg.input_channels - f.c) * plane));
    }
    let input = Tensor::new(
        vec![frames.len(), cfg.input_channels, cfg.frame_height, cfg.frame_width],
        data,
    )?;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, false);
    let x = tape.constant(input);
    let (inc2, _) = build_spatial(&mut tape, cfg, &pv, x)?;
    let v = tape.value(inc2).clone();
    let n = v.shape()[0];
    let d = v.numel() / n;
    Ok(v.reshape(&[n, d])?)
}
