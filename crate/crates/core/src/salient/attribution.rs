//! Gradient-based attribution: vanilla saliency and GradCAM from a single
//! backward pass of the class score (pre-softmax logit).

use std::path::Path;

use super::{MapProvenance, SalientError};
use crate::network::{
    assemble_input, build_graph, decide, load_checkpoint, Frames, HeadKind, HiddenState, ImageSequence, Label,
    ParamVars, Parameters,
};
use crate::tensor::{Tape, Tensor};

/// The classifier whose gradients drive the maps, with the LSTM start state
/// it runs from. Any checkpoint following the network's forward contract
/// can be loaded here.
#[derive(Clone, Debug)]
pub struct MapModel {
    pub params: Parameters,
    pub hidden: HiddenState,
}

impl MapModel {
    pub fn new(params: Parameters, hidden: HiddenState) -> Result<Self, SalientError> {
        if params.config.head != HeadKind::Classification {
            return Err(SalientError::Network(crate::network::NetworkError::HeadMismatch(
                "attribution needs a classification head".into(),
            )));
        }
        hidden.check_dims(params.config.lstm_layers, params.config.lstm_hidden)?;
        Ok(MapModel { params, hidden })
    }

    /// Loads a checkpoint; a checkpoint without a stored start state runs
    /// from zeros.
    pub fn from_checkpoint(path: &Path) -> Result<Self, SalientError> {
        let (params, hidden) = load_checkpoint(path)?;
        let hidden = hidden.unwrap_or_else(|| HiddenState::zeros(params.config.lstm_layers, params.config.lstm_hidden));
        Self::new(params, hidden)
    }

    pub fn provenance(&self) -> MapProvenance {
        MapProvenance {
            model_checksum: self.params.checksum(),
            config_digest: self.params.config.digest(),
        }
    }
}

/// Everything one backward pass yields for a sequence.
#[derive(Clone, Debug)]
pub struct Attribution {
    pub class: Label,
    /// `∂score/∂input`, `[T, C, H, W]`.
    pub input_grad: Tensor,
    /// GradCAM before upsampling, `[T, h, w]` at the inception resolution.
    pub raw_cam: Tensor,
    pub saliency: Frames,
    pub gradient_map: Frames,
}

/// Backpropagates the logit of `class` (the predicted class when `None`)
/// to the input and to the second inception output.
pub fn attribute(model: &MapModel, seq: &ImageSequence, class: Option<Label>) -> Result<Attribution, SalientError> {
    let cfg = &model.params.config;
    if cfg.head != HeadKind::Classification {
        return Err(SalientError::Network(crate::network::NetworkError::HeadMismatch(
            "attribution needs a classification head".into(),
        )));
    }
    let input = assemble_input(cfg, &[seq], &[None])?;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, &model.params, false);
    let x = tape.leaf(input, true);
    let graph = build_graph(&mut tape, cfg, &pv, x, 1, &model.hidden)?;
    let class = class.unwrap_or_else(|| decide(tape.value(graph.output).row(0)));
    let picked = tape.slice_cols(graph.logits, class.index(), 1)?;
    let score = tape.sum(picked);
    tape.backward(score)?;

    let input_grad = tape.grad_tensor(x).unwrap_or_else(|| Tensor::zeros(tape.shape(x)));
    let features = tape.value(graph.inception).clone();
    let feature_grad = tape
        .grad_tensor(graph.inception)
        .unwrap_or_else(|| Tensor::zeros(features.shape()));
    if !input_grad.all_finite() || !feature_grad.all_finite() {
        return Err(SalientError::NonFinite(seq.id.clone()));
    }

    let (t_len, h, w) = (cfg.sequence_length, cfg.frame_height, cfg.frame_width);
    let colour = cfg.input_channels.min(3);
    let plane = h * w;
    let mut saliency = Frames::zeros(t_len, 1, h, w);
    for t in 0..t_len {
        let g = &input_grad.data()[t * cfg.input_channels * plane..];
        let mut m: Vec<f64> = (0..plane)
            .map(|p| (0..colour).map(|c| g[c * plane + p].abs()).fold(0.0, f64::max))
            .collect();
        normalize_unit(&mut m);
        saliency.frame_mut(t).iter_mut().zip(m).for_each(|(o, v)| *o = v as f32);
    }

    let raw_cam = cam_from(&features, &feature_grad);
    let (fh, fw) = (raw_cam.shape()[1], raw_cam.shape()[2]);
    let mut gradient_map = Frames::zeros(t_len, 1, h, w);
    for t in 0..t_len {
        let src = &raw_cam.data()[t * fh * fw..(t + 1) * fh * fw];
        let mut m = bilinear_upsample(src, fh, fw, h, w);
        normalize_unit(&mut m);
        gradient_map
            .frame_mut(t)
            .iter_mut()
            .zip(m)
            .for_each(|(o, v)| *o = v as f32);
    }
    Ok(Attribution {
        class,
        input_grad,
        raw_cam,
        saliency,
        gradient_map,
    })
}

/// `relu(Σ_c α_c A_c)` per frame with `α_c` the spatial mean of `∂s/∂A_c`.
fn cam_from(features: &Tensor, grad: &Tensor) -> Tensor {
    let s = features.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[n, s[2], s[3]]);
    for f in 0..n {
        let base = f * c * hw;
        let cam = &mut out.data_mut()[f * hw..(f + 1) * hw];
        for ch in 0..c {
            let a = &features.data()[base + ch * hw..base + (ch + 1) * hw];
            let g = &grad.data()[base + ch * hw..base + (ch + 1) * hw];
            let alpha = g.iter().sum::<f64>() / hw as f64;
            cam.iter_mut().zip(a).for_each(|(o, a)| *o += alpha * a);
        }
        cam.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// Class-score gradient with respect to every input pixel.
pub fn input_gradient(model: &MapModel, seq: &ImageSequence, class: Label) -> Result<Tensor, SalientError> {
    Ok(attribute(model, seq, Some(class))?.input_grad)
}

/// Max over colour channels of `|∂score/∂pixel|`, min-max normalised per frame.
pub fn vanilla_saliency(model: &MapModel, seq: &ImageSequence, class: Label) -> Result<Frames, SalientError> {
    Ok(attribute(model, seq, Some(class))?.saliency)
}

/// GradCAM at the second inception output, upsampled and normalised per frame.
pub fn grad_cam(model: &MapModel, seq: &ImageSequence, class: Label) -> Result<Frames, SalientError> {
    Ok(attribute(model, seq, Some(class))?.gradient_map)
}

/// GradCAM before upsampling and normalisation, `[T, h, w]`.
pub fn grad_cam_raw(model: &MapModel, seq: &ImageSequence, class: Label) -> Result<Tensor, SalientError> {
    Ok(attribute(model, seq, Some(class))?.raw_cam)
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_unit(m: &mut [f64]) {
    let (lo, hi) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    if span.is_nan() || span <= 1e-300 {
        m.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    m.iter_mut().for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
}

/// Bilinear resize with pixel-centre alignment and clamped borders.
pub fn bilinear_upsample(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, dn: usize, sn: usize| {
        let s = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(sn - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, dw, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
