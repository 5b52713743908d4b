use serde::{Deserialize, Serialize};

use super::NetworkError;

/// Outcome label of a classification sequence. The discriminant is the
/// class index of the softmax head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Safe = 0,
    Collision = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Safe),
            1 => Some(Label::Collision),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Safe => "safe",
            Label::Collision => "collision",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(Label),
    /// Steering angle in degrees, within [-90, 90].
    Steering(f64),
}

impl Target {
    pub fn label(&self) -> Option<Label> {
        match self {
            Target::Class(l) => Some(*l),
            Target::Steering(_) => None,
        }
    }

    pub fn angle(&self) -> Option<f64> {
        match self {
            Target::Steering(a) => Some(*a),
            Target::Class(_) => None,
        }
    }
}

/// A `[T, C, H, W]` block of pixels in `[0, 1]`, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Frames {
    pub fn new(t: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self, NetworkError> {
        if t * c * h * w != data.len() || t == 0 || c == 0 || h == 0 || w == 0 {
            return Err(NetworkError::Shape(format!(
                "{} values cannot form frames [{t}, {c}, {h}, {w}]",
                data.len()
            )));
        }
        Ok(Frames { t, c, h, w, data })
    }

    pub fn zeros(t: usize, c: usize, h: usize, w: usize) -> Self {
        Frames {
            t,
            c,
            h,
            w,
            data: vec![0.0; t * c * h * w],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.t, self.c, self.h, self.w]
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    /// One channel plane of frame `t`.
    pub fn plane(&self, t: usize, c: usize) -> &[f32] {
        let p = self.h * self.w;
        &self.frame(t)[c * p..(c + 1) * p]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Luminance (0.299 R + 0.587 G + 0.114 B) of frame `t`; a single-channel
    /// frame is returned unchanged.
    pub fn luminance(&self, t: usize) -> Vec<f64> {
        if self.c < 3 {
            return self.plane(t, 0).iter().map(|&v| v as f64).collect();
        }
        let (r, g, b) = (self.plane(t, 0), self.plane(t, 1), self.plane(t, 2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * *r as f64 + 0.587 * *g as f64 + 0.114 * *b as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence {
    pub id: String,
    pub frames: Frames,
    pub target: Target,
    pub domain_id: String,
}

impl ImageSequence {
    pub fn len(&self) -> usize {
        self.frames.t
    }

    pub fn is_empty(&self) -> bool {
        self.frames.t == 0
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if !self.frames.in_unit_range() {
            return Err(NetworkError::Shape(format!(
                "sequence {} has pixels outside [0, 1]",
                self.id
            )));
        }
        if let Target::Steering(a) = self.target {
            if !(-90.0..=90.0).contains(&a) {
                return Err(NetworkError::Shape(format!(
                    "sequence {} steering angle {a} outside [-90, 90]",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// `(h, c)` of one LSTM layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub layers: Vec<LayerState>,
}

impl HiddenState {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        HiddenState {
            layers: vec![
                LayerState {
                    h: vec![0.0; hidden],
                    c: vec![0.0; hidden],
                };
                layers
            ],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.h.len())
    }

    pub fn check_dims(&self, layers: usize, hidden: usize) -> Result<(), NetworkError> {
        let ok = self.layers.len() == layers && self.layers.iter().all(|l| l.h.len() == hidden && l.c.len() == hidden);
        if ok {
            Ok(())
        } else {
            Err(NetworkError::Shape(format!(
                "hidden state does not have {layers} layers of width {hidden}"
            )))
        }
    }

    /// `h` of the last layer, the sequence embedding compared in the
    /// hidden-state studies.
    pub fn top_h(&self) -> &[f64] {
        &self.layers.last().expect("hidden state has layers").h
    }

    /// Element-wise mean of several states of identical shape.
    pub fn mean(states: &[HiddenState]) -> Option<HiddenState> {
        let first = states.first()?;
        let mut acc = HiddenState::zeros(first.layers.len(), first.hidden_size());
        for s in states {
            for (a, l) in acc.layers.iter_mut().zip(&s.layers) {
                a.h.iter_mut().zip(&l.h).for_each(|(x, y)| *x += y);
                a.c.iter_mut().zip(&l.c).for_each(|(x, y)| *x += y);
            }
        }
        let n = states.len() as f64;
        for a in &mut acc.layers {
            a.h.iter_mut().chain(a.c.iter_mut()).for_each(|x| *x /= n);
        }
        Some(acc)
    }
}
