use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetworkError;
use crate::tensor::{conv_output_size, pool_output_size};

/// Fixed output scale of the regression head: the single linear output is
/// multiplied by this many degrees.
pub const STEERING_SCALE_DEG: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Two-way softmax; index 0 is `Safe`, index 1 is `Collision`.
    Classification,
    /// One scalar in degrees.
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification => 2,
            HeadKind::Regression => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Classification => "classification",
            HeadKind::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classification" => Some(HeadKind::Classification),
            "regression" | "steering" => Some(HeadKind::Regression),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// Channel counts of a four-branch inception module:
/// 1x1 | 1x1 -> 3x3 | 1x1 -> 5x5 | 3x3 max-pool -> 1x1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub b3_reduce: usize,
    pub b3: usize,
    pub b4: usize,
}

impl InceptionSpec {
    pub fn out_channels(&self) -> usize {
        self.b1 + self.b2 + self.b3 + self.b4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub sequence_length: usize,
    pub conv: [ConvSpec; 2],
    pub inception: [InceptionSpec; 2],
    pub bridge_features: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    /// Widths of the first two fully connected layers; the third is the head.
    pub fc_hidden: [usize; 2],
    pub head: HeadKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 3,
            frame_height: 280,
            frame_width: 420,
            sequence_length: 15,
            conv: [
                ConvSpec {
                    out_channels: 16,
                    kernel: 5,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
            ],
            inception: [
                InceptionSpec {
                    b1: 8,
                    b2_reduce: 12,
                    b2: 16,
                    b3_reduce: 4,
                    b3: 8,
                    b4: 8,
                },
                InceptionSpec {
                    b1: 16,
                    b2_reduce: 16,
                    b2: 24,
                    b3_reduce: 8,
                    b3: 12,
                    b4: 12,
                },
            ],
            bridge_features: 64,
            lstm_layers: 2,
            lstm_hidden: 32,
            fc_hidden: [32, 16],
            head: HeadKind::Classification,
        }
    }
}

impl NetworkConfig {
    /// Default architecture at a given frame size and sequence length.
    pub fn toy(frame_height: usize, frame_width: usize, sequence_length: usize) -> Self {
        NetworkConfig {
            frame_height,
            frame_width,
            sequence_length,
            ..Self::default()
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.input_channels = channels;
        self
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        if self.input_channels != 3 && self.input_channels != 6 {
            return bad(format!("input_channels must be 3 or 6, got {}", self.input_channels));
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be at least 1".into());
        }
        if self.lstm_layers != 2 {
            return bad(format!("exactly 2 LSTM layers are supported, got {}", self.lstm_layers));
        }
        if self.lstm_hidden == 0 || self.bridge_features == 0 || self.fc_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        for (i, c) in self.conv.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return bad(format!("conv{} has a zero dimension", i + 1));
            }
        }
        for (i, m) in self.inception.iter().enumerate() {
            let dims = [m.b1, m.b2_reduce, m.b2, m.b3_reduce, m.b3, m.b4];
            if dims.contains(&0) {
                return bad(format!("inception{} has a zero branch width", i + 1));
            }
        }
        self.inception_spatial()?;
        Ok(())
    }

    /// Spatial size `(h, w)` of the inception feature maps.
    pub fn inception_spatial(&self) -> Result<(usize, usize), NetworkError> {
        let mut h = self.frame_height;
        let mut w = self.frame_width;
        for (i, c) in self.conv.iter().enumerate() {
            let err = || {
                NetworkError::InvalidConfig(format!(
                    "frame {}x{} too small for conv{}",
                    self.frame_height,
                    self.frame_width,
                    i + 1
                ))
            };
            h = conv_output_size(h, c.kernel, c.stride, c.padding()).ok_or_else(err)?;
            w = conv_output_size(w, c.kernel, c.stride, c.padding()).ok_or_else(err)?;
            h = pool_output_size(h, 2, 2, 0, true).ok_or_else(err)?;
            w = pool_output_size(w, 2, 2, 0, true).ok_or_else(err)?;
        }
        Ok((h, w))
    }

    /// Length of one frame's flattened second-inception output.
    pub fn inception_feature_len(&self) -> usize {
        let (h, w) = self.inception_spatial().unwrap_or((0, 0));
        self.inception[1].out_channels() * h * w
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("input_channels", self.input_channels.to_string());
        put("frame_height", self.frame_height.to_string());
        put("frame_width", self.frame_width.to_string());
        put("sequence_length", self.sequence_length.to_string());
        for (i, c) in self.conv.iter().enumerate() {
            put(
                &format!("conv{}", i + 1),
                format!("{},{},{}", c.out_channels, c.kernel, c.stride),
            );
        }
        for (i, m) in self.inception.iter().enumerate() {
            put(
                &format!("inception{}", i + 1),
                format!("{},{},{},{},{},{}", m.b1, m.b2_reduce, m.b2, m.b3_reduce, m.b3, m.b4),
            );
        }
        put("bridge_features", self.bridge_features.to_string());
        put("lstm_layers", self.lstm_layers.to_string());
        put("lstm_hidden", self.lstm_hidden.to_string());
        put("fc_hidden", format!("{},{}", self.fc_hidden[0], self.fc_hidden[1]));
        put("head", self.head.as_str().to_string());
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self, NetworkError> {
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| NetworkError::InvalidConfig(format!("missing config key {k}")))
        };
        let num = |k: &str| -> Result<usize, NetworkError> {
            get(k)?
                .parse()
                .map_err(|_| NetworkError::InvalidConfig(format!("{k} is not an integer")))
        };
        let list = |k: &str, len: usize| -> Result<Vec<usize>, NetworkError> {
            let v: Result<Vec<usize>, _> = get(k)?.split(',').map(|s| s.trim().parse()).collect();
            match v {
                Ok(v) if v.len() == len => Ok(v),
                _ => Err(NetworkError::InvalidConfig(format!("{k} needs {len} integers"))),
            }
        };
        let conv = |k: &str| -> Result<ConvSpec, NetworkError> {
            let v = list(k, 3)?;
            Ok(ConvSpec {
                out_channels: v[0],
                kernel: v[1],
                stride: v[2],
            })
        };
        let inception = |k: &str| -> Result<InceptionSpec, NetworkError> {
            let v = list(k, 6)?;
            Ok(InceptionSpec {
                b1: v[0],
                b2_reduce: v[1],
                b2: v[2],
                b3_reduce: v[3],
                b3: v[4],
                b4: v[5],
            })
        };
        let fc = list("fc_hidden", 2)?;
        let head =
            HeadKind::parse(get("head")?).ok_or_else(|| NetworkError::InvalidConfig("unknown head kind".into()))?;
        let cfg = NetworkConfig {
            input_channels: num("input_channels")?,
            frame_height: num("frame_height")?,
            frame_width: num("frame_width")?,
            sequence_length: num("sequence_length")?,
            conv: [conv("conv1")?, conv("conv2")?],
            inception: [inception("inception1")?, inception("inception2")?],
            bridge_features: num("bridge_features")?,
            lstm_layers: num("lstm_layers")?,
            lstm_hidden: num("lstm_hidden")?,
            fc_hidden: [fc[0], fc[1]],
            head,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 over the canonical key/value form.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_kv() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex_string(&h.finalize())
    }

    /// Digest of everything except `input_channels`, which may grow between
    /// phases.
    pub fn transfer_digest(&self) -> String {
        self.clone().with_channels(3).digest()
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
