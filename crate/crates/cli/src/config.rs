//! Run configuration: `key = value` file, then `STTL_*` environment
//! variables, then command-line options, later layers winning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sttl_core::container::sha256_hex;
use sttl_core::experiment::ExperimentScale;
use sttl_core::network::NetworkConfig;
use sttl_core::synthdata::{builtin_domain, DomainSpec, BUILTIN_DOMAINS};
use sttl_core::tensor::Precision;
use sttl_core::transfer::{OptimizerKind, TrainConfig, TransferFlags};

pub const ENV_PREFIX: &str = "STTL_";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed for all randomness"),
    ("domain", "built-in domain: townA, townB, townC or noise"),
    ("n", "number of sequences to generate"),
    ("collision_ratio", "fraction of collision sequences"),
    ("task", "classification or steering"),
    ("frame_height", "frame height in pixels"),
    ("frame_width", "frame width in pixels"),
    ("sequence_length", "frames per sequence"),
    ("epochs", "training epochs"),
    ("batch_size", "sequences per minibatch"),
    ("learning_rate", "optimizer step size"),
    ("optimizer", "adam or sgd"),
    ("precision", "single or double"),
    ("stop_at_accuracy", "stop once train accuracy reaches this value"),
    ("salient_ratio", "fraction of the target set with salient maps"),
    ("transfer_cnn", "copy convolution and inception weights in Phase 2"),
    (
        "transfer_lstm_weights",
        "copy LSTM and fully connected weights in Phase 2",
    ),
    ("transfer_hidden", "start Phase 2 from the harvested hidden state"),
    ("pairs", "frame pairs for cosine and SSIM"),
    ("fid_samples", "frames per dataset for FID"),
    ("scale", "experiment scale: default or smoke"),
    ("seeds", "number of experiment seeds (overrides the scale)"),
    ("data", "input dataset"),
    ("data_b", "second dataset for similarity"),
    ("validation", "validation dataset"),
    ("checkpoint", "model checkpoint"),
    ("bundle", "transfer bundle"),
    ("out", "output file"),
    ("out_dir", "output directory"),
];

/// A configuration problem; reported as a usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn normalise(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_file(text: &str, origin: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{origin}:{}: expected key = value", i + 1)))?;
        let k = normalise(k);
        if !known(&k) {
            return Err(usage(format!("{origin}:{}: unknown key {k:?}", i + 1)));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

/// `STTL_*` variables as keys; unknown names are rejected.
pub fn from_env(vars: impl IntoIterator<Item = (String, String)>) -> Result<BTreeMap<String, String>, UsageError> {
    let mut out = BTreeMap::new();
    for (name, value) in vars {
        let Some(k) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let k = normalise(k);
        if !known(&k) {
            return Err(usage(format!("unknown environment variable {name}")));
        }
        out.insert(k, value);
    }
    Ok(out)
}

/// The merged key-value layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn layered(layers: &[BTreeMap<String, String>]) -> Result<Self, UsageError> {
        let mut merged = BTreeMap::new();
        for layer in layers {
            for (k, v) in layer {
                if !known(k) {
                    return Err(usage(format!("unknown key {k:?}")));
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        Ok(Settings(merged))
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, UsageError> {
        self.0
            .get(key)
            .map(|v| v.parse().map_err(|_| usage(format!("invalid value {v:?} for {key}"))))
            .transpose()
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, UsageError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.0
    }

    /// Digest of the explicitly set keys.
    pub fn digest(&self) -> String {
        let text: String = self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        sha256_hex(text.as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Steering,
}

/// Every setting, parsed and validated.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub settings: Settings,
    pub seed: u64,
    pub domain: DomainSpec,
    pub n: usize,
    pub collision_ratio: f64,
    pub task: Task,
    pub frame_height: usize,
    pub frame_width: usize,
    pub sequence_length: usize,
    pub train: TrainConfig,
    pub flags: TransferFlags,
    pub pairs: usize,
    pub fid_samples: usize,
    pub scale: ExperimentScale,
    pub data: Option<PathBuf>,
    pub data_b: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_settings(s: Settings) -> Result<Self, UsageError> {
        let domain_name: String = s.get_or("domain", "townA".to_string())?;
        let frame_height = s.get_or("frame_height", 24)?;
        let frame_width = s.get_or("frame_width", 32)?;
        let sequence_length = s.get_or("sequence_length", 15)?;
        let domain = builtin_domain(&domain_name)
            .ok_or_else(|| {
                usage(format!(
                    "unknown domain {domain_name:?}; expected one of {BUILTIN_DOMAINS:?}"
                ))
            })?
            .with_size(frame_height, frame_width);
        domain.validate().map_err(|e| usage(e.to_string()))?;
        let task = match s.get_or("task", "classification".to_string())?.as_str() {
            "classification" => Task::Classification,
            "steering" => Task::Steering,
            other => return Err(usage(format!("unknown task {other:?}"))),
        };
        let optimizer = match s.get_or("optimizer", "adam".to_string())?.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(usage(format!("unknown optimizer {other:?}"))),
        };
        let precision_name: String = s.get_or("precision", "single".to_string())?;
        let precision =
            Precision::parse(&precision_name).ok_or_else(|| usage(format!("unknown precision {precision_name:?}")))?;
        let seed = s.get_or("seed", 0u64)?;
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            epochs: s.get_or("epochs", defaults.epochs)?,
            batch_size: s.get_or("batch_size", defaults.batch_size)?,
            learning_rate: s.get_or("learning_rate", defaults.learning_rate)?,
            optimizer,
            seed,
            salient_subset_ratio: s.get_or("salient_ratio", defaults.salient_subset_ratio)?,
            loss: defaults.loss,
            precision,
            stop_at_train_accuracy: s.get("stop_at_accuracy")?,
        };
        train.validate().map_err(|e| usage(e.to_string()))?;
        let flags = TransferFlags {
            transfer_cnn: s.get_or("transfer_cnn", true)?,
            transfer_lstm_weights: s.get_or("transfer_lstm_weights", true)?,
            transfer_hidden: s.get_or("transfer_hidden", true)?,
        };
        let mut scale = match s.get_or("scale", "default".to_string())?.as_str() {
            "default" => ExperimentScale::default(),
            "smoke" => ExperimentScale::smoke(),
            other => return Err(usage(format!("unknown scale {other:?}"))),
        };
        if let Some(n) = s.get("seeds")? {
            scale.seeds = n;
        }
        scale.validate().map_err(|e| usage(e.to_string()))?;
        let collision_ratio = s.get_or("collision_ratio", 0.5)?;
        if !(0.0..=1.0).contains(&collision_ratio) {
            return Err(usage("collision_ratio must lie in [0, 1]"));
        }
        let n = s.get_or("n", 200)?;
        if n == 0 {
            return Err(usage("n must be positive"));
        }
        let pairs = s.get_or("pairs", sttl_core::similarity::DEFAULT_PAIRS)?;
        let fid_samples = s.get_or("fid_samples", 500)?;
        if pairs == 0 || fid_samples < 2 {
            return Err(usage("pairs must be positive and fid_samples at least 2"));
        }
        NetworkConfig::toy(frame_height, frame_width, sequence_length)
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        let path = |k: &str| s.get::<PathBuf>(k);
        Ok(RunConfig {
            seed,
            domain,
            n,
            collision_ratio,
            task,
            frame_height,
            frame_width,
            sequence_length,
            train,
            flags,
            pairs,
            fid_samples,
            scale,
            data: path("data")?,
            data_b: path("data_b")?,
            validation: path("validation")?,
            checkpoint: path("checkpoint")?,
            bundle: path("bundle")?,
            out: path("out")?,
            out_dir: path("out_dir")?,
            settings: s,
        })
    }

    /// Resolves file, environment and command-line layers.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        cli: BTreeMap<String, String>,
    ) -> Result<Self, UsageError> {
        let file_layer = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_file(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        Self::from_settings(Settings::layered(&[file_layer, from_env(env)?, cli])?)
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, UsageError> {
        value
            .as_deref()
            .ok_or_else(|| usage(format!("missing required setting {key} (--{})", key.replace('_', "-"))))
    }

    /// Errors when a frame geometry key was set explicitly and disagrees
    /// with `cfg`.
    pub fn check_geometry(&self, cfg: &NetworkConfig) -> Result<(), UsageError> {
        let explicit = [
            ("frame_height", self.frame_height, cfg.frame_height),
            ("frame_width", self.frame_width, cfg.frame_width),
            ("sequence_length", self.sequence_length, cfg.sequence_length),
        ];
        for (key, ours, theirs) in explicit {
            if self.settings.is_set(key) && ours != theirs {
                return Err(usage(format!(
                    "config digest mismatch: {key} = {ours} but the model was built with {theirs}"
                )));
            }
        }
        Ok(())
    }
}
