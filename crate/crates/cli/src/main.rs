//! `sttl`: data generation, two-phase training, salient maps, evaluation,
//! similarity reports and the experiment studies.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, UsageError};

#[derive(Parser, Debug)]
#[command(name = "sttl", version, about = "Spatio-temporal transfer learning toolkit")]
struct Cli {
    /// `key = value` config file; environment (`STTL_*`) and options override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset container.
    GenData(Opts),
    /// Train on the source domain; writes a checkpoint and optionally a transfer bundle.
    TrainPhase1(Opts),
    /// Attach saliency, GradCAM and edge maps to a subset of a dataset.
    GenSalient(Opts),
    /// Train on the target domain from a transfer bundle.
    TrainPhase2(Opts),
    /// Evaluate a checkpoint on a dataset.
    Eval(Opts),
    /// Cosine, FID and SSIM between two datasets.
    Similarity(Opts),
    /// Run a study: transfer-ordering, convergence, similarity-table, steering or all.
    Experiment {
        name: String,
        #[command(flatten)]
        opts: Opts,
    },
}

/// Options shared by all subcommands. Each maps to the config key of the
/// same name with dashes replaced by underscores.
#[derive(Args, Debug, Default)]
struct Opts {
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    collision_ratio: Option<String>,
    /// classification or steering
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    frame_height: Option<String>,
    #[arg(long)]
    frame_width: Option<String>,
    #[arg(long)]
    sequence_length: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    stop_at_accuracy: Option<String>,
    #[arg(long)]
    salient_ratio: Option<String>,
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long)]
    fid_samples: Option<String>,
    /// default or smoke
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    data_b: Option<String>,
    #[arg(long)]
    validation: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    bundle: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Do not copy convolution and inception weights.
    #[arg(long)]
    no_cnn_transfer: bool,
    /// Transfer neither LSTM weights nor the hidden state.
    #[arg(long)]
    no_lstm_transfer: bool,
    /// Keep the LSTM weights but start from a random hidden state.
    #[arg(long)]
    no_hidden_transfer: bool,
}

impl Opts {
    fn into_layer(self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let fields = [
            ("seed", self.seed),
            ("domain", self.domain),
            ("n", self.n),
            ("collision_ratio", self.collision_ratio),
            ("task", self.task),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("sequence_length", self.sequence_length),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("learning_rate", self.learning_rate),
            ("optimizer", self.optimizer),
            ("precision", self.precision),
            ("stop_at_accuracy", self.stop_at_accuracy),
            ("salient_ratio", self.salient_ratio),
            ("pairs", self.pairs),
            ("fid_samples", self.fid_samples),
            ("scale", self.scale),
            ("seeds", self.seeds),
            ("data", self.data),
            ("data_b", self.data_b),
            ("validation", self.validation),
            ("checkpoint", self.checkpoint),
            ("bundle", self.bundle),
            ("out", self.out),
            ("out_dir", self.out_dir),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        }
        if self.no_cnn_transfer {
            m.insert("transfer_cnn".into(), "false".into());
        }
        if self.no_lstm_transfer {
            m.insert("transfer_lstm_weights".into(), "false".into());
            m.insert("transfer_hidden".into(), "false".into());
        }
        if self.no_hidden_transfer {
            m.insert("transfer_hidden".into(), "false".into());
        }
        m
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, opts, experiment) = match cli.command {
        Command::GenData(o) => ("gen-data", o, None),
        Command::TrainPhase1(o) => ("train-phase1", o, None),
        Command::GenSalient(o) => ("gen-salient", o, None),
        Command::TrainPhase2(o) => ("train-phase2", o, None),
        Command::Eval(o) => ("eval", o, None),
        Command::Similarity(o) => ("similarity", o, None),
        Command::Experiment { name, opts } => ("experiment", opts, Some(name)),
    };
    let rc = match RunConfig::resolve(cli.config.as_deref(), std::env::vars(), opts.into_layer()) {
        Ok(rc) => rc,
        Err(e) => return usage_exit(&e),
    };
    let result = match name {
        "gen-data" => commands::gen_data(&rc),
        "train-phase1" => commands::train_phase1(&rc),
        "gen-salient" => commands::gen_salient(&rc),
        "train-phase2" => commands::train_phase2(&rc),
        "eval" => commands::eval(&rc),
        "similarity" => commands::similarity(&rc),
        _ => commands::experiment(&rc, experiment.as_deref().unwrap_or_default()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<UsageError>() {
            Some(u) => usage_exit(u),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn usage_exit(e: &UsageError) -> ExitCode {
    eprintln!("usage error: {e}");
    ExitCode::from(2)
}
