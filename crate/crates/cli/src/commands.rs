use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use sttl_core::container::sha256_hex;
use sttl_core::experiment::{run_many, ExperimentKind};
use sttl_core::network::{load_checkpoint, save_checkpoint, HeadKind, HiddenState, NetworkConfig, Target};
use sttl_core::salient::{generate_salient_subset, CannyConfig, MapModel};
use sttl_core::similarity::{dataset_fid, dataset_similarity, dataset_ssim, PairRow, SimilarityReport};
use sttl_core::synthdata::{generate_dataset, generate_steering_dataset, load_dataset, save_dataset, Dataset};
use sttl_core::transfer::{
    evaluate, harvest_bundle, init_phase2, load_bundle, save_bundle, train_phase1 as phase1, train_phase2 as phase2,
    LossKind, TrainConfig,
};

use crate::config::{RunConfig, Task, UsageError};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `<output>.manifest.json`: command, version, seed, resolved
/// settings, input and output digests and a timestamp.
fn write_manifest(command: &str, rc: &RunConfig, inputs: &[&Path], output: &Path, extra: Value) -> Result<()> {
    let mut ins = serde_json::Map::new();
    for p in inputs {
        ins.insert(p.display().to_string(), json!(file_digest(p)?));
    }
    let out_digest = if output.is_file() {
        Some(file_digest(output)?)
    } else {
        None
    };
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let m = json!({
        "command": command,
        "version": VERSION,
        "seed": rc.seed,
        "settings": rc.settings.map(),
        "settings_digest": rc.settings.digest(),
        "inputs": ins,
        "output": output.display().to_string(),
        "output_sha256": out_digest,
        "created_unix": created,
        "details": extra,
    });
    let path = manifest_path(output);
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn head_of(data: &Dataset) -> Result<HeadKind> {
    match data.sequences.first().map(|s| &s.target) {
        Some(Target::Class(_)) => Ok(HeadKind::Classification),
        Some(Target::Steering(_)) => Ok(HeadKind::Regression),
        None => bail!("dataset is empty"),
    }
}

fn loss_for(head: HeadKind) -> LossKind {
    match head {
        HeadKind::Classification => LossKind::CrossEntropy,
        HeadKind::Regression => LossKind::MeanSquared,
    }
}

/// Network for training on `data`: frame geometry from the data, checked
/// against explicit settings.
fn network_for(rc: &RunConfig, data: &Dataset) -> Result<NetworkConfig> {
    let first = data.sequences.first().context("dataset is empty")?;
    let f = &first.frames;
    let net = NetworkConfig::toy(f.h, f.w, f.t).with_head(head_of(data)?);
    rc.check_geometry(&net)?;
    Ok(net)
}

pub fn gen_data(rc: &RunConfig) -> Result<()> {
    let out = rc.require(&rc.out, "out")?;
    let seqs = match rc.task {
        Task::Classification => generate_dataset(&rc.domain, rc.n, rc.collision_ratio, rc.sequence_length, rc.seed)?,
        Task::Steering => generate_steering_dataset(&rc.domain, rc.n, rc.sequence_length, rc.seed)?,
    };
    let ds = Dataset::new(seqs);
    save_dataset(&ds, out)?;
    println!(
        "wrote {} sequences of {} to {}",
        ds.len(),
        rc.domain.domain_id,
        out.display()
    );
    write_manifest(
        "gen-data",
        rc,
        &[],
        out,
        json!({ "sequences": ds.len(), "domain": rc.domain.domain_id }),
    )
}

fn train_config(rc: &RunConfig, head: HeadKind) -> TrainConfig {
    TrainConfig {
        loss: loss_for(head),
        ..rc.train.clone()
    }
}

pub fn train_phase1(rc: &RunConfig) -> Result<()> {
    let data_path = rc.require(&rc.data, "data")?;
    let out = rc.require(&rc.out, "out")?;
    let data = load(data_path)?;
    let net = network_for(rc, &data)?;
    let validation = rc.validation.as_deref().map(load).transpose()?;
    let cfg = TrainConfig {
        salient_subset_ratio: 0.0,
        ..train_config(rc, net.head)
    };
    let model = phase1(&data, &net, &cfg, validation.as_ref())?;
    print_history(&model.history.records);
    save_checkpoint(&model.params, Some(&model.hidden), out)?;
    let mut inputs = vec![data_path];
    inputs.extend(rc.validation.as_deref());
    if let Some(bundle_path) = &rc.bundle {
        let bundle = harvest_bundle(&model.params, &data, rc.flags)?;
        save_bundle(&bundle, bundle_path)?;
        println!("wrote bundle {}", bundle_path.display());
        write_manifest(
            "train-phase1",
            rc,
            &inputs,
            bundle_path,
            json!({ "checkpoint": out.display().to_string() }),
        )?;
    }
    println!("wrote checkpoint {}", out.display());
    write_manifest(
        "train-phase1",
        rc,
        &inputs,
        out,
        json!({
            "network_digest": model.params.config.digest(),
            "param_checksum": model.params.checksum(),
            "history": model.history.records,
        }),
    )
}

fn print_history(records: &[sttl_core::transfer::EpochRecord]) {
    for r in records {
        let val = r
            .validation_metric
            .map(|v| format!("  validation {v:.4}"))
            .unwrap_or_default();
        println!(
            "epoch {:>3}  loss {:.5}  train {:.4}{val}",
            r.epoch, r.train_loss, r.train_metric
        );
    }
}

pub fn gen_salient(rc: &RunConfig) -> Result<()> {
    let ckpt = rc.require(&rc.checkpoint, "checkpoint")?;
    let data_path = rc.require(&rc.data, "data")?;
    let out = rc.require(&rc.out, "out")?;
    let model = MapModel::from_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    rc.check_geometry(&model.params.config)?;
    let data = load(data_path)?;
    let ratio = rc.train.salient_subset_ratio;
    let maps = generate_salient_subset(&model, &data, ratio, rc.seed, &CannyConfig::default())?;
    let covered = maps.len();
    let ds = data.with_maps(maps);
    save_dataset(&ds, out)?;
    println!(
        "attached maps to {covered} of {} sequences; wrote {}",
        ds.len(),
        out.display()
    );
    write_manifest(
        "gen-salient",
        rc,
        &[ckpt, data_path],
        out,
        json!({ "ratio": ratio, "covered": covered, "model_checksum": model.params.checksum() }),
    )
}

pub fn train_phase2(rc: &RunConfig) -> Result<()> {
    let bundle_path = rc.require(&rc.bundle, "bundle")?;
    let data_path = rc.require(&rc.data, "data")?;
    let out = rc.require(&rc.out, "out")?;
    let mut bundle = load_bundle(bundle_path).with_context(|| format!("loading bundle {}", bundle_path.display()))?;
    bundle.flags = rc.flags;
    let mut data = load(data_path)?;
    // Without an explicit ratio the dataset decides: the fraction carrying
    // maps. An explicit 0 drops any attached maps.
    let ratio = if rc.settings.is_set("salient_ratio") {
        rc.train.salient_subset_ratio
    } else {
        covering_ratio(data.maps.len(), data.len())
    };
    if ratio == 0.0 {
        data = data.with_maps(Default::default());
    }
    let channels = if ratio > 0.0 { 6 } else { 3 };
    let net = bundle.source_config.clone().with_channels(channels);
    rc.check_geometry(&net)?;
    if head_of(&data)? != net.head {
        bail!("dataset targets do not fit the bundle's {} head", net.head.as_str());
    }
    let init = init_phase2(&bundle, &net, rc.seed)?;
    for w in &init.warnings {
        eprintln!("warning: {w}");
    }
    let validation = rc.validation.as_deref().map(load).transpose()?;
    let cfg = TrainConfig {
        salient_subset_ratio: ratio,
        ..train_config(rc, net.head)
    };
    let model = phase2(init, &data, &cfg, validation.as_ref())?;
    print_history(&model.history.records);
    save_checkpoint(&model.params, Some(&model.hidden), out)?;
    println!("wrote checkpoint {}", out.display());
    let mut inputs = vec![bundle_path, data_path];
    inputs.extend(rc.validation.as_deref());
    write_manifest(
        "train-phase2",
        rc,
        &inputs,
        out,
        json!({
            "flags": {
                "transfer_cnn": rc.flags.transfer_cnn,
                "transfer_lstm_weights": rc.flags.transfer_lstm_weights,
                "transfer_hidden": rc.flags.transfer_hidden,
            },
            "salient_ratio": ratio,
            "network_digest": model.params.config.digest(),
            "param_checksum": model.params.checksum(),
            "history": model.history.records,
        }),
    )
}

/// Smallest ratio whose floored share of `n` is `k`.
fn covering_ratio(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut r = k as f64 / n as f64;
    while ((r * n as f64).floor() as usize) < k {
        r = r.next_up();
    }
    r
}

fn load_model(rc: &RunConfig, path: &Path) -> Result<(sttl_core::network::Parameters, HiddenState)> {
    let (params, hidden) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    rc.check_geometry(&params.config)?;
    let hidden = hidden.unwrap_or_else(|| HiddenState::zeros(params.config.lstm_layers, params.config.lstm_hidden));
    Ok((params, hidden))
}

pub fn eval(rc: &RunConfig) -> Result<()> {
    let ckpt = rc.require(&rc.checkpoint, "checkpoint")?;
    let data_path = rc.require(&rc.data, "data")?;
    let (params, hidden) = load_model(rc, ckpt)?;
    let data = load(data_path)?;
    let m = evaluate(&params, &hidden, &data)?;
    println!("sequences  {}", m.count);
    println!("loss       {:.6}", m.loss);
    if let Some(a) = m.accuracy {
        println!("accuracy   {a:.6}");
    }
    if let Some(c) = m.confusion {
        println!(
            "confusion  truth safe:      predicted safe {:>6}  collision {:>6}",
            c[0][0], c[0][1]
        );
        println!(
            "           truth collision: predicted safe {:>6}  collision {:>6}",
            c[1][0], c[1][1]
        );
    }
    if let Some(e) = m.mae_deg {
        println!("mae (deg)  {e:.6}");
    }
    if let Some(out) = &rc.out {
        fs::write(out, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
        write_manifest(
            "eval",
            rc,
            &[ckpt, data_path],
            out,
            json!({ "param_checksum": params.checksum() }),
        )?;
    }
    Ok(())
}

pub fn similarity(rc: &RunConfig) -> Result<()> {
    let ckpt = rc.require(&rc.checkpoint, "checkpoint")?;
    let a_path = rc.require(&rc.data, "data")?;
    let b_path = rc.require(&rc.data_b, "data_b")?;
    let (params, _) = load_model(rc, ckpt)?;
    let (a, b) = (load(a_path)?, load(b_path)?);
    let name = |d: &Dataset, p: &Path| {
        d.sequences
            .first()
            .map(|s| s.domain_id.clone())
            .unwrap_or_else(|| p.display().to_string())
    };
    let cos = dataset_similarity(&params, &a, &b, rc.pairs, rc.seed)?;
    if cos.skipped > 0 {
        eprintln!("warning: skipped {} zero-norm pairs", cos.skipped);
    }
    let fid = dataset_fid(&params, &a, &b, rc.fid_samples, rc.seed)?;
    let (ssim_mean, ssim_sd) = dataset_ssim(&a, &b, rc.pairs, rc.seed)?;
    let report = SimilarityReport {
        seed: rc.seed,
        n_pairs: rc.pairs,
        model_checksum: params.checksum(),
        pairs: vec![PairRow {
            reference: name(&a, a_path),
            other: name(&b, b_path),
            mean_cosine: cos.mean,
            cosine_normalized_std: cos.normalized_std(),
            cosine_pairs: cos.pairs,
            skipped_zero_norm: cos.skipped,
            fid,
            ssim_mean,
            ssim_normalized_std: ssim_sd / ssim_mean,
        }],
        scenarios: Vec::new(),
    };
    print!("{}", report.to_table());
    if let Some(out) = &rc.out {
        fs::write(out, report.to_json() + "\n").with_context(|| format!("writing {}", out.display()))?;
        write_manifest("similarity", rc, &[ckpt, a_path, b_path], out, Value::Null)?;
    }
    Ok(())
}

pub fn experiment(rc: &RunConfig, name: &str) -> Result<()> {
    let dir = rc.require(&rc.out_dir, "out_dir")?;
    let kinds: Vec<ExperimentKind> = if name == "all" {
        ExperimentKind::ALL.to_vec()
    } else {
        vec![ExperimentKind::parse(name).map_err(|e| UsageError(e.to_string()))?]
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let reports = run_many(&kinds, &rc.scale, rc.seed)?;
    for (kind, report) in kinds.iter().zip(&reports) {
        let table = report.to_table();
        print!("{table}");
        let base = dir.join(kind.as_str());
        let json_path = base.with_extension("json");
        fs::write(base.with_extension("txt"), &table)?;
        fs::write(&json_path, report.to_json() + "\n")?;
        write_manifest(
            "experiment",
            rc,
            &[],
            &json_path,
            json!({ "experiment": kind.as_str(), "scale": rc.scale }),
        )?;
        if kinds.len() > 1 {
            println!();
        }
    }
    Ok(())
}
