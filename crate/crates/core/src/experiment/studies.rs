use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_sd, run_seeds, ExperimentError, ExperimentScale};
use crate::network::{HeadKind, NetworkConfig};
use crate::rng::derive_seed;
use crate::salient::{generate_salient_subset, CannyConfig, MapModel};
use crate::similarity::{
    dataset_fid, dataset_similarity, dataset_ssim, scenario_cosine_study, PairRow, SimilarityReport,
};
use crate::synthdata::{
    approach_scenarios, generate_dataset, generate_steering_dataset, town_a, town_b, town_c, uniform_noise, Dataset,
    DomainSpec,
};
use crate::table::{num, render};
use crate::transfer::{
    evaluate, harvest_bundle, init_phase2, train_phase1, train_phase2, LossKind, TrainConfig, TrainedModel,
    TransferBundle, TransferFlags,
};

const COLLISION_RATIO: f64 = 0.5;

/// Datasets shared by the classification studies. Source is town A, the
/// Phase-2 target is town B and the shifted test domain is town C, which
/// neither phase trains on.
pub struct Corpus {
    pub source: Dataset,
    pub target: Dataset,
    pub target_test: Dataset,
    pub shifted_test: Dataset,
    pub convergence_target: Dataset,
}

fn sized(spec: DomainSpec, scale: &ExperimentScale) -> DomainSpec {
    spec.with_size(scale.frame_height, scale.frame_width)
}

fn classification_set(
    spec: DomainSpec,
    n: usize,
    scale: &ExperimentScale,
    root: u64,
    label: &str,
) -> Result<Dataset, ExperimentError> {
    let seqs = generate_dataset(
        &sized(spec, scale),
        n,
        COLLISION_RATIO,
        scale.sequence_length,
        derive_seed(root, label),
    )?;
    Ok(Dataset::new(seqs))
}

impl Corpus {
    pub fn generate(scale: &ExperimentScale, root: u64) -> Result<Self, ExperimentError> {
        Ok(Corpus {
            source: classification_set(town_a(), scale.source_train, scale, root, "data/source")?,
            target: classification_set(town_b(), scale.target_train, scale, root, "data/target")?,
            target_test: classification_set(town_b(), scale.test, scale, root, "data/target-test")?,
            shifted_test: classification_set(town_c(), scale.test, scale, root, "data/shifted-test")?,
            convergence_target: classification_set(town_b(), scale.convergence_train, scale, root, "data/convergence")?,
        })
    }
}

/// A Phase-1 model and the seed it was trained with.
#[derive(Clone, Debug)]
pub struct Phase1Run {
    pub seed: u64,
    pub model: TrainedModel,
}

/// Corpus plus one Phase-1 model per seed, reusable across studies.
pub struct Shared {
    pub corpus: Corpus,
    pub phase1: Vec<Phase1Run>,
}

impl Shared {
    pub fn prepare(scale: &ExperimentScale, root: u64) -> Result<Self, ExperimentError> {
        scale.validate()?;
        let corpus = Corpus::generate(scale, root)?;
        let phase1 = phase1_runs(scale, &corpus.source, &run_seeds(root, scale.seeds))?;
        Ok(Shared { corpus, phase1 })
    }
}

fn tag<T>(seed: u64, r: Result<T, ExperimentError>) -> Result<T, ExperimentError> {
    r.map_err(|e| ExperimentError::Seed {
        seed,
        source: Box::new(e),
    })
}

/// Phase 1 on `source` for each seed, in parallel.
pub fn phase1_runs(
    scale: &ExperimentScale,
    source: &Dataset,
    seeds: &[u64],
) -> Result<Vec<Phase1Run>, ExperimentError> {
    let net = scale.network();
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = scale.train_config(scale.phase1_epochs, seed);
            tag(seed, train_phase1(source, &net, &cfg, None).map_err(Into::into)).map(|model| Phase1Run { seed, model })
        })
        .collect()
}

fn with_shared<T>(
    scale: &ExperimentScale,
    root: u64,
    shared: Option<&Shared>,
    f: impl FnOnce(&Shared) -> Result<T, ExperimentError>,
) -> Result<T, ExperimentError> {
    match shared {
        Some(s) => f(s),
        None => f(&Shared::prepare(scale, root)?),
    }
}

fn phase2_seed(seed: u64) -> u64 {
    derive_seed(seed, "phase2")
}

/// Phase-2 model for one flag set. With a positive ratio the maps come from
/// the Phase-1 model and the target model has 6 input channels.
#[allow(clippy::too_many_arguments)]
fn run_phase2(
    scale: &ExperimentScale,
    bundle: &TransferBundle,
    flags: TransferFlags,
    ratio: f64,
    map_model: &MapModel,
    target: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel, ExperimentError> {
    let mut bundle = bundle.clone();
    bundle.flags = flags;
    let mut net = scale.network();
    let data = if ratio > 0.0 {
        net = net.with_channels(6);
        let maps = generate_salient_subset(
            map_model,
            target,
            ratio,
            derive_seed(seed, "salient"),
            &CannyConfig::default(),
        )?;
        target.with_maps(maps)
    } else {
        target.with_maps(Default::default())
    };
    let init = init_phase2(&bundle, &net, cfg.seed)?;
    let cfg = TrainConfig {
        salient_subset_ratio: ratio,
        ..cfg.clone()
    };
    Ok(train_phase2(init, &data, &cfg, None)?)
}

const WEIGHTS_ONLY: TransferFlags = TransferFlags {
    transfer_cnn: true,
    transfer_lstm_weights: true,
    transfer_hidden: false,
};

// ---------------------------------------------------------------------------
// Transfer ordering

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub in_domain_per_seed: Vec<f64>,
    pub shifted_per_seed: Vec<f64>,
    pub in_domain_mean: f64,
    pub in_domain_sd: f64,
    pub shifted_mean: f64,
    pub shifted_sd: f64,
}

impl VariantRow {
    fn new(variant: &str, in_domain: Vec<f64>, shifted: Vec<f64>) -> Self {
        let (in_domain_mean, in_domain_sd) = mean_sd(&in_domain);
        let (shifted_mean, shifted_sd) = mean_sd(&shifted);
        VariantRow {
            variant: variant.to_string(),
            in_domain_per_seed: in_domain,
            shifted_per_seed: shifted,
            in_domain_mean,
            in_domain_sd,
            shifted_mean,
            shifted_sd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferOrderingReport {
    pub root_seed: u64,
    pub seeds: Vec<u64>,
    pub scale: ExperimentScale,
    pub source_domain: String,
    pub target_domain: String,
    pub shifted_domain: String,
    /// baseline, weights-only, full.
    pub rows: Vec<VariantRow>,
}

impl TransferOrderingReport {
    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.clone(),
                    format!("{} ± {}", num(r.in_domain_mean, 4), num(r.in_domain_sd, 4)),
                    format!("{} ± {}", num(r.shifted_mean, 4), num(r.shifted_sd, 4)),
                ]
            })
            .collect();
        format!(
            "test accuracy, {} seeds; source {}, target {}, shifted {}\n{}",
            self.seeds.len(),
            self.source_domain,
            self.target_domain,
            self.shifted_domain,
            render(&["variant", "in-domain", "shifted-domain"], &rows)
        )
    }
}

pub const BASELINE: &str = "baseline";
pub const WEIGHTS_ONLY_NAME: &str = "weights-only";
pub const FULL: &str = "full";

/// From-scratch baseline, weights-only transfer and the full method, each
/// trained on the target domain and tested in-domain and on the shifted
/// domain.
pub fn transfer_ordering(
    scale: &ExperimentScale,
    root: u64,
    shared: Option<&Shared>,
) -> Result<TransferOrderingReport, ExperimentError> {
    with_shared(scale, root, shared, |sh| {
        let c = &sh.corpus;
        let per_seed: Vec<[(f64, f64); 3]> = sh
            .phase1
            .par_iter()
            .map(|p1| tag(p1.seed, ordering_seed(scale, c, p1)))
            .collect::<Result<_, _>>()?;
        let col = |v: usize| -> (Vec<f64>, Vec<f64>) { per_seed.iter().map(|r| r[v]).unzip() };
        let rows = [BASELINE, WEIGHTS_ONLY_NAME, FULL]
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let (a, b) = col(i);
                VariantRow::new(name, a, b)
            })
            .collect();
        Ok(TransferOrderingReport {
            root_seed: root,
            seeds: sh.phase1.iter().map(|p| p.seed).collect(),
            scale: scale.clone(),
            source_domain: town_a().domain_id,
            target_domain: town_b().domain_id,
            shifted_domain: town_c().domain_id,
            rows,
        })
    })
}

fn accuracies(m: &TrainedModel, c: &Corpus) -> Result<(f64, f64), ExperimentError> {
    let a = evaluate(&m.params, &m.hidden, &c.target_test)?.primary();
    let b = evaluate(&m.params, &m.hidden, &c.shifted_test)?.primary();
    Ok((a, b))
}

fn ordering_seed(scale: &ExperimentScale, c: &Corpus, p1: &Phase1Run) -> Result<[(f64, f64); 3], ExperimentError> {
    let cfg = scale.train_config(scale.phase2_epochs, phase2_seed(p1.seed));
    let baseline = train_phase1(&c.target, &scale.network(), &cfg, None)?;
    let bundle = harvest_bundle(&p1.model.params, &c.source, TransferFlags::ALL)?;
    let map_model = MapModel::new(p1.model.params.clone(), p1.model.hidden.clone())?;
    let weights = run_phase2(scale, &bundle, WEIGHTS_ONLY, 0.0, &map_model, &c.target, &cfg, p1.seed)?;
    let full = run_phase2(
        scale,
        &bundle,
        TransferFlags::ALL,
        scale.salient_ratio,
        &map_model,
        &c.target,
        &cfg,
        p1.seed,
    )?;
    Ok([
        accuracies(&baseline, c)?,
        accuracies(&weights, c)?,
        accuracies(&full, c)?,
    ])
}

// ---------------------------------------------------------------------------
// Convergence

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub variant: String,
    /// First epoch reaching the threshold, `None` if never within the budget.
    pub epochs_per_seed: Vec<Option<usize>>,
    /// Mean with unreached runs counted as `max_epochs + 1`.
    pub mean_epochs: f64,
    /// Train accuracy after each epoch, per seed.
    pub curves: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub root_seed: u64,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub max_epochs: usize,
    pub target_sequences: usize,
    pub rows: Vec<ConvergenceRow>,
}

pub const NO_LSTM: &str = "~LSTM_transfer";
pub const NO_CNN: &str = "~CNN_transfer";
pub const NO_AUG: &str = "~data_aug";
pub const FROM_SCRATCH: &str = "from-scratch";

impl ConvergenceReport {
    pub fn row(&self, variant: &str) -> Option<&ConvergenceRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let per: Vec<String> = r
                    .epochs_per_seed
                    .iter()
                    .map(|e| e.map_or_else(|| ">".to_string() + &self.max_epochs.to_string(), |e| e.to_string()))
                    .collect();
                vec![r.variant.clone(), num(r.mean_epochs, 2), per.join(" ")]
            })
            .collect();
        format!(
            "epochs to {:.0}% train accuracy on {} target sequences, {} seeds\n{}",
            self.threshold * 100.0,
            self.target_sequences,
            self.seeds.len(),
            render(&["variant", "mean epochs", "per seed"], &rows)
        )
    }
}

/// Epochs to the train-accuracy threshold for the full method and its
/// ablations (plus training from scratch for reference).
pub fn convergence(
    scale: &ExperimentScale,
    root: u64,
    shared: Option<&Shared>,
) -> Result<ConvergenceReport, ExperimentError> {
    let variants: [(&str, TransferFlags, bool); 4] = [
        (FULL, TransferFlags::ALL, true),
        (
            NO_LSTM,
            TransferFlags {
                transfer_cnn: true,
                transfer_lstm_weights: false,
                transfer_hidden: false,
            },
            true,
        ),
        (
            NO_CNN,
            TransferFlags {
                transfer_cnn: false,
                ..TransferFlags::ALL
            },
            true,
        ),
        (NO_AUG, TransferFlags::ALL, false),
    ];
    with_shared(scale, root, shared, |sh| {
        let c = &sh.corpus;
        let per_seed: Vec<Vec<Vec<f64>>> = sh
            .phase1
            .par_iter()
            .map(|p1| {
                tag(
                    p1.seed,
                    (|| {
                        let cfg = TrainConfig {
                            stop_at_train_accuracy: Some(scale.convergence_threshold),
                            ..scale.train_config(scale.convergence_max_epochs, phase2_seed(p1.seed))
                        };
                        let bundle = harvest_bundle(&p1.model.params, &c.source, TransferFlags::ALL)?;
                        let map_model = MapModel::new(p1.model.params.clone(), p1.model.hidden.clone())?;
                        let mut curves = Vec::new();
                        for (_, flags, aug) in variants {
                            let ratio = if aug { scale.salient_ratio } else { 0.0 };
                            let m = run_phase2(
                                scale,
                                &bundle,
                                flags,
                                ratio,
                                &map_model,
                                &c.convergence_target,
                                &cfg,
                                p1.seed,
                            )?;
                            curves.push(m.history.records.iter().map(|r| r.train_metric).collect());
                        }
                        let scratch = train_phase1(&c.convergence_target, &scale.network(), &cfg, None)?;
                        curves.push(scratch.history.records.iter().map(|r| r.train_metric).collect());
                        Ok(curves)
                    })(),
                )
            })
            .collect::<Result<_, _>>()?;
        let names: Vec<&str> = variants.iter().map(|v| v.0).chain([FROM_SCRATCH]).collect();
        let rows = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let curves: Vec<Vec<f64>> = per_seed.iter().map(|s| s[i].clone()).collect();
                let epochs: Vec<Option<usize>> = curves
                    .iter()
                    .map(|c| c.iter().position(|&a| a >= scale.convergence_threshold).map(|p| p + 1))
                    .collect();
                let counted: Vec<f64> = epochs
                    .iter()
                    .map(|e| e.unwrap_or(scale.convergence_max_epochs + 1) as f64)
                    .collect();
                ConvergenceRow {
                    variant: name.to_string(),
                    epochs_per_seed: epochs,
                    mean_epochs: mean_sd(&counted).0,
                    curves,
                }
            })
            .collect();
        Ok(ConvergenceReport {
            root_seed: root,
            seeds: sh.phase1.iter().map(|p| p.seed).collect(),
            threshold: scale.convergence_threshold,
            max_epochs: scale.convergence_max_epochs,
            target_sequences: c.convergence_target.len(),
            rows,
        })
    })
}

// ---------------------------------------------------------------------------
// Similarity table

/// Cosine, FID and SSIM of town A against a resampled town A, towns B and C
/// and uniform noise (plus town B against town C), using the first seed's
/// Phase-1 model; and the hidden-state scenario study on the same model.
pub fn similarity_table(
    scale: &ExperimentScale,
    root: u64,
    shared: Option<&Shared>,
) -> Result<SimilarityReport, ExperimentError> {
    let owned;
    let (corpus, p1): (&Corpus, &Phase1Run) = match shared {
        Some(s) => (&s.corpus, &s.phase1[0]),
        None => {
            scale.validate()?;
            let corpus = Corpus::generate(scale, root)?;
            let p1 = phase1_runs(scale, &corpus.source, &run_seeds(root, 1))?.remove(0);
            owned = (corpus, p1);
            (&owned.0, &owned.1)
        }
    };
    let params = &p1.model.params;
    let seed = derive_seed(root, "similarity");
    let resampled = classification_set(town_a(), scale.test, scale, root, "data/source-resampled")?;
    let noise = classification_set(uniform_noise(), scale.test, scale, root, "data/noise")?;
    let a = town_a().domain_id;
    let pairs: Vec<(String, &Dataset, String, &Dataset)> = vec![
        (a.clone(), &corpus.source, format!("{a}-resampled"), &resampled),
        (a.clone(), &corpus.source, town_b().domain_id, &corpus.target_test),
        (a.clone(), &corpus.source, town_c().domain_id, &corpus.shifted_test),
        (a.clone(), &corpus.source, uniform_noise().domain_id, &noise),
        (
            town_b().domain_id,
            &corpus.target_test,
            town_c().domain_id,
            &corpus.shifted_test,
        ),
    ];
    let rows = pairs
        .into_iter()
        .map(|(ra, da, rb, db)| {
            let cos = dataset_similarity(params, da, db, scale.similarity_pairs, seed)?;
            let fid = dataset_fid(params, da, db, scale.fid_samples, seed)?;
            let (ssim_mean, ssim_sd) = dataset_ssim(da, db, scale.similarity_pairs, seed)?;
            Ok(PairRow {
                reference: ra,
                other: rb,
                mean_cosine: cos.mean,
                cosine_normalized_std: cos.normalized_std(),
                cosine_pairs: cos.pairs,
                skipped_zero_norm: cos.skipped,
                fid,
                ssim_mean,
                ssim_normalized_std: ssim_sd / ssim_mean,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let scenarios = approach_scenarios(
        &sized(town_a(), scale),
        scale.sequence_length,
        scale.scenario_probes,
        derive_seed(root, "scenarios"),
    )?;
    let scenarios = scenario_cosine_study(params, &p1.model.hidden, &scenarios)?;
    Ok(SimilarityReport {
        seed: root,
        n_pairs: scale.similarity_pairs,
        model_checksum: params.checksum(),
        pairs: rows,
        scenarios,
    })
}

// ---------------------------------------------------------------------------
// Steering

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringRow {
    pub model: String,
    pub in_domain_mae_per_seed: Vec<f64>,
    pub shifted_mae_per_seed: Vec<f64>,
    pub in_domain_mae: f64,
    pub in_domain_sd: f64,
    pub shifted_mae: f64,
    pub shifted_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub root_seed: u64,
    pub seeds: Vec<u64>,
    pub scale: ExperimentScale,
    /// from-scratch, transfer.
    pub rows: Vec<SteeringRow>,
}

pub const TRANSFER: &str = "transfer";

impl SteeringReport {
    pub fn row(&self, model: &str) -> Option<&SteeringRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    format!("{} ± {}", num(r.in_domain_mae, 3), num(r.in_domain_sd, 3)),
                    format!("{} ± {}", num(r.shifted_mae, 3), num(r.shifted_sd, 3)),
                ]
            })
            .collect();
        format!(
            "steering mean absolute error (degrees), {} seeds\n{}",
            self.seeds.len(),
            render(&["model", "in-domain", "shifted-domain"], &rows)
        )
    }
}

fn steering_set(
    spec: DomainSpec,
    n: usize,
    scale: &ExperimentScale,
    root: u64,
    label: &str,
) -> Result<Dataset, ExperimentError> {
    let seqs = generate_steering_dataset(&sized(spec, scale), n, scale.sequence_length, derive_seed(root, label))?;
    Ok(Dataset::new(seqs))
}

/// Steering regression: from scratch on town B against Phase 2 from a town-A
/// Phase-1 model (all transfer flags, no salient channels), tested on town B
/// and town C.
pub fn steering(scale: &ExperimentScale, root: u64) -> Result<SteeringReport, ExperimentError> {
    scale.validate()?;
    let source = steering_set(town_a(), scale.steering_train, scale, root, "steer/source")?;
    let target = steering_set(town_b(), scale.steering_train, scale, root, "steer/target")?;
    let target_test = steering_set(town_b(), scale.steering_test, scale, root, "steer/target-test")?;
    let shifted_test = steering_set(town_c(), scale.steering_test, scale, root, "steer/shifted-test")?;
    let net: NetworkConfig = scale.network().with_head(HeadKind::Regression);
    let seeds = run_seeds(root, scale.seeds);
    let per_seed: Vec<[(f64, f64); 2]> = seeds
        .par_iter()
        .map(|&seed| {
            tag(
                seed,
                (|| {
                    let mae = |m: &TrainedModel| -> Result<(f64, f64), ExperimentError> {
                        Ok((
                            evaluate(&m.params, &m.hidden, &target_test)?.primary(),
                            evaluate(&m.params, &m.hidden, &shifted_test)?.primary(),
                        ))
                    };
                    let regress = |epochs: usize, seed: u64| TrainConfig {
                        loss: LossKind::MeanSquared,
                        ..scale.train_config(epochs, seed)
                    };
                    let p1 = train_phase1(&source, &net, &regress(scale.steering_phase1_epochs, seed), None)?;
                    let cfg2 = regress(scale.steering_phase2_epochs, phase2_seed(seed));
                    let scratch = train_phase1(&target, &net, &cfg2, None)?;
                    let bundle = harvest_bundle(&p1.params, &source, TransferFlags::ALL)?;
                    let init = init_phase2(&bundle, &net, cfg2.seed)?;
                    let cfg2 = TrainConfig {
                        salient_subset_ratio: 0.0,
                        ..cfg2
                    };
                    let transfer = train_phase2(init, &target, &cfg2, None)?;
                    Ok([mae(&scratch)?, mae(&transfer)?])
                })(),
            )
        })
        .collect::<Result<_, _>>()?;
    let rows = [FROM_SCRATCH, TRANSFER]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (a, b): (Vec<f64>, Vec<f64>) = per_seed.iter().map(|r| r[i]).unzip();
            let (ma, sa) = mean_sd(&a);
            let (mb, sb) = mean_sd(&b);
            SteeringRow {
                model: name.to_string(),
                in_domain_mae_per_seed: a,
                shifted_mae_per_seed: b,
                in_domain_mae: ma,
                in_domain_sd: sa,
                shifted_mae: mb,
                shifted_sd: sb,
            }
        })
        .collect();
    Ok(SteeringReport {
        root_seed: root,
        seeds,
        scale: scale.clone(),
        rows,
    })
}
