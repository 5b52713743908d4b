use serde::{Deserialize, Serialize};

use crate::table::{num, render};

/// Similarity of one dataset to the reference dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub reference: String,
    pub other: String,
    pub mean_cosine: f64,
    /// `σ / μ` of the per-pair cosines.
    pub cosine_normalized_std: f64,
    pub cosine_pairs: usize,
    pub skipped_zero_norm: usize,
    pub fid: f64,
    pub ssim_mean: f64,
    pub ssim_normalized_std: f64,
}

/// One severity level of the hidden-state scenario study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: String,
    /// Growth of the obstacle's projected height over the sequence.
    pub height_change: f64,
    pub probes: usize,
    pub mean_cosine: f64,
    pub cosine_normalized_std: f64,
    pub mean_collision_confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub seed: u64,
    pub n_pairs: usize,
    pub model_checksum: String,
    pub pairs: Vec<PairRow>,
    pub scenarios: Vec<ScenarioRow>,
}

impl SimilarityReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if !self.pairs.is_empty() {
            let rows: Vec<Vec<String>> = self
                .pairs
                .iter()
                .map(|r| {
                    vec![
                        format!("{} vs {}", r.reference, r.other),
                        num(r.mean_cosine, 4),
                        num(r.cosine_normalized_std, 3),
                        num(r.fid, 3),
                        num(r.ssim_mean, 4),
                        num(r.ssim_normalized_std, 3),
                        format!("{}", r.cosine_pairs),
                        format!("{}", r.skipped_zero_norm),
                    ]
                })
                .collect();
            out.push_str(&render(
                &[
                    "datasets",
                    "cosine",
                    "cos σ/μ",
                    "FID",
                    "SSIM",
                    "SSIM σ/μ",
                    "pairs",
                    "skipped",
                ],
                &rows,
            ));
        }
        if !self.scenarios.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let rows: Vec<Vec<String>> = self
                .scenarios
                .iter()
                .map(|r| {
                    vec![
                        r.scenario.clone(),
                        num(r.height_change, 2),
                        format!("{}", r.probes),
                        num(r.mean_cosine, 4),
                        num(r.cosine_normalized_std, 3),
                        num(r.mean_collision_confidence, 4),
                    ]
                })
                .collect();
            out.push_str(&render(
                &["scenario", "Δheight", "probes", "cosine", "cos σ/μ", "P(collision)"],
                &rows,
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
