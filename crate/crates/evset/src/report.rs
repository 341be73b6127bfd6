//! Serializable evaluation, statistics and gradient-check reports.

use std::path::Path;

use evset_core::eval::EvalReport;
use evset_core::gradcheck::GradCheckReport;
use evset_core::synth::DatasetStatistics;
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoRow {
    pub id: String,
    pub predictions: usize,
    pub ground_truth: usize,
    pub matched: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub bleu4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub checkpoint: Option<String>,
    pub videos: usize,
    pub thresholds: Vec<ThresholdRow>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bleu4: f64,
    pub matched_pairs: usize,
    /// Some video had no predictions and its precision was taken as 0.
    pub empty_predictions: bool,
    pub per_video: Vec<VideoRow>,
}

impl EvalSummary {
    pub fn new(r: &EvalReport, checkpoint: Option<String>) -> Self {
        EvalSummary {
            checkpoint,
            videos: r.per_video.len(),
            thresholds: r
                .thresholds
                .iter()
                .map(|t| ThresholdRow {
                    tau: t.tau,
                    precision: t.precision,
                    recall: t.recall,
                })
                .collect(),
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            bleu4: r.bleu4,
            matched_pairs: r.matched_pairs,
            empty_predictions: r.empty_predictions,
            per_video: r
                .per_video
                .iter()
                .map(|v| VideoRow {
                    id: v.id.clone(),
                    predictions: v.predictions,
                    ground_truth: v.ground_truth,
                    matched: v.thresholds.iter().map(|t| t.matched).collect(),
                    precision: v.thresholds.iter().map(|t| t.precision).collect(),
                    recall: v.thresholds.iter().map(|t| t.recall).collect(),
                    bleu4: (!v.bleu.is_empty())
                        .then(|| v.bleu.iter().sum::<f64>() / v.bleu.len() as f64),
                })
                .collect(),
        }
    }

    /// `threshold,precision,recall,f1,bleu4`, one row per threshold, then the averages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f1,bleu4\n");
        for t in &self.thresholds {
            let f1 = evset_core::eval::harmonic(t.precision, t.recall);
            s += &format!("{},{},{},{},\n", t.tau, t.precision, t.recall, f1);
        }
        s += &format!(
            "mean,{},{},{},{}\n",
            self.precision, self.recall, self.f1, self.bleu4
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsSummary {
    pub videos: usize,
    pub events: usize,
    pub pairs: usize,
    pub lc_similarity_r: Option<f64>,
    pub duration_centrality_r: Option<f64>,
}

impl StatsSummary {
    pub fn new(videos: usize, s: &DatasetStatistics) -> Self {
        StatsSummary {
            videos,
            events: s.scatter.len(),
            pairs: s.pairs.len(),
            lc_similarity_r: s.lc_similarity_r,
            duration_centrality_r: s.duration_centrality_r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub retried: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub passed: bool,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub entries: usize,
    pub retried: usize,
    pub seconds: f64,
    pub params: Vec<GradCheckRow>,
}

impl GradCheckSummary {
    pub fn new(r: &GradCheckReport, seconds: f64) -> Self {
        GradCheckSummary {
            passed: r.passed,
            max_rel_err: r.max_rel_err,
            tolerance: r.tolerance,
            entries: r.entries_checked(),
            retried: r.entries_retried(),
            seconds,
            params: r
                .params
                .iter()
                .map(|p| GradCheckRow {
                    name: p.name.clone(),
                    entries: p.entries,
                    max_rel_err: p.max_rel_err,
                    max_abs_err: p.max_abs_err,
                    retried: p.retried,
                })
                .collect(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
