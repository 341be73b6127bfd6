//! Run configuration: one TOML file with `[model]`, `[train]`, `[data]`
//! and `[ablation]` sections. See `docs/config.md` for the schema.

use std::path::{Path, PathBuf};

use evset_core::geometry::RelationMetric;
use evset_core::matching::{FocalParams, LossWeights};
use evset_core::model::{Ablation, ModelConfig};
use evset_core::optim::AdamConfig;
use evset_core::synth::{CaptionGrammar, RegimeMix, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub ablation: AblationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub frames: usize,
    pub scales: usize,
    pub queries: usize,
    pub slot_iterations: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    /// Defaults to twice `dim`.
    pub ffn_dim: Option<usize>,
    pub relation_dim: usize,
    pub max_count: usize,
    pub vocab: usize,
    pub max_caption_len: usize,
    /// Defaults to half of `dim`.
    pub caption_hidden: Option<usize>,
    pub window_sigma: f64,
    pub positional: bool,
    pub deep_supervision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub clip_norm: Option<f64>,
    pub lambda_loc: f64,
    pub lambda_cnt: f64,
    pub lambda_cap: f64,
    pub lambda_prop: f64,
    pub match_giou: f64,
    pub match_cls: f64,
    pub focal_alpha: Option<f64>,
    pub focal_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training set; generated from the settings below when absent.
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Token map for external captions; the synthetic grammar's otherwise.
    pub vocab: Option<PathBuf>,
    pub videos: usize,
    pub eval_videos: usize,
    pub frames: usize,
    pub noise: f64,
    pub mix: String,
    pub co_occurrence: bool,
    pub max_events: usize,
    pub archetypes: usize,
    pub world_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub position_prior: bool,
    pub relation_prior: bool,
    /// `overlap` or `center`.
    pub metric: String,
}


impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            dim: m.dim,
            frames: m.frames,
            scales: m.scales,
            queries: m.queries,
            slot_iterations: m.slot_iterations,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            heads: m.heads,
            points: m.points,
            ffn_dim: None,
            relation_dim: m.relation_dim,
            max_count: m.max_count,
            vocab: m.vocab,
            max_caption_len: m.max_caption_len,
            caption_hidden: None,
            window_sigma: m.window_sigma,
            positional: m.positional,
            deep_supervision: m.deep_supervision,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let f = FocalParams::default();
        let m = ModelConfig::default();
        TrainSection {
            lr: AdamConfig::default().lr,
            epochs: 30,
            clip_norm: None,
            lambda_loc: w.loc,
            lambda_cnt: w.cnt,
            lambda_cap: w.cap,
            lambda_prop: w.prop,
            match_giou: m.match_giou,
            match_cls: m.match_cls,
            focal_alpha: f.alpha,
            focal_gamma: f.gamma,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        DataSection {
            train: None,
            eval: None,
            vocab: None,
            videos: 200,
            eval_videos: 50,
            frames: s.frames,
            noise: s.noise,
            mix: s.mix.as_str().into(),
            co_occurrence: s.grammar.co_occurrence,
            max_events: s.max_events,
            archetypes: s.grammar.archetypes,
            world_seed: s.world_seed,
        }
    }
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            position_prior: true,
            relation_prior: true,
            metric: "overlap".into(),
        }
    }
}

/// Environment variables that may override the file. Only paths and the
/// seed are overridable.
pub const ENV_SEED: &str = "EVSET_SEED";
pub const ENV_RUN_DIR: &str = "EVSET_RUN_DIR";
pub const ENV_TRAIN_DATA: &str = "EVSET_TRAIN_DATA";
pub const ENV_EVAL_DATA: &str = "EVSET_EVAL_DATA";

fn parse_metric(s: &str) -> Result<RelationMetric> {
    match s {
        "overlap" => Ok(RelationMetric::Overlap),
        "center" => Ok(RelationMetric::Center),
        other => Err(CliError::Config(format!(
            "ablation.metric must be `overlap` or `center`, got `{other}`"
        ))),
    }
}

pub fn metric_name(m: RelationMetric) -> &'static str {
    match m {
        RelationMetric::Overlap => "overlap",
        RelationMetric::Center => "center",
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `EVSET_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = var(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{ENV_SEED}=`{s}` is not an integer")))?;
        }
        if let Some(p) = var(ENV_RUN_DIR) {
            self.run_dir = Some(p.into());
        }
        if let Some(p) = var(ENV_TRAIN_DATA) {
            self.data.train = Some(p.into());
        }
        if let Some(p) = var(ENV_EVAL_DATA) {
            self.data.eval = Some(p.into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let t = &self.train;
        let mut c = ModelConfig::with_dim(m.dim);
        c.frames = m.frames;
        c.scales = m.scales;
        c.queries = m.queries;
        c.slot_iterations = m.slot_iterations;
        c.encoder_layers = m.encoder_layers;
        c.decoder_layers = m.decoder_layers;
        c.heads = m.heads;
        c.points = m.points;
        c.ffn_dim = m.ffn_dim.unwrap_or(2 * m.dim);
        c.relation_dim = m.relation_dim;
        c.max_count = m.max_count;
        c.vocab = m.vocab;
        c.max_caption_len = m.max_caption_len;
        c.caption_hidden = m.caption_hidden.unwrap_or(m.dim / 2);
        c.window_sigma = m.window_sigma;
        c.positional = m.positional;
        c.deep_supervision = m.deep_supervision;
        c.weights = LossWeights {
            loc: t.lambda_loc,
            cnt: t.lambda_cnt,
            cap: t.lambda_cap,
            prop: t.lambda_prop,
        };
        c.focal = FocalParams {
            alpha: t.focal_alpha,
            gamma: t.focal_gamma,
        };
        c.match_giou = t.match_giou;
        c.match_cls = t.match_cls;
        c.ablation = Ablation {
            position_prior: self.ablation.position_prior,
            relation_prior: self.ablation.relation_prior,
            metric: parse_metric(&self.ablation.metric)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let d = &self.data;
        let mix = RegimeMix::parse(&d.mix).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(SynthConfig {
            frames: d.frames,
            dim: self.model.dim,
            noise: d.noise,
            max_events: d.max_events,
            mix,
            grammar: CaptionGrammar {
                archetypes: d.archetypes,
                co_occurrence: d.co_occurrence,
            },
            world_seed: d.world_seed,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            clip_norm: self.train.clip_norm,
            ..AdamConfig::default()
        }
    }

    /// Checks every section before anything runs.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.synth_config()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CliError::Config(format!(
                "train.lr must be positive, got {}",
                t.lr
            )));
        }
        if t.epochs == 0 {
            return Err(CliError::Config("train.epochs must be at least 1".into()));
        }
        let weights = [
            t.lambda_loc,
            t.lambda_cnt,
            t.lambda_cap,
            t.lambda_prop,
            t.match_giou,
            t.match_cls,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CliError::Config(
                "loss and matching weights must be finite and non-negative".into(),
            ));
        }
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(CliError::Config("train.clip_norm must be positive".into()));
            }
        }
        if self.data.videos == 0 {
            return Err(CliError::Config("data.videos must be at least 1".into()));
        }
        Ok(())
    }
}
