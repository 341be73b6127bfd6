//! Run directories and the training loop.
//!
//! ```text
//! <run>/config.toml
//! <run>/train_log.csv
//! <run>/checkpoints/epoch-NNNN/{params.bin, manifest.json, vocab.json}
//! <run>/eval/  <run>/predictions/  <run>/debug/
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use evset_core::model::Model;
use evset_core::optim::Adam;
use evset_core::synth::{self, SyntheticVideo, Vocabulary, VOCAB_SIZE};
use evset_core::train::{self, StepRecord, Trainer};
use evset_core::{rng, ParamStore};

use crate::checkpoint::{self, CentroidCache, Manifest};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats;

pub const LOG_HEADER: &str = "step,l_cls,l_loc,l_cnt,l_cap,l_prop,total";

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn checkpoint_dir(&self, epoch: usize) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("epoch-{epoch:04}"))
    }

    /// Highest-numbered checkpoint.
    pub fn latest_checkpoint(&self) -> Result<PathBuf> {
        let dir = self.root.join("checkpoints");
        let entries = std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut best: Option<(usize, PathBuf)> = None;
        for e in entries {
            let e = e.map_err(|err| CliError::io(&dir, err))?;
            let name = e.file_name();
            let Some(n) = name.to_str().and_then(|s| s.strip_prefix("epoch-")) else {
                continue;
            };
            if let Ok(n) = n.parse::<usize>() {
                if best.as_ref().is_none_or(|b| n > b.0) {
                    best = Some((n, e.path()));
                }
            }
        }
        best.map(|b| b.1)
            .ok_or_else(|| CliError::MissingFile(dir.join("epoch-*")))
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config_path())
    }

    /// A run directory is written once; a second training run into it is refused.
    fn claim(&self, cfg: &RunConfig) -> Result<()> {
        if self.log_path().exists() || self.root.join("checkpoints").exists() {
            return Err(CliError::Usage(format!(
                "{} already holds a training run",
                self.root.display()
            )));
        }
        std::fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))?;
        let p = self.config_path();
        std::fs::write(&p, cfg.to_toml()).map_err(|e| CliError::io(&p, e))
    }
}

/// Training set from the configured file, or generated from the seed.
pub fn training_videos(cfg: &RunConfig) -> Result<Vec<SyntheticVideo>> {
    let videos = match &cfg.data.train {
        Some(p) => formats::read_dataset(p)?,
        None => synth::generate_dataset(&cfg.synth_config()?, cfg.data.videos, cfg.seed)?,
    };
    check_videos(cfg, &videos)?;
    Ok(videos)
}

/// Evaluation set from the configured file, or a generated split on a
/// seed distinct from training.
pub fn eval_videos(cfg: &RunConfig) -> Result<Vec<SyntheticVideo>> {
    let videos = match &cfg.data.eval {
        Some(p) => formats::read_dataset(p)?,
        None => synth::generate_dataset(
            &cfg.synth_config()?,
            cfg.data.eval_videos,
            eval_seed(cfg.seed),
        )?,
    };
    check_videos(cfg, &videos)?;
    Ok(videos)
}

pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0xe7a1_5eed
}

fn check_videos(cfg: &RunConfig, videos: &[SyntheticVideo]) -> Result<()> {
    if videos.is_empty() {
        return Err(CliError::Config("the dataset holds no videos".into()));
    }
    for v in videos {
        if v.features.cols() != cfg.model.dim {
            return Err(CliError::Config(format!(
                "video `{}` has {}-wide features, the model expects {}",
                v.id,
                v.features.cols(),
                cfg.model.dim
            )));
        }
        if let Some(t) = v
            .events
            .iter()
            .flat_map(|e| &e.tokens)
            .find(|&&t| t as usize >= cfg.model.vocab)
        {
            return Err(CliError::Config(format!(
                "video `{}` uses token {t} outside the {}-word vocabulary",
                v.id, cfg.model.vocab
            )));
        }
    }
    Ok(())
}

pub fn vocabulary(cfg: &RunConfig) -> Result<Vocabulary> {
    let v = match &cfg.data.vocab {
        Some(p) => formats::read_vocab(p)?,
        None if cfg.model.vocab == VOCAB_SIZE => Vocabulary::synthetic(),
        None => {
            let mut words = Vocabulary::synthetic().words().to_vec();
            words.resize_with(cfg.model.vocab.max(4), String::new);
            for (i, w) in words.iter_mut().enumerate() {
                if w.is_empty() {
                    *w = format!("<tok{i}>");
                }
            }
            Vocabulary::from_words(words)?
        }
    };
    if v.len() != cfg.model.vocab {
        return Err(CliError::Config(format!(
            "vocabulary has {} words, model.vocab is {}",
            v.len(),
            cfg.model.vocab
        )));
    }
    Ok(v)
}

/// A model built from a configuration, with its parameters.
pub struct Built {
    pub model: Model,
    pub store: ParamStore,
    pub centroids: Option<CentroidCache>,
}

pub fn build_model(cfg: &RunConfig, centroids: Option<CentroidCache>) -> Result<Built> {
    let mc = cfg.model_config()?;
    let mut store = ParamStore::new();
    let mut r = rng::substream(cfg.seed, 1);
    let pts = centroids.as_ref().map(CentroidCache::points);
    let model = Model::new(&mut store, mc, pts.as_deref(), &mut r)?;
    Ok(Built {
        model,
        store,
        centroids,
    })
}

pub fn fit_centroid_cache(
    cfg: &RunConfig,
    videos: &[SyntheticVideo],
) -> Result<Option<CentroidCache>> {
    if !cfg.ablation.position_prior {
        return Ok(None);
    }
    let m = train::fit_centroids(videos, cfg.model.queries, cfg.seed)?;
    if m.padded > 0 {
        log::warn!(
            "only {} distinct event positions for {} queries; {} centroids are jittered duplicates",
            cfg.model.queries - m.padded,
            cfg.model.queries,
            m.padded
        );
    }
    Ok(Some(CentroidCache {
        k: cfg.model.queries,
        seed: cfg.seed,
        centroids: m.centroids,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_checkpoint: PathBuf,
    /// Mean total loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

fn log_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| CliError::io(path, e))
}

pub enum Progress<'a> {
    Step(&'a StepRecord),
    /// After each epoch, numbered from 1.
    Epoch {
        epoch: usize,
        built: &'a Built,
        steps: usize,
    },
}

/// Trains a fresh model on `videos`, reporting every step and epoch.
pub fn fit(
    cfg: &RunConfig,
    videos: &[SyntheticVideo],
    mut progress: impl FnMut(Progress<'_>) -> Result<()>,
) -> Result<Built> {
    let centroids = fit_centroid_cache(cfg, videos)?;
    let mut built = build_model(cfg, centroids)?;
    let mut adam = Adam::new(&built.store, cfg.adam());
    let mut steps = 0;
    let mut warned: BTreeSet<usize> = BTreeSet::new();
    for epoch in 0..cfg.train.epochs {
        for i in train::epoch_order(cfg.seed, epoch, videos.len()) {
            let rec = {
                let mut trainer = Trainer::resume(&built.model, &mut adam, steps);
                trainer.step(&mut built.store, &videos[i])?
            };
            steps = rec.step;
            if rec.count_clamped && warned.insert(i) {
                log::warn!(
                    "video `{}` has {} events; the counter target is clamped to {}",
                    videos[i].id,
                    videos[i].events.len(),
                    cfg.model.max_count
                );
            }
            progress(Progress::Step(&rec))?;
        }
        progress(Progress::Epoch {
            epoch: epoch + 1,
            built: &built,
            steps,
        })?;
    }
    Ok(built)
}

/// The end-to-end loop: one video per step, a checkpoint per epoch.
pub fn train_run(cfg: &RunConfig, dir: &RunDir) -> Result<TrainSummary> {
    cfg.validate()?;
    let videos = training_videos(cfg)?;
    let vocab = vocabulary(cfg)?;
    dir.claim(cfg)?;
    log::info!(
        "training on {} videos for {} epochs",
        videos.len(),
        cfg.train.epochs
    );

    let log_path = dir.log_path();
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    log_line(&mut log, &log_path, LOG_HEADER)?;
    let mut epoch_loss = Vec::with_capacity(cfg.train.epochs);
    let mut sum = 0.0;
    let mut last = dir.checkpoint_dir(0);
    let mut total_steps = 0;
    let n = videos.len() as f64;
    fit(cfg, &videos, |p| match p {
        Progress::Step(rec) => {
            let r = rec.report;
            sum += r.total;
            log_line(
                &mut log,
                &log_path,
                &format!(
                    "{},{},{},{},{},{},{}",
                    rec.step, r.cls, r.loc, r.cnt, r.cap, r.prop, r.total
                ),
            )
        }
        Progress::Epoch {
            epoch,
            built,
            steps,
        } => {
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            epoch_loss.push(sum / n);
            log::info!("epoch {epoch}: mean loss {:.4}", sum / n);
            sum = 0.0;
            total_steps = steps;
            last = dir.checkpoint_dir(epoch);
            let manifest = Manifest {
                format: String::from_utf8_lossy(checkpoint::MAGIC).into_owned(),
                epoch,
                step: steps,
                seed: cfg.seed,
                params: built.store.len(),
                scalars: built.store.num_scalars(),
                model: cfg.model.clone(),
                ablation: cfg.ablation.clone(),
                centroids: built.centroids.clone(),
            };
            checkpoint::write(&last, &built.store, &manifest)?;
            formats::write_vocab(&last.join("vocab.json"), &vocab)
        }
    })?;
    Ok(TrainSummary {
        steps: total_steps,
        epochs: cfg.train.epochs,
        final_checkpoint: last,
        epoch_loss,
    })
}

/// A trained model restored from a checkpoint directory.
pub struct Loaded {
    pub built: Built,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
}

/// Restores the model of `ckpt`. `cfg` must describe the same model.
pub fn load_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<Loaded> {
    let manifest = checkpoint::read_manifest(ckpt)?;
    if manifest.model != cfg.model || manifest.ablation != cfg.ablation {
        return Err(CliError::CheckpointMismatch(format!(
            "{} was trained with different model or ablation settings",
            ckpt.display()
        )));
    }
    if cfg.ablation.position_prior && manifest.centroids.is_none() {
        return Err(CliError::CheckpointMismatch(
            "position prior is on but the manifest has no centroid cache".into(),
        ));
    }
    let mut cfg = cfg.clone();
    cfg.seed = manifest.seed;
    let mut built = build_model(&cfg, manifest.centroids.clone())?;
    let bytes = checkpoint::read_params(ckpt)?;
    checkpoint::load_into(&mut built.store, &bytes)?;
    let vocab_path = ckpt.join("vocab.json");
    let vocab = formats::read_vocab(&vocab_path)?;
    if vocab.len() != cfg.model.vocab {
        return Err(CliError::CheckpointMismatch(format!(
            "vocabulary has {} words, model.vocab is {}",
            vocab.len(),
            cfg.model.vocab
        )));
    }
    Ok(Loaded {
        built,
        manifest,
        vocab,
    })
}
