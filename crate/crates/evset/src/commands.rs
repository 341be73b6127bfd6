//! The subcommands behind the `evset` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use evset_core::eval::{self, GroundTruthEvent, PredictedEvent, THRESHOLDS};
use evset_core::gradcheck::GradCheckConfig;
use evset_core::graph::{Graph, Var};
use evset_core::model::Model;
use evset_core::synth::{self, SyntheticVideo};
use evset_core::{train, ParamStore};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{self, PredictionRecord};
use crate::report::{self, EvalSummary, GradCheckSummary, StatsSummary};
use crate::run::{self, RunDir, TrainSummary};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Worker threads for generation, inference and evaluation; 0 picks one per core.
    pub workers: usize,
    pub dump_attention: bool,
}

/// File, then `EVSET_*` variables, then command-line flags.
pub fn resolve_config(opts: &Options) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(d) = &opts.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))
}

fn run_dir(cfg: &RunConfig) -> Result<RunDir> {
    cfg.run_dir.clone().map(RunDir::new).ok_or_else(|| {
        CliError::Usage("a run directory is required (--run-dir or EVSET_RUN_DIR)".into())
    })
}

/// Per-video generation from `(seed, index)` substreams, so the worker
/// count never changes the output.
pub fn generate(
    cfg: &RunConfig,
    videos: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<SyntheticVideo>> {
    let sc = cfg.synth_config()?;
    sc.validate()?;
    let table = sc.archetype_table();
    let out: evset_core::Result<Vec<_>> = pool(workers)?.install(|| {
        (0..videos)
            .into_par_iter()
            .map(|i| synth::generate_video(&sc, &table, seed, i))
            .collect()
    });
    Ok(out?)
}

pub fn cmd_generate(opts: &Options, out: &Path, videos: Option<usize>) -> Result<usize> {
    let cfg = resolve_config(opts)?;
    let n = videos.unwrap_or(cfg.data.videos);
    let data = generate(&cfg, n, cfg.seed, opts.workers)?;
    formats::write_dataset(out, &data)?;
    log::info!("wrote {n} videos to {}", out.display());
    Ok(n)
}

pub fn cmd_stats(data: &Path, out: &Path) -> Result<StatsSummary> {
    let videos = formats::read_dataset(data)?;
    let stats = synth::dataset_statistics(&videos)?;
    let mut scatter = String::from("center,duration\n");
    for p in &stats.scatter {
        scatter += &format!("{},{}\n", p[0], p[1]);
    }
    let mut pairs = String::from("video,lc,similarity\n");
    for p in &stats.pairs {
        pairs += &format!("{},{},{}\n", videos[p.video].id, p.lc, p.similarity);
    }
    report::write_text(&out.join("scatter.csv"), &scatter)?;
    report::write_text(&out.join("lc_similarity.csv"), &pairs)?;
    let summary = StatsSummary::new(videos.len(), &stats);
    report::write_json(&out.join("stats.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_train(opts: &Options) -> Result<TrainSummary> {
    let cfg = resolve_config(opts)?;
    let dir = run_dir(&cfg)?;
    run::train_run(&cfg, &dir)
}

/// The run's own configuration; a `--config` that disagrees with it on the
/// model is a checkpoint mismatch.
fn run_config(opts: &Options) -> Result<(RunConfig, RunDir)> {
    let requested = resolve_config(opts)?;
    let dir = run_dir(&requested)?;
    let mut cfg = dir.load_config()?;
    if opts.config.is_some() && (requested.model != cfg.model || requested.ablation != cfg.ablation)
    {
        return Err(CliError::CheckpointMismatch(format!(
            "--config describes a different model than {}",
            dir.config_path().display()
        )));
    }
    cfg.run_dir = Some(dir.root.clone());
    if requested.data.eval.is_some() {
        cfg.data.eval = requested.data.eval.clone();
    }
    Ok((cfg, dir))
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<SyntheticVideo>> {
    match data {
        Some(p) => {
            let mut c = cfg.clone();
            c.data.eval = Some(p.to_path_buf());
            run::eval_videos(&c)
        }
        None => run::eval_videos(cfg),
    }
}

/// Ranked, captioned predictions for every video. `oracle_count` keeps
/// the ground-truth number of events instead of the counter's choice.
pub fn predict_all(
    model: &Model,
    store: &ParamStore,
    videos: &[SyntheticVideo],
    workers: usize,
    oracle_count: bool,
) -> Result<Vec<Vec<PredictedEvent>>> {
    let out: evset_core::Result<Vec<_>> = pool(workers)?.install(|| {
        videos
            .par_iter()
            .map(|v| {
                let count = oracle_count.then_some(v.events.len());
                model
                    .predict_with_count(store, &v.features, count)
                    .map(|p| p.events)
            })
            .collect()
    });
    Ok(out?)
}

pub fn evaluate(videos: &[SyntheticVideo], preds: &[Vec<PredictedEvent>]) -> eval::EvalReport {
    let per: Vec<_> = videos
        .iter()
        .zip(preds)
        .map(|(v, p)| {
            let gts: Vec<GroundTruthEvent<'_>> = v
                .events
                .iter()
                .map(|e| GroundTruthEvent {
                    interval: e.interval,
                    tokens: &e.tokens,
                })
                .collect();
            eval::evaluate_video(&v.id, p, &gts, &THRESHOLDS)
        })
        .collect();
    eval::summarize(per, &THRESHOLDS)
}

fn checkpoint_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Score an existing predictions file instead of running the model.
    pub predictions: Option<PathBuf>,
    /// Report path stem; defaults to `<run>/eval/<checkpoint>`.
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(opts: &Options, args: &EvalArgs) -> Result<EvalSummary> {
    let (summary, stem) = if let Some(pred_path) = &args.predictions {
        let cfg = resolve_config(opts)?;
        let videos = dataset(&cfg, args.data.as_deref())?;
        let records = formats::read_predictions(pred_path)?;
        let mut preds = Vec::with_capacity(videos.len());
        for v in &videos {
            let rec = records.iter().find(|r| r.id == v.id);
            let events = match rec {
                Some(r) => r.to_events().map_err(|msg| CliError::Format {
                    what: "predictions",
                    path: pred_path.clone(),
                    msg,
                })?,
                None => {
                    log::warn!("no predictions for video `{}`", v.id);
                    Vec::new()
                }
            };
            preds.push(events);
        }
        let r = evaluate(&videos, &preds);
        let stem = args
            .out
            .clone()
            .unwrap_or_else(|| pred_path.with_extension("eval"));
        (EvalSummary::new(&r, None), stem)
    } else {
        let (cfg, dir) = run_config(opts)?;
        let ckpt = match &args.checkpoint {
            Some(c) => c.clone(),
            None => dir.latest_checkpoint()?,
        };
        let loaded = run::load_checkpoint(&cfg, &ckpt)?;
        let videos = dataset(&cfg, args.data.as_deref())?;
        let preds = predict_all(
            &loaded.built.model,
            &loaded.built.store,
            &videos,
            opts.workers,
            false,
        )?;
        let r = evaluate(&videos, &preds);
        let name = checkpoint_name(&ckpt);
        let stem = args
            .out
            .clone()
            .unwrap_or_else(|| dir.root.join("eval").join(&name));
        (EvalSummary::new(&r, Some(name)), stem)
    };
    if summary.empty_predictions {
        log::warn!("some videos have no predictions; their precision counts as 0");
    }
    report::write_json(&stem.with_extension("json"), &summary)?;
    report::write_text(&stem.with_extension("csv"), &summary.to_csv())?;
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct InferArgs {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub oracle_count: bool,
}

pub fn cmd_infer(opts: &Options, args: &InferArgs) -> Result<PathBuf> {
    let (cfg, dir) = run_config(opts)?;
    let ckpt = match &args.checkpoint {
        Some(c) => c.clone(),
        None => dir.latest_checkpoint()?,
    };
    let loaded = run::load_checkpoint(&cfg, &ckpt)?;
    let videos = dataset(&cfg, args.data.as_deref())?;
    let (model, store) = (&loaded.built.model, &loaded.built.store);
    let preds = predict_all(model, store, &videos, opts.workers, args.oracle_count)?;
    let name = checkpoint_name(&ckpt);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| dir.root.join("predictions").join(format!("{name}.jsonl")));
    let records: Vec<_> = videos
        .iter()
        .zip(&preds)
        .map(|(v, p)| PredictionRecord::new(&v.id, p))
        .collect();
    formats::write_predictions(&out, &records)?;
    if opts.dump_attention {
        let dumps = videos
            .iter()
            .map(|v| attention_dump(model, store, v))
            .collect::<Result<Vec<_>>>()?;
        report::write_json(
            &dir.root
                .join("debug")
                .join(format!("attention-{name}.json")),
            &dumps,
        )?;
    }
    Ok(out)
}

/// Whole-pipeline finite-difference check at toy size with the
/// configuration's ablation switches.
pub fn cmd_gradcheck(opts: &Options) -> Result<GradCheckSummary> {
    let cfg = resolve_config(opts)?;
    let mut toy = train::toy_config();
    toy.ablation = cfg.model_config()?.ablation;
    let t0 = Instant::now();
    let r = train::pipeline_grad_check(cfg.seed, toy, GradCheckConfig::default())?;
    let summary = GradCheckSummary::new(&r, t0.elapsed().as_secs_f64());
    if let Some(d) = &cfg.run_dir {
        report::write_json(&d.join("gradcheck.json"), &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerDump {
    /// `[i][j][head]`, absent with the relation prior off.
    pub relation_mask: Option<Vec<Vec<Vec<f64>>>>,
    /// `[head][i][j]`.
    pub self_attention: Vec<Vec<Vec<f64>>>,
    /// `[query][head·scale·point]`.
    pub cross_attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionDump {
    pub id: String,
    /// Slot attention of every aggregation iteration, `[iter][slot][token]`.
    pub slot_attention: Vec<Vec<Vec<f64>>>,
    /// `[layer][query] = (center, duration)` after each decoder layer.
    pub anchors: Vec<Vec<[f64; 2]>>,
    pub layers: Vec<LayerDump>,
}

fn rows(g: &Graph<'_>, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn attention_dump(
    model: &Model,
    store: &ParamStore,
    video: &SyntheticVideo,
) -> Result<AttentionDump> {
    let mut g = Graph::inference(store);
    let fwd = model.forward(&mut g, &video.features)?;
    let n = model.cfg.queries;
    let layers = fwd
        .decoded
        .traces
        .iter()
        .map(|t| LayerDump {
            relation_mask: t.relation_mask.map(|m| {
                let flat = rows(&g, m);
                (0..n).map(|i| flat[i * n..(i + 1) * n].to_vec()).collect()
            }),
            self_attention: t.self_attention.iter().map(|&a| rows(&g, a)).collect(),
            cross_attention: rows(&g, t.cross_attention),
        })
        .collect();
    let anchors = fwd
        .decoded
        .states
        .iter()
        .map(|s| {
            rows(&g, s.anchors.decoded)
                .into_iter()
                .map(|r| [r[0], r[1]])
                .collect()
        })
        .collect();
    Ok(AttentionDump {
        id: video.id.clone(),
        slot_attention: fwd.queries.attention.iter().map(|&a| rows(&g, a)).collect(),
        anchors,
        layers,
    })
}
