//! One line per acceptance criterion. Runs as a plain binary so the lines
//! show up under `cargo test` without `--nocapture`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use evset::commands::{self, EvalArgs, Options};
use evset::config::RunConfig;
use evset::formats::{self, PredictionRecord};
use evset::run::{self, Progress, RunDir};
use evset_core::eval::PredictedEvent;
use evset_core::geometry::{self, RelationMetric, TemporalInterval};
use evset_core::graph::Graph;
use evset_core::matching;
use evset_core::model::{Ablation, Model, ModelConfig};
use evset_core::params::ParamStore;
use evset_core::rng::{self, seeded};
use evset_core::tensor::Tensor;
use rand::Rng;

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const HUNGARIAN_TRIALS: usize = 1000;
const HUNGARIAN_MAX: usize = 7;
const OVERFIT_VIDEOS: usize = 8;
const OVERFIT_QUERIES: usize = 10;
const OVERFIT_DIM: usize = 64;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_LR: f64 = 5e-5;
const OVERFIT_TAU: f64 = 0.9;
const OVERFIT_F1: f64 = 0.90;
const OVERFIT_CAPTION_ACC: f64 = 0.95;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const LOSS_WINDOW: usize = 5;
const ABLATION_VIDEOS: usize = 200;
const ABLATION_SEEDS: u64 = 5;
const ABLATION_AGREE: usize = 4;
const METRIC_AGREE: usize = 3;
const ZERO_MASK_TOL: f64 = 1e-6;
const ZERO_MASK_INPUTS: u64 = 100;
const STATS_VIDEOS: usize = 500;
const STATS_MIN_R: f64 = 0.2;
const CSV_TOL: f64 = 1e-6;

/// Budget shared by every ablation arm.
fn ablation_budget() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.dim = 32;
    c.train.lr = 5e-4;
    c.train.epochs = 4;
    c.data.videos = ABLATION_VIDEOS;
    c.data.eval_videos = 50;
    c
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let s = match commands::cmd_gradcheck(&Options::default()) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let took = t0.elapsed();
    let toy = evset_core::train::toy_config();
    let toy_ok = (toy.frames, toy.dim, toy.queries, toy.heads, toy.vocab)
        == (16, 8, 4, 2, 16)
        && toy.encoder_layers == 1
        && toy.decoder_layers == 1;
    outcome(
        s.passed && s.max_rel_err <= GRADCHECK_TOL && took < GRADCHECK_BUDGET && toy_ok,
        format!(
            "max rel err {:.2e} over {} entries ({} retried), {:.1?}",
            s.max_rel_err, s.entries, s.retried, took
        ),
    )
}

/// Minimum over every injective assignment, enumerated along the shorter
/// side and summed in (row, col) order like `assignment_cost`.
fn exhaustive(cost: &Tensor) -> f64 {
    fn go(
        cost: &Tensor,
        transposed: bool,
        depth: usize,
        used: &mut [bool],
        acc: &mut Vec<(usize, usize)>,
        best: &mut f64,
    ) {
        let short = cost.rows().min(cost.cols());
        if depth == short {
            let mut pairs = acc.clone();
            pairs.sort();
            *best = best.min(pairs.iter().map(|&(i, j)| cost.get(i, j)).sum());
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                acc.push(if transposed { (k, depth) } else { (depth, k) });
                go(cost, transposed, depth + 1, used, acc, best);
                acc.pop();
                used[k] = false;
            }
        }
    }
    let transposed = cost.rows() > cost.cols();
    let long = cost.rows().max(cost.cols());
    let mut best = f64::INFINITY;
    go(cost, transposed, 0, &mut vec![false; long], &mut Vec::new(), &mut best);
    best
}

fn matching_oracle() -> Outcome {
    let mut r = seeded(0xacce);
    let mut worst = 0.0f64;
    for trial in 0..HUNGARIAN_TRIALS {
        let n = r.random_range(1..=HUNGARIAN_MAX);
        let g = r.random_range(1..=HUNGARIAN_MAX);
        let data = if trial % 2 == 0 {
            (0..n * g).map(|_| r.random_range(0..10) as f64).collect()
        } else {
            (0..n * g).map(|_| r.random_range(-5.0..5.0)).collect()
        };
        let cost = Tensor::matrix(n, g, data).unwrap();
        let pairs = match matching::hungarian(&cost) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("trial {trial}: {e}")),
        };
        if pairs.len() != n.min(g) {
            return outcome(false, format!("trial {trial}: {} pairs for {n}x{g}", pairs.len()));
        }
        let diff = (matching::assignment_cost(&cost, &pairs) - exhaustive(&cost)).abs();
        worst = worst.max(diff);
    }
    outcome(
        worst == 0.0,
        format!("{HUNGARIAN_TRIALS} trials up to {HUNGARIAN_MAX}x{HUNGARIAN_MAX}, worst gap {worst:e}"),
    )
}

fn spot_checks() -> Outcome {
    let a = TemporalInterval::new(0.25, 0.5).unwrap();
    let b = TemporalInterval::new(0.75, 0.5).unwrap();
    let rel = geometry::relation_vector(&a, &b);
    let lc = geometry::location_correlation(&a, &b).unwrap();
    let same = geometry::giou_1d(&a, &a);
    outcome(
        rel == (0.0, 0.0) && lc == 1.0 && same == 1.0,
        format!("relation {rel:?}, LC touching {lc}, gIoU self {same}"),
    )
}

fn overfit() -> Outcome {
    let mut c = RunConfig::default();
    c.model.dim = OVERFIT_DIM;
    c.model.queries = OVERFIT_QUERIES;
    c.train.lr = OVERFIT_LR;
    c.train.epochs = OVERFIT_MAX_STEPS / OVERFIT_VIDEOS;
    c.data.videos = OVERFIT_VIDEOS;
    c.data.mix = "mixed".into();
    let t0 = Instant::now();
    let videos = run::training_videos(&c).unwrap();
    let mut losses = Vec::new();
    let built = run::fit(&c, &videos, |p| {
        if let Progress::Step(rec) = p {
            losses.push(rec.report.total);
        }
        Ok(())
    })
    .unwrap();
    let preds = commands::predict_all(&built.model, &built.store, &videos, 1, false).unwrap();
    let rep = commands::evaluate(&videos, &preds);
    let at = rep
        .thresholds
        .iter()
        .find(|t| t.tau == OVERFIT_TAU)
        .expect("threshold is evaluated");
    let f1 = evset_core::eval::harmonic(at.precision, at.recall);

    let (mut correct, mut total) = (0, 0);
    for v in &videos {
        let mut g = Graph::inference(&built.store);
        let fwd = built.model.forward(&mut g, &v.features).unwrap();
        let out = built.model.loss(&mut g, &fwd, &v.events).unwrap();
        correct += out.caption_accuracy.0;
        total += out.caption_accuracy.1;
    }
    let acc = correct as f64 / total.max(1) as f64;
    let took = t0.elapsed();

    // one mean per pass over the data, smoothed over LOSS_WINDOW passes
    let means: Vec<f64> = losses
        .chunks(OVERFIT_VIDEOS)
        .map(|e| e.iter().sum::<f64>() / e.len() as f64)
        .collect();
    let smooth: Vec<f64> = means
        .windows(LOSS_WINDOW)
        .map(|w| w.iter().sum::<f64>() / LOSS_WINDOW as f64)
        .collect();
    let rises = smooth.windows(2).filter(|w| w[1] > w[0]).count();
    println!(
        "    loss {:.3} -> {:.3}, smoothed epoch loss rose {rises} of {} times",
        means[0],
        means[means.len() - 1],
        smooth.len().saturating_sub(1)
    );
    outcome(
        losses.len() <= OVERFIT_MAX_STEPS
            && f1 >= OVERFIT_F1
            && acc >= OVERFIT_CAPTION_ACC
            && took < OVERFIT_BUDGET
            && rises == 0,
        format!(
            "{} steps, F1@{OVERFIT_TAU} {f1:.3} (need {OVERFIT_F1}), caption acc {acc:.3} (need {OVERFIT_CAPTION_ACC}), {took:.0?}",
            losses.len()
        ),
    )
}

struct Arm {
    f1: f64,
    bleu4: f64,
}

fn train_arm(seed: u64, position: bool, relation: bool, metric: &str) -> Arm {
    let mut c = ablation_budget();
    c.seed = seed;
    c.ablation.position_prior = position;
    c.ablation.relation_prior = relation;
    c.ablation.metric = metric.into();
    let train = run::training_videos(&c).unwrap();
    let held_out = run::eval_videos(&c).unwrap();
    let built = run::fit(&c, &train, |_| Ok(())).unwrap();
    let preds = commands::predict_all(&built.model, &built.store, &held_out, 1, false).unwrap();
    let rep = commands::evaluate(&held_out, &preds);
    Arm {
        f1: rep.f1,
        bleu4: rep.bleu4,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Ablations {
    base: Vec<Arm>,
    no_position: Vec<Arm>,
    no_relation: Vec<Arm>,
    center: Vec<Arm>,
}

fn run_ablations() -> Ablations {
    let mut a = Ablations {
        base: Vec::new(),
        no_position: Vec::new(),
        no_relation: Vec::new(),
        center: Vec::new(),
    };
    for seed in 0..ABLATION_SEEDS {
        a.base.push(train_arm(seed, true, true, "overlap"));
        a.no_position.push(train_arm(seed, false, true, "overlap"));
        a.no_relation.push(train_arm(seed, true, false, "overlap"));
        a.center.push(train_arm(seed, true, true, "center"));
        let last = |v: &Vec<Arm>| (v[v.len() - 1].f1, v[v.len() - 1].bleu4);
        println!(
            "    seed {seed}: full {:.3?} | P off {:.3?} | R off {:.3?} | center {:.3?}  (F1, B4)",
            last(&a.base),
            last(&a.no_position),
            last(&a.no_relation),
            last(&a.center)
        );
    }
    a
}

/// Median gap and the number of seeds where `on >= off`.
fn compare(on: &[Arm], off: &[Arm], key: fn(&Arm) -> f64) -> (f64, usize) {
    let gap = median(on.iter().map(key).collect()) - median(off.iter().map(key).collect());
    let agree = on.iter().zip(off).filter(|(a, b)| key(a) >= key(b)).count();
    (gap, agree)
}

fn ablation_direction(a: &Ablations) -> Outcome {
    let (p_gap, p_agree) = compare(&a.base, &a.no_position, |r| r.f1);
    let (r_gap, r_agree) = compare(&a.base, &a.no_relation, |r| r.bleu4);
    outcome(
        p_gap >= 0.0 && r_gap >= 0.0 && p_agree >= ABLATION_AGREE && r_agree >= ABLATION_AGREE,
        format!(
            "position prior: median F1 gap {p_gap:+.3}, {p_agree}/{ABLATION_SEEDS} seeds; relation prior: median B4 gap {r_gap:+.3}, {r_agree}/{ABLATION_SEEDS} seeds"
        ),
    )
}

fn metric_comparison(a: &Ablations) -> Outcome {
    let (gap, agree) = compare(&a.base, &a.center, |r| r.f1);
    outcome(
        agree >= METRIC_AGREE,
        format!("overlap vs center: median F1 gap {gap:+.3}, {agree}/{ABLATION_SEEDS} seeds"),
    )
}

fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = seeded(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng::normal(&mut r, 0.0, 0.1);
        }
    }
}

fn zero_mask_reduction() -> Outcome {
    let flags = |relation_prior| Ablation {
        position_prior: true,
        relation_prior,
        metric: RelationMetric::Overlap,
    };
    let config = |relation| {
        let mut c = ModelConfig::with_dim(16);
        c.frames = 16;
        c.scales = 2;
        c.queries = 6;
        c.encoder_layers = 1;
        c.decoder_layers = 2;
        c.heads = 2;
        c.points = 2;
        c.vocab = 16;
        c.ablation = flags(relation);
        c
    };
    let anchors: Vec<[f64; 2]> = (0..6).map(|i| [0.1 + 0.15 * i as f64, 0.08 + 0.04 * i as f64]).collect();
    let build = |relation| {
        let mut store = ParamStore::new();
        let m = Model::new(&mut store, config(relation), Some(&anchors), &mut seeded(3)).unwrap();
        (m, store)
    };
    let (with, mut with_store) = build(true);
    jitter(&mut with_store, 4);
    for layer in &with.decoder.layers {
        let rel = layer.relation.as_ref().expect("relation prior is on");
        for id in rel.output_params() {
            with_store.value_mut(id).data_mut().fill(0.0);
        }
    }
    let (without, mut without_store) = build(false);
    let names: Vec<String> = without_store.names().map(str::to_owned).collect();
    for n in &names {
        let v = with_store.value(with_store.id(n).unwrap()).clone();
        without_store.assign(n, v).unwrap();
    }

    let mut worst = 0.0f64;
    for input in 0..ZERO_MASK_INPUTS {
        let mut r = seeded(1000 + input);
        let frames = Tensor::matrix(16, 16, (0..256).map(|_| rng::normal(&mut r, 0.0, 1.0)).collect()).unwrap();
        let mut g1 = Graph::inference(&with_store);
        let mut g2 = Graph::inference(&without_store);
        let a = with.forward(&mut g1, &frames).unwrap();
        let b = without.forward(&mut g2, &frames).unwrap();
        for (sa, sb) in a.decoded.states.iter().zip(&b.decoded.states) {
            for (x, y) in [
                (sa.embeddings, sb.embeddings),
                (sa.anchors.decoded, sb.anchors.decoded),
            ] {
                for (p, q) in g1.value(x).data().iter().zip(g2.value(y).data()) {
                    worst = worst.max((p - q).abs());
                }
            }
        }
    }
    outcome(
        worst <= ZERO_MASK_TOL,
        format!("{ZERO_MASK_INPUTS} inputs, max elementwise gap {worst:.1e}"),
    )
}

fn statistics(tmp: &Path) -> Outcome {
    let data = tmp.join("stats.jsonl");
    let opts = Options::default();
    let cfg = commands::resolve_config(&opts).unwrap();
    if !cfg.data.co_occurrence {
        return outcome(false, "co-occurrence is off by default");
    }
    commands::cmd_generate(&opts, &data, Some(STATS_VIDEOS)).unwrap();
    let s = commands::cmd_stats(&data, &tmp.join("stats")).unwrap();
    let r = s.lc_similarity_r.unwrap_or(f64::NAN);
    outcome(
        s.videos == STATS_VIDEOS && r > STATS_MIN_R,
        format!("LC/similarity r = {r:.3} over {} videos, {} pairs", s.videos, s.pairs),
    )
}

fn determinism(tmp: &Path) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 17;
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.scales = 2;
    cfg.model.queries = 5;
    cfg.data.videos = 6;
    cfg.train.epochs = 2;
    let cfg_path = tmp.join("det.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let train = |name: &str| {
        let dir = tmp.join(name);
        let opts = Options {
            config: Some(cfg_path.clone()),
            run_dir: Some(dir.clone()),
            ..Options::default()
        };
        let s = commands::cmd_train(&opts).unwrap();
        let params = evset::checkpoint::read_params(&s.final_checkpoint).unwrap();
        let log = std::fs::read_to_string(RunDir::new(&dir).log_path()).unwrap();
        (params, log)
    };
    let (p1, l1) = train("det-a");
    let (p2, l2) = train("det-b");
    let rows = |s: &str| -> Vec<Vec<f64>> {
        s.lines()
            .skip(1)
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect()
    };
    let (r1, r2) = (rows(&l1), rows(&l2));
    let mut worst = if r1.len() == r2.len() { 0.0f64 } else { f64::INFINITY };
    for (a, b) in r1.iter().zip(&r2) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(
        p1 == p2 && worst <= CSV_TOL,
        format!(
            "checkpoints {} ({} bytes), {} log rows, max gap {worst:e}",
            if p1 == p2 { "identical" } else { "differ" },
            p1.len(),
            r1.len()
        ),
    )
}

fn evaluation_self_test(tmp: &Path) -> Outcome {
    let data = tmp.join("selftest.jsonl");
    let preds = tmp.join("selftest-preds.jsonl");
    let opts = Options::default();
    commands::cmd_generate(&opts, &data, Some(50)).unwrap();
    let videos = formats::read_dataset(&data).unwrap();
    let records: Vec<_> = videos
        .iter()
        .map(|v| {
            let events: Vec<PredictedEvent> = v
                .events
                .iter()
                .map(|e| PredictedEvent {
                    interval: e.interval,
                    confidence: 1.0,
                    tokens: e.tokens.clone(),
                })
                .collect();
            PredictionRecord::new(&v.id, &events)
        })
        .collect();
    formats::write_predictions(&preds, &records).unwrap();
    let s = commands::cmd_eval(
        &opts,
        &EvalArgs {
            data: Some(data),
            predictions: Some(preds),
            out: Some(tmp.join("selftest-eval")),
            ..EvalArgs::default()
        },
    )
    .unwrap();
    let all_ones = s.thresholds.len() == 4
        && s.thresholds.iter().all(|t| t.precision == 1.0 && t.recall == 1.0);
    outcome(
        all_ones && s.f1 == 1.0 && s.bleu4 == 1.0,
        format!(
            "thresholds {:?}, P {} R {} F1 {} BLEU4 {}",
            s.thresholds.iter().map(|t| t.tau).collect::<Vec<_>>(),
            s.precision,
            s.recall,
            s.f1,
            s.bleu4
        ),
    )
}

fn main() -> ExitCode {
    // the libtest harness flags do not apply here
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let tmp = tempfile::tempdir().unwrap();
    let mut failed = 0;
    let mut report = |id: &str, name: &str, hard: bool, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        let verdict = match (o.pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS (recorded)",
        };
        println!("{id} {name}: {verdict} | {} [{:.1?}]", o.detail, t0.elapsed());
        if !o.pass && hard {
            failed += 1;
        }
    };
    report("C1", "gradient integrity", true, &mut gradient_integrity);
    report("C2", "matching oracle", true, &mut matching_oracle);
    report("C3", "interval spot checks", true, &mut spot_checks);
    report("C4", "overfit", true, &mut overfit);
    let ablations = run_ablations();
    report("C5", "ablation direction", true, &mut || ablation_direction(&ablations));
    report("C6", "relation metric", false, &mut || metric_comparison(&ablations));
    report("C7", "zero-mask reduction", true, &mut zero_mask_reduction);
    report("C8", "statistics", true, &mut || statistics(tmp.path()));
    report("C9", "determinism", true, &mut || determinism(tmp.path()));
    report("C10", "evaluation self-test", true, &mut || evaluation_self_test(tmp.path()));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
