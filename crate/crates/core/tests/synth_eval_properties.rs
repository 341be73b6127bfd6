use evset_core::eval::{self, GroundTruthEvent, PredictedEvent, THRESHOLDS};
use evset_core::geometry::{self, TemporalInterval};
use evset_core::rng::seeded;
use evset_core::synth::{self, CaptionGrammar, Regime, RegimeMix, SynthConfig, SyntheticVideo};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn config(mix: RegimeMix, co_occurrence: bool) -> SynthConfig {
    let mut c = SynthConfig {
        mix,
        ..SynthConfig::default()
    };
    c.grammar.co_occurrence = co_occurrence;
    c
}

fn beta(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    (a.end().min(b.end()) - a.start().max(b.start())).abs()
}

#[test]
fn generated_videos_respect_their_regime() {
    let data = synth::generate_dataset(&config(RegimeMix::Mixed, true), 300, 5).unwrap();
    let (mut seq, mut hier) = (0, 0);
    for v in &data {
        assert!(!v.events.is_empty());
        assert_eq!(v.features.shape(), &[64, 64]);
        for e in &v.events {
            let iv = e.interval;
            assert!(iv.duration > 0.0 && iv.start() >= 0.0 && iv.end() <= 1.0);
            assert!((4..=8).contains(&e.tokens.len()));
        }
        let ivs = v.intervals();
        match v.regime.unwrap() {
            Regime::Sequential => {
                seq += 1;
                assert!((4..=8).contains(&ivs.len()));
                for w in ivs.windows(2) {
                    assert!(w[0].end() <= w[1].start(), "{}: overlap", v.id);
                    assert_eq!(beta(&w[0], &w[1]), 0.0, "{}: gap", v.id);
                }
            }
            Regime::Hierarchical => {
                hier += 1;
                let nested = (0..ivs.len()).any(|i| {
                    (0..ivs.len()).any(|j| i != j && ivs[i].contains(&ivs[j]))
                });
                assert!(nested, "{}: no inclusion pair", v.id);
            }
        }
    }
    assert!(seq > 100 && hier > 100, "{seq} sequential, {hier} hierarchical");
}

#[test]
fn co_occurring_partners_share_a_content_token() {
    let data = synth::generate_dataset(&config(RegimeMix::Mixed, true), 200, 6).unwrap();
    let content = |t: &u32| *t >= CaptionGrammar::subject(0);
    for v in &data {
        for e in &v.events {
            if let Some(p) = e.partner {
                let shared = e
                    .tokens
                    .iter()
                    .filter(|t| content(t))
                    .any(|t| v.events[p].tokens.contains(t));
                assert!(shared, "{}", v.id);
            }
        }
    }
}

#[test]
fn infeasible_generation_is_rejected() {
    let mut c = SynthConfig::default();
    c.frames = 8;
    assert!(synth::generate_dataset(&c, 1, 0).is_err());
    c = SynthConfig::default();
    c.max_events = 3;
    assert!(synth::generate_dataset(&c, 1, 0).is_err());
}

/// Label of a frame: the archetype of the tightest event covering it.
fn frame_labels(v: &SyntheticVideo) -> Vec<Option<usize>> {
    let n = v.features.rows();
    (0..n)
        .map(|t| {
            let pos = (t as f64 + 0.5) / n as f64;
            v.events
                .iter()
                .filter(|e| e.interval.start() <= pos && pos < e.interval.end())
                .min_by(|a, b| a.interval.duration.total_cmp(&b.interval.duration))
                .and_then(|e| e.archetype)
        })
        .collect()
}

/// Nearest class mean under the dot-product rule, a linear classifier.
#[test]
fn linear_probe_recovers_archetypes() {
    let cfg = config(RegimeMix::Mixed, true);
    let k = cfg.grammar.archetypes;
    let train = synth::generate_dataset(&cfg, 100, 11).unwrap();
    let test = synth::generate_dataset(&cfg, 50, 12).unwrap();
    let d = cfg.dim;
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for v in &train {
        for (t, label) in frame_labels(v).into_iter().enumerate() {
            if let Some(a) = label {
                counts[a] += 1;
                for (m, x) in means[a].iter_mut().zip(v.features.row(t)) {
                    *m += x;
                }
            }
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|x| *x /= c.max(1) as f64);
    }
    let bias: Vec<f64> = means
        .iter()
        .map(|m| -0.5 * m.iter().map(|x| x * x).sum::<f64>())
        .collect();
    let (mut right, mut total) = (0, 0);
    for v in &test {
        for (t, label) in frame_labels(v).into_iter().enumerate() {
            let Some(a) = label else { continue };
            let x = v.features.row(t);
            let best = (0..k)
                .max_by(|&i, &j| {
                    let si: f64 = means[i].iter().zip(x).map(|(m, x)| m * x).sum::<f64>() + bias[i];
                    let sj: f64 = means[j].iter().zip(x).map(|(m, x)| m * x).sum::<f64>() + bias[j];
                    si.total_cmp(&sj)
                })
                .unwrap();
            total += 1;
            right += usize::from(best == a);
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.95, "probe accuracy {acc}");
}

#[test]
fn statistics_track_the_co_occurrence_rule() {
    let on = synth::generate_dataset(&config(RegimeMix::Mixed, true), 500, 21).unwrap();
    let off = synth::generate_dataset(&config(RegimeMix::Mixed, false), 500, 21).unwrap();
    let s_on = synth::dataset_statistics(&on).unwrap();
    let s_off = synth::dataset_statistics(&off).unwrap();
    let r_on = s_on.lc_similarity_r.unwrap();
    let r_off = s_off.lc_similarity_r.unwrap();
    assert!(r_on > 0.2, "r with the rule {r_on}");
    assert!(r_off.abs() < 0.1, "r without the rule {r_off}");
    let centrality = s_on.duration_centrality_r.unwrap();
    assert!(centrality < 0.0, "corr(d, |c - 0.5|) = {centrality}");
    assert!(s_on.pairs.iter().all(|p| p.lc > 0.0 && p.lc <= 2.0));
}

fn as_predictions(v: &SyntheticVideo) -> Vec<PredictedEvent> {
    v.events
        .iter()
        .map(|e| PredictedEvent {
            interval: e.interval,
            confidence: 1.0,
            tokens: e.tokens.clone(),
        })
        .collect()
}

fn gts(v: &SyntheticVideo) -> Vec<GroundTruthEvent<'_>> {
    v.events
        .iter()
        .map(|e| GroundTruthEvent {
            interval: e.interval,
            tokens: &e.tokens,
        })
        .collect()
}

#[test]
fn ground_truth_scores_perfectly() {
    let data = synth::generate_dataset(&SynthConfig::default(), 50, 3).unwrap();
    let per: Vec<_> = data
        .iter()
        .map(|v| eval::evaluate_video(&v.id, &as_predictions(v), &gts(v), &THRESHOLDS))
        .collect();
    let r = eval::summarize(per, &THRESHOLDS);
    for t in &r.thresholds {
        assert_eq!((t.precision, t.recall), (1.0, 1.0), "tau {}", t.tau);
    }
    assert_eq!((r.precision, r.recall, r.f1, r.bleu4), (1.0, 1.0, 1.0, 1.0));
}

fn jittered(v: &SyntheticVideo, seed: u64) -> Vec<PredictedEvent> {
    let mut r = seeded(seed);
    let mut preds: Vec<PredictedEvent> = v
        .events
        .iter()
        .map(|e| {
            let c = e.interval.center + r.random_range(-0.05..0.05);
            let d = e.interval.duration * r.random_range(0.6..1.4);
            PredictedEvent {
                interval: TemporalInterval::new(c, d).unwrap(),
                // coarse levels force confidence ties
                confidence: r.random_range(0..3) as f64 / 2.0,
                tokens: e.tokens.iter().copied().filter(|_| r.random_bool(0.8)).collect(),
            }
        })
        .collect();
    preds.push(PredictedEvent {
        interval: TemporalInterval::new(0.5, 0.3).unwrap(),
        confidence: 0.5,
        tokens: vec![5, 6, 7, 8],
    });
    preds
}

#[test]
fn scores_ignore_prediction_order_and_fall_with_threshold() {
    let data = synth::generate_dataset(&SynthConfig::default(), 40, 8).unwrap();
    let mut r = seeded(1);
    for (i, v) in data.iter().enumerate() {
        let preds = jittered(v, i as u64);
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut r);
        let a = eval::evaluate_video(&v.id, &preds, &gts(v), &THRESHOLDS);
        let b = eval::evaluate_video(&v.id, &shuffled, &gts(v), &THRESHOLDS);
        assert_eq!(a.thresholds, b.thresholds);
        let mut sa = a.bleu.clone();
        let mut sb = b.bleu.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        assert_eq!(sa, sb);
        for w in a.thresholds.windows(2) {
            assert!(w[1].matched <= w[0].matched);
        }
        for t in &a.thresholds {
            assert!((0.0..=1.0).contains(&t.precision) && (0.0..=1.0).contains(&t.recall));
        }
    }
}

#[test]
fn higher_confidence_wins_a_shared_ground_truth() {
    let gt = TemporalInterval::from_bounds(0.2, 0.6).unwrap();
    let mk = |s, e, c| PredictedEvent {
        interval: TemporalInterval::from_bounds(s, e).unwrap(),
        confidence: c,
        tokens: vec![],
    };
    let preds = [mk(0.2, 0.58, 0.3), mk(0.22, 0.6, 0.8)];
    let pairs = eval::match_at_threshold(&preds, &[gt], 0.5);
    assert_eq!(pairs, vec![(1, 0)]);
    let tokens: [u32; 0] = [];
    let v = eval::evaluate_video(
        "v",
        &preds,
        &[GroundTruthEvent {
            interval: gt,
            tokens: &tokens,
        }],
        &[0.5],
    );
    assert_eq!(v.thresholds[0].precision, 0.5);
    assert_eq!(v.thresholds[0].recall, 1.0);
}

/// Partial overlaps: per-threshold counts worked out by hand.
#[test]
fn partial_overlap_hand_case() {
    let gt_a = TemporalInterval::from_bounds(0.0, 0.4).unwrap();
    let gt_b = TemporalInterval::from_bounds(0.5, 1.0).unwrap();
    let mk = |s, e, c| PredictedEvent {
        interval: TemporalInterval::from_bounds(s, e).unwrap(),
        confidence: c,
        tokens: vec![],
    };
    // IoU with gt_a = 0.3 / 0.4 = 0.75; IoU with gt_b = 0.2 / 0.5 = 0.4
    let preds = [mk(0.1, 0.4, 0.9), mk(0.5, 0.7, 0.8)];
    assert!((geometry::iou(&preds[0].interval, &gt_a) - 0.75).abs() < 1e-12);
    assert!((geometry::iou(&preds[1].interval, &gt_b) - 0.4).abs() < 1e-12);
    let t: [u32; 0] = [];
    let g = [
        GroundTruthEvent { interval: gt_a, tokens: &t },
        GroundTruthEvent { interval: gt_b, tokens: &t },
    ];
    let v = eval::evaluate_video("v", &preds, &g, &THRESHOLDS);
    let matched: Vec<usize> = v.thresholds.iter().map(|t| t.matched).collect();
    assert_eq!(matched, vec![2, 1, 1, 0]);
    let r = eval::summarize(vec![v], &THRESHOLDS);
    assert!((r.precision - 0.5).abs() < 1e-12);
    assert!((r.recall - 0.5).abs() < 1e-12);
    assert!((r.f1 - 0.5).abs() < 1e-12);
}

/// Clipped n-gram counting through count maps, without the pooled search
/// used by the metric.
fn reference_bleu(cand: &[u32], refr: &[u32]) -> f64 {
    use std::collections::HashMap;
    if cand.is_empty() {
        return 0.0;
    }
    let counts = |t: &[u32], n: usize| {
        let mut m: HashMap<Vec<u32>, usize> = HashMap::new();
        if t.len() >= n {
            for w in t.windows(n) {
                *m.entry(w.to_vec()).or_default() += 1;
            }
        }
        m
    };
    let mut logs = 0.0;
    for n in 1..=4 {
        let (c, r) = (counts(cand, n), counts(refr, n));
        let total: usize = c.values().sum();
        let hits: usize = c
            .iter()
            .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if hits > 0 {
            hits as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        logs += p.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (logs / 4.0).exp()
}

#[test]
fn bleu_agrees_with_reference_counting() {
    // a b c d e vs a b c d f
    let (a, b, c, d, e, f) = (10, 11, 12, 13, 14, 15);
    let got = eval::bleu4(&[a, b, c, d, e], &[a, b, c, d, f]);
    let want = reference_bleu(&[a, b, c, d, e], &[a, b, c, d, f]);
    assert!((got - want).abs() < 1e-12);
    // 4/5, 3/4, 2/3, 1/2 with no brevity penalty
    let hand = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
}

proptest! {
    #[test]
    fn bleu_matches_reference_and_stays_in_range(
        cand in prop::collection::vec(4u32..10, 0..12),
        refr in prop::collection::vec(4u32..10, 1..12),
    ) {
        let got = eval::bleu4(&cand, &refr);
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert!((got - reference_bleu(&cand, &refr).min(1.0)).abs() < 1e-12);
    }

    #[test]
    fn bleu_of_self_is_one(x in prop::collection::vec(4u32..60, 4..12)) {
        prop_assert_eq!(eval::bleu4(&x, &x), 1.0);
    }
}
