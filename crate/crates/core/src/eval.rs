//! Threshold-matched precision/recall and BLEU4 over matched captions.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{self, TemporalInterval};
use crate::math;

pub const THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedEvent {
    pub interval: TemporalInterval,
    pub confidence: f64,
    pub tokens: Vec<u32>,
}

/// Descending confidence, then earlier start, then list position.
pub fn confidence_order(preds: &[PredictedEvent]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(
                preds[a]
                    .interval
                    .start()
                    .total_cmp(&preds[b].interval.start()),
            )
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching: each prediction in confidence order takes the
/// unmatched ground truth it overlaps most, if that IoU reaches `tau`.
pub fn match_at_threshold(
    preds: &[PredictedEvent],
    gts: &[TemporalInterval],
    tau: f64,
) -> Vec<(usize, usize)> {
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for p in confidence_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = geometry::iou(&preds[p].interval, gt);
            if best.is_none_or(|b| iou > b.1) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= tau {
                taken[j] = true;
                pairs.push((p, j));
            }
        }
    }
    pairs
}

fn ngrams(tokens: &[u32], n: usize) -> Vec<&[u32]> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).collect()
}

fn clipped_matches(cand: &[u32], refr: &[u32], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let mut pool = ngrams(refr, n);
    let mut hits = 0;
    for g in &c {
        if let Some(i) = pool.iter().position(|r| r == g) {
            pool.swap_remove(i);
            hits += 1;
        }
    }
    (hits, c.len())
}

/// Sentence BLEU with uniform 1..4-gram weights and a brevity penalty.
/// Empty higher-order matches are smoothed to `1 / (count + 1)`.
pub fn bleu4(candidate: &[u32], reference: &[u32]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (hits, total) = clipped_matches(candidate, reference, n);
        let p = if hits > 0 {
            hits as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += math::ln(p);
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { math::exp(1.0 - r / c) };
    (bp * math::exp(log_sum / 4.0)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub tau: f64,
    pub matched: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEval {
    pub id: String,
    pub predictions: usize,
    pub ground_truth: usize,
    pub thresholds: Vec<ThresholdResult>,
    /// BLEU4 of every matched pair, all thresholds pooled.
    pub bleu: Vec<f64>,
}

pub struct GroundTruthEvent<'a> {
    pub interval: TemporalInterval,
    pub tokens: &'a [u32],
}

pub fn evaluate_video(
    id: &str,
    preds: &[PredictedEvent],
    gts: &[GroundTruthEvent<'_>],
    thresholds: &[f64],
) -> VideoEval {
    let intervals: Vec<TemporalInterval> = gts.iter().map(|g| g.interval).collect();
    let mut results = Vec::with_capacity(thresholds.len());
    let mut bleu = Vec::new();
    for &tau in thresholds {
        let pairs = match_at_threshold(preds, &intervals, tau);
        for &(p, g) in &pairs {
            bleu.push(bleu4(&preds[p].tokens, gts[g].tokens));
        }
        let m = pairs.len() as f64;
        results.push(ThresholdResult {
            tau,
            matched: pairs.len(),
            precision: if preds.is_empty() {
                0.0
            } else {
                m / preds.len() as f64
            },
            recall: if gts.is_empty() {
                0.0
            } else {
                m / gts.len() as f64
            },
        });
    }
    VideoEval {
        id: id.into(),
        predictions: preds.len(),
        ground_truth: gts.len(),
        thresholds: results,
        bleu,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSummary {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdSummary>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bleu4: f64,
    pub matched_pairs: usize,
    /// Some video had no predictions; its precision counted as 0.
    pub empty_predictions: bool,
    pub per_video: Vec<VideoEval>,
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Per-threshold precision and recall are averaged over videos, then over
/// thresholds; F1 is taken from the averages.
pub fn summarize(per_video: Vec<VideoEval>, thresholds: &[f64]) -> EvalReport {
    let nv = per_video.len().max(1) as f64;
    let mut summaries = Vec::with_capacity(thresholds.len());
    for (k, &tau) in thresholds.iter().enumerate() {
        let p = per_video
            .iter()
            .map(|v| v.thresholds[k].precision)
            .sum::<f64>()
            / nv;
        let r = per_video
            .iter()
            .map(|v| v.thresholds[k].recall)
            .sum::<f64>()
            / nv;
        summaries.push(ThresholdSummary {
            tau,
            precision: p,
            recall: r,
        });
    }
    let nt = summaries.len().max(1) as f64;
    let precision = summaries.iter().map(|s| s.precision).sum::<f64>() / nt;
    let recall = summaries.iter().map(|s| s.recall).sum::<f64>() / nt;
    let scores: Vec<f64> = per_video
        .iter()
        .flat_map(|v| v.bleu.iter().copied())
        .collect();
    let bleu4 = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    EvalReport {
        thresholds: summaries,
        precision,
        recall,
        f1: harmonic(precision, recall),
        bleu4,
        matched_pairs: scores.len(),
        empty_predictions: per_video.iter().any(|v| v.predictions == 0),
        per_video,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> TemporalInterval {
        TemporalInterval::from_bounds(s, e).unwrap()
    }

    fn pred(s: f64, e: f64, c: f64) -> PredictedEvent {
        PredictedEvent {
            interval: iv(s, e),
            confidence: c,
            tokens: vec![],
        }
    }

    #[test]
    fn greedy_prefers_confident() {
        let gts = [iv(0.0, 0.5)];
        let preds = [pred(0.0, 0.45, 0.4), pred(0.05, 0.5, 0.9)];
        assert_eq!(match_at_threshold(&preds, &gts, 0.5), vec![(1, 0)]);
        let disjoint = [pred(0.6, 0.9, 0.9)];
        for t in THRESHOLDS {
            assert!(match_at_threshold(&disjoint, &gts, t).is_empty());
        }
    }

    #[test]
    fn half_found() {
        let gts = [
            GroundTruthEvent {
                interval: iv(0.0, 0.3),
                tokens: &[4, 5, 6, 7],
            },
            GroundTruthEvent {
                interval: iv(0.5, 0.9),
                tokens: &[4, 5, 6, 7],
            },
        ];
        let preds = [PredictedEvent {
            interval: iv(0.0, 0.3),
            confidence: 0.8,
            tokens: vec![4, 5, 6, 7],
        }];
        let r = summarize(
            vec![evaluate_video("v", &preds, &gts, &THRESHOLDS)],
            &THRESHOLDS,
        );
        assert_eq!((r.precision, r.recall), (1.0, 0.5));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.bleu4, 1.0);
    }

    #[test]
    fn bleu_edges() {
        assert_eq!(bleu4(&[1, 2, 3, 4], &[1, 2, 3, 4]), 1.0);
        assert_eq!(bleu4(&[1, 2, 3, 4], &[5, 6, 7, 8]), 0.0);
        assert_eq!(bleu4(&[], &[5, 6]), 0.0);
    }
}
