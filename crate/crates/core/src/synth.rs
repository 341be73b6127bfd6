//! Synthetic multi-event videos with planted features and grammar captions.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, TemporalInterval};
use crate::heads::{BOS, EOS, PAD, UNK};
use crate::math;
use crate::rng::{self, StdRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Hierarchical,
    Sequential,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Hierarchical => "hierarchical",
            Regime::Sequential => "sequential",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Regime::Hierarchical),
            "sequential" => Ok(Regime::Sequential),
            other => Err(Error::Input(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeMix {
    Hierarchical,
    Sequential,
    Mixed,
}

impl RegimeMix {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(RegimeMix::Hierarchical),
            "sequential" => Ok(RegimeMix::Sequential),
            "mixed" => Ok(RegimeMix::Mixed),
            other => Err(Error::Config(format!("unknown regime mix {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeMix::Hierarchical => "hierarchical",
            RegimeMix::Sequential => "sequential",
            RegimeMix::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub interval: TemporalInterval,
    pub tokens: Vec<u32>,
    /// Generator-side labels, absent for loaded data.
    pub archetype: Option<usize>,
    pub partner: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub regime: Option<Regime>,
    /// `V×D` frame features.
    pub features: Tensor,
    pub events: Vec<Event>,
}

impl SyntheticVideo {
    pub fn intervals(&self) -> Vec<TemporalInterval> {
        self.events.iter().map(|e| e.interval).collect()
    }
}

const SUBJECTS: [&str; 12] = [
    "chef", "man", "woman", "child", "dog", "player", "worker", "girl", "boy", "crowd", "driver",
    "singer",
];
const VERBS: [&str; 12] = [
    "cuts", "lifts", "throws", "opens", "paints", "washes", "carries", "pours", "folds", "kicks",
    "cleans", "stirs",
];
const OBJECTS: [&str; 12] = [
    "onion", "box", "ball", "door", "wall", "car", "bag", "water", "shirt", "rope", "floor", "soup",
];

pub const FUNCTION_WORDS: [&str; 3] = ["a", "the", "with"];
pub const VOCAB_SIZE: usize = 64;
pub const MAX_CAPTION_LEN: usize = 12;

/// Token table of the caption grammar: specials, function words and one
/// subject, verb and object per archetype, padded to [`VOCAB_SIZE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn synthetic() -> Self {
        let mut words: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        debug_assert_eq!(words.len(), UNK as usize + 1);
        words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        for a in 0..SUBJECTS.len() {
            words.push(SUBJECTS[a].to_string());
            words.push(VERBS[a].to_string());
            words.push(OBJECTS[a].to_string());
        }
        let mut k = 0;
        while words.len() < VOCAB_SIZE {
            words.push(format!("<unused{k}>"));
            k += 1;
        }
        Vocabulary { words }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let specials = ["<pad>", "<bos>", "<eos>", "<unk>"];
        if words.len() <= UNK as usize || words.iter().zip(specials).any(|(w, s)| w != s) {
            return Err(Error::Input(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        Ok(Vocabulary { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32)
            .unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::Vocabulary(id as usize))
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        let mut parts = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t == PAD || t == BOS || t == EOS {
                continue;
            }
            parts.push(self.word(t)?);
        }
        Ok(parts.join(" "))
    }
}

/// The caption grammar: `a S V the O [with the O']`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionGrammar {
    pub archetypes: usize,
    /// When set, the optional clause names the partner event's object.
    pub co_occurrence: bool,
}

impl CaptionGrammar {
    const FIRST_CONTENT: u32 = UNK + 1 + FUNCTION_WORDS.len() as u32;

    pub fn subject(a: usize) -> u32 {
        Self::FIRST_CONTENT + 3 * a as u32
    }

    pub fn verb(a: usize) -> u32 {
        Self::subject(a) + 1
    }

    pub fn object(a: usize) -> u32 {
        Self::subject(a) + 2
    }

    /// `clause` is the archetype whose object fills the optional clause.
    pub fn expand(&self, archetype: usize, clause: Option<usize>) -> Vec<u32> {
        let (a, the, with) = (UNK + 1, UNK + 2, UNK + 3);
        let mut t = vec![
            a,
            Self::subject(archetype),
            Self::verb(archetype),
            the,
            Self::object(archetype),
        ];
        if let Some(c) = clause {
            t.extend([with, the, Self::object(c)]);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub dim: usize,
    pub noise: f64,
    pub max_events: usize,
    pub mix: RegimeMix,
    pub grammar: CaptionGrammar,
    /// Seed of the archetype feature vectors shared by every split.
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 64,
            dim: 64,
            noise: 0.1,
            max_events: 10,
            mix: RegimeMix::Mixed,
            grammar: CaptionGrammar {
                archetypes: SUBJECTS.len(),
                co_occurrence: true,
            },
            world_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grammar.archetypes == 0 || self.grammar.archetypes > SUBJECTS.len() {
            return Err(Error::Config(format!(
                "archetype count must be in 1..={}, got {}",
                SUBJECTS.len(),
                self.grammar.archetypes
            )));
        }
        if self.dim == 0 || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "feature width must be positive and noise non-negative".into(),
            ));
        }
        if self.max_events < 4 {
            return Err(Error::Generation(format!(
                "at least 4 events per video are needed, max_events is {}",
                self.max_events
            )));
        }
        if self.frames < 8 * min_frames(self.frames) {
            return Err(Error::Generation(format!(
                "{} frames cannot hold 8 touching events",
                self.frames
            )));
        }
        Ok(())
    }

    /// Archetype feature vectors, `archetypes×dim`.
    pub fn archetype_table(&self) -> Tensor {
        let mut r = rng::seeded(self.world_seed);
        let data = (0..self.grammar.archetypes * self.dim)
            .map(|_| rng::normal(&mut r, 0.0, 1.0))
            .collect();
        Tensor::new(vec![self.grammar.archetypes, self.dim], data).expect("table shape")
    }
}

fn min_frames(frames: usize) -> usize {
    (frames / 32).max(2)
}

/// Splits `total` into `k` parts of at least `min` each.
fn split(total: usize, k: usize, min: usize, rng: &mut StdRng) -> Vec<usize> {
    let mut parts = vec![min; k];
    for _ in 0..total - k * min {
        parts[rng.random_range(0..k)] += 1;
    }
    parts
}

struct Span {
    start: usize,
    end: usize,
}

fn sequential_spans(v: usize, rng: &mut StdRng) -> Vec<Span> {
    let min = min_frames(v);
    let k = rng.random_range(4..=8usize);
    let lo = (k * min + min).max(v / 2).min(v);
    let total = rng.random_range(lo..=v);
    let offset = rng.random_range(0..=v - total);
    let mut start = offset;
    split(total, k, min, rng)
        .into_iter()
        .map(|len| {
            let s = Span {
                start,
                end: start + len,
            };
            start += len;
            s
        })
        .collect()
}

/// Long events around the middle, each hosting included sub-events.
/// Returned with parent links.
fn hierarchical_spans(
    v: usize,
    max_events: usize,
    rng: &mut StdRng,
) -> (Vec<Span>, Vec<Option<usize>>) {
    let min = min_frames(v);
    let longs = rng.random_range(2..=4usize).min(max_events / 2);
    let mut spans = Vec::new();
    let mut parents = Vec::new();
    let mut used_lengths = Vec::new();
    let mut long_ids = Vec::new();
    let mut tries = 0;
    while long_ids.len() < longs && tries < 100 {
        tries += 1;
        let frac: f64 = rng.random_range(0.3..0.8);
        let len = ((frac * v as f64) as usize).max(4 * min).min(v);
        if used_lengths
            .iter()
            .any(|&l: &usize| l.abs_diff(len) < 2 * min)
        {
            continue;
        }
        let jitter = rng.random_range(-0.1..0.1) * v as f64;
        let mid = (v as f64 / 2.0 + jitter) as isize;
        let start = (mid - len as isize / 2).clamp(0, (v - len) as isize) as usize;
        used_lengths.push(len);
        long_ids.push(spans.len());
        spans.push(Span {
            start,
            end: start + len,
        });
        parents.push(None);
    }
    // Longer first so nesting links point at the tightest container.
    long_ids.sort_by_key(|&i| core::cmp::Reverse(spans[i].end - spans[i].start));
    for (k, &i) in long_ids.iter().enumerate() {
        for &j in long_ids[..k].iter().rev() {
            if spans[j].start <= spans[i].start && spans[i].end <= spans[j].end {
                parents[i] = Some(j);
                break;
            }
        }
    }
    let budget = max_events - spans.len();
    let mut added = 0;
    for (round, &p) in long_ids.iter().cycle().enumerate() {
        if added >= budget || round >= 2 * long_ids.len() {
            break;
        }
        let (ps, pe) = (spans[p].start, spans[p].end);
        let plen = pe - ps;
        let len = rng.random_range(min..=(plen / 3).max(min));
        let start = rng.random_range(ps..=pe - len);
        let clash = spans.iter().enumerate().any(|(i, s)| {
            parents[i] == Some(p)
                && !long_ids.contains(&i)
                && s.start < start + len
                && start < s.end
        });
        if clash {
            continue;
        }
        spans.push(Span {
            start,
            end: start + len,
        });
        parents.push(Some(p));
        added += 1;
    }
    (spans, parents)
}

fn to_interval(s: &Span, v: usize) -> Result<TemporalInterval> {
    TemporalInterval::from_bounds(s.start as f64 / v as f64, s.end as f64 / v as f64)
}

/// One video from its own RNG substream.
pub fn generate_video(
    cfg: &SynthConfig,
    table: &Tensor,
    seed: u64,
    index: usize,
) -> Result<SyntheticVideo> {
    let mut r = rng::substream(seed, index as u64);
    let v = cfg.frames;
    let regime = match cfg.mix {
        RegimeMix::Hierarchical => Regime::Hierarchical,
        RegimeMix::Sequential => Regime::Sequential,
        RegimeMix::Mixed => {
            if r.random_bool(0.5) {
                Regime::Hierarchical
            } else {
                Regime::Sequential
            }
        }
    };
    let (spans, partners) = match regime {
        Regime::Sequential => {
            let s = sequential_spans(v, &mut r);
            let p = (0..s.len()).map(|i| i.checked_sub(1)).collect();
            (s, p)
        }
        Regime::Hierarchical => hierarchical_spans(v, cfg.max_events, &mut r),
    };
    if spans.len() > cfg.max_events {
        return Err(Error::Generation(format!(
            "{} events exceed the limit {}",
            spans.len(),
            cfg.max_events
        )));
    }
    let n_arch = cfg.grammar.archetypes;
    let mut pool: Vec<usize> = (0..n_arch).collect();
    pool.shuffle(&mut r);
    let archetypes: Vec<usize> = (0..spans.len()).map(|i| pool[i % n_arch]).collect();

    let mut events = Vec::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        let clause = partners[i].map(|p| {
            if cfg.grammar.co_occurrence {
                archetypes[p]
            } else {
                r.random_range(0..n_arch)
            }
        });
        events.push(Event {
            interval: to_interval(s, v)?,
            tokens: cfg.grammar.expand(archetypes[i], clause),
            archetype: Some(archetypes[i]),
            partner: partners[i],
        });
    }

    let d = cfg.dim;
    let mut feats = vec![0.0; v * d];
    for t in 0..v {
        let covering: Vec<usize> = (0..spans.len())
            .filter(|&i| spans[i].start <= t && t < spans[i].end)
            .collect();
        let inner = covering
            .iter()
            .copied()
            .min_by_key(|&i| (spans[i].end - spans[i].start, i));
        let row = &mut feats[t * d..(t + 1) * d];
        for &i in &covering {
            let w = if Some(i) == inner { 1.0 } else { 0.5 };
            for (x, a) in row.iter_mut().zip(table.row(archetypes[i])) {
                *x += w * a;
            }
        }
        for x in row.iter_mut() {
            *x += rng::normal(&mut r, 0.0, cfg.noise);
        }
    }
    Ok(SyntheticVideo {
        id: format!("video{index:05}"),
        regime: Some(regime),
        features: Tensor::matrix(v, d, feats)?,
        events,
    })
}

pub fn generate_dataset(
    cfg: &SynthConfig,
    n_videos: usize,
    seed: u64,
) -> Result<Vec<SyntheticVideo>> {
    cfg.validate()?;
    let table = cfg.archetype_table();
    (0..n_videos)
        .map(|i| generate_video(cfg, &table, seed, i))
        .collect()
}

/// Token-count cosine similarity over content tokens. Specials and the
/// grammar's function words are skipped.
pub fn caption_similarity(a: &[u32], b: &[u32]) -> f64 {
    let mut counts: Vec<(u32, f64, f64)> = Vec::new();
    for (toks, side) in [(a, 0), (b, 1)] {
        for &t in toks {
            if t < CaptionGrammar::FIRST_CONTENT {
                continue;
            }
            match counts.iter_mut().find(|c| c.0 == t) {
                Some(c) => {
                    if side == 0 {
                        c.1 += 1.0
                    } else {
                        c.2 += 1.0
                    }
                }
                None => counts.push(if side == 0 {
                    (t, 1.0, 0.0)
                } else {
                    (t, 0.0, 1.0)
                }),
            }
        }
    }
    let dot: f64 = counts.iter().map(|c| c.1 * c.2).sum();
    let na: f64 = counts.iter().map(|c| c.1 * c.1).sum();
    let nb: f64 = counts.iter().map(|c| c.2 * c.2).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / math::sqrt(na * nb)
}

/// Pearson correlation; `None` when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / math::sqrt(sxx * syy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcPair {
    pub video: usize,
    pub lc: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStatistics {
    /// `(center, duration)` of every event.
    pub scatter: Vec<[f64; 2]>,
    pub pairs: Vec<LcPair>,
    /// Correlation of location correlation with caption similarity.
    pub lc_similarity_r: Option<f64>,
    /// Correlation of duration with distance from the middle.
    pub duration_centrality_r: Option<f64>,
}

/// Every within-video unordered event pair contributes one point.
pub fn dataset_statistics(videos: &[SyntheticVideo]) -> Result<DatasetStatistics> {
    if videos.is_empty() {
        return Err(Error::Input("statistics need at least one video".into()));
    }
    let mut scatter = Vec::new();
    let mut pairs = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        for e in &v.events {
            scatter.push([e.interval.center, e.interval.duration]);
        }
        for i in 0..v.events.len() {
            for j in i + 1..v.events.len() {
                let (a, b) = (&v.events[i], &v.events[j]);
                pairs.push(LcPair {
                    video: vi,
                    lc: geometry::location_correlation(&a.interval, &b.interval)?,
                    similarity: caption_similarity(&a.tokens, &b.tokens),
                });
            }
        }
    }
    let lc: Vec<f64> = pairs.iter().map(|p| p.lc).collect();
    let sim: Vec<f64> = pairs.iter().map(|p| p.similarity).collect();
    let dur: Vec<f64> = scatter.iter().map(|p| p[1]).collect();
    let off: Vec<f64> = scatter.iter().map(|p| (p[0] - 0.5).abs()).collect();
    Ok(DatasetStatistics {
        lc_similarity_r: pearson(&lc, &sim),
        duration_centrality_r: pearson(&dur, &off),
        scatter,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_lengths_and_vocab() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.len(), VOCAB_SIZE);
        let g = CaptionGrammar {
            archetypes: 12,
            co_occurrence: true,
        };
        let c = g.expand(3, Some(5));
        assert_eq!(c.len(), 8);
        assert_eq!(v.decode(&c).unwrap(), "a child opens the door with the car");
        assert_eq!(g.expand(0, None).len(), 5);
        assert!(c.iter().all(|&t| (t as usize) < VOCAB_SIZE));
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(
            generate_dataset(&cfg, 6, 3).unwrap(),
            generate_dataset(&cfg, 6, 3).unwrap()
        );
    }

    #[test]
    fn identical_duplicates_give_single_point() {
        let cfg = SynthConfig::default();
        let mut v = generate_dataset(&cfg, 1, 1).unwrap().remove(0);
        let e = v.events[0].clone();
        v.events = vec![e.clone(), e];
        let s = dataset_statistics(&[v]).unwrap();
        assert_eq!(s.pairs.len(), 1);
        assert_eq!(s.pairs[0].lc, 2.0);
        assert!((s.pairs[0].similarity - 1.0).abs() < 1e-12);
    }
}
