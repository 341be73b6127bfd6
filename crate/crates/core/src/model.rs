//! The assembled set-prediction model: encoder, queries, decoder, heads
//! and the matched training loss.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::decoder::{Decoded, DecoderConfig, RelationDecoder};
use crate::encoder::{self, Encoded, EncoderConfig, VideoEncoder};
use crate::error::{Error, Result};
use crate::eval::{self, PredictedEvent};
use crate::geometry::{self, RelationMetric, TemporalInterval};
use crate::graph::{Graph, Var};
use crate::heads::{
    CaptionConfig, CaptionHead, CountDistribution, CountHead, LocalizationHead, Localized,
};
use crate::kmeans::Point;
use crate::matching::{self, FocalParams, LossReport, LossWeights, MatchedPrediction};
use crate::math;
use crate::params::ParamStore;
use crate::pe::PeConfig;
use crate::query::{self, EventQuerySet, LearnedQueries, PositionAnchoredQueries};
use crate::synth::Event;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ablation {
    /// Clustered, feature-aggregated queries instead of free embeddings.
    pub position_prior: bool,
    /// Relation mask on the decoder self-attention.
    pub relation_prior: bool,
    pub metric: RelationMetric,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            position_prior: true,
            relation_prior: true,
            metric: RelationMetric::Overlap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub frames: usize,
    pub scales: usize,
    pub queries: usize,
    pub slot_iterations: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
    pub relation_dim: usize,
    pub max_count: usize,
    pub vocab: usize,
    pub max_caption_len: usize,
    pub caption_hidden: usize,
    pub window_sigma: f64,
    pub positional: bool,
    pub deep_supervision: bool,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub match_giou: f64,
    pub match_cls: f64,
    pub ablation: Ablation,
    pub pe: PeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_dim(512)
    }
}

impl ModelConfig {
    /// Defaults at a given model width; widths follow from it.
    pub fn with_dim(dim: usize) -> Self {
        ModelConfig {
            dim,
            frames: 64,
            scales: 4,
            queries: 10,
            slot_iterations: 3,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 8,
            points: 4,
            ffn_dim: 2 * dim,
            relation_dim: 16,
            max_count: 10,
            vocab: crate::synth::VOCAB_SIZE,
            max_caption_len: crate::synth::MAX_CAPTION_LEN,
            caption_hidden: dim / 2,
            window_sigma: crate::heads::DEFAULT_WINDOW_SIGMA,
            positional: true,
            deep_supervision: true,
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            match_giou: 2.0,
            match_cls: 1.0,
            ablation: Ablation::default(),
            pe: PeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return bad(format!(
                "model width must be a positive multiple of 4, got {}",
                self.dim
            ));
        }
        if self.heads < 2 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads must be at least 2 and divide the width {}",
                self.heads, self.dim
            ));
        }
        if self.queries == 0 || self.slot_iterations == 0 || self.decoder_layers == 0 {
            return bad("queries, slot iterations and decoder layers must be at least 1".into());
        }
        if self.scales == 0 || self.points == 0 || self.ffn_dim == 0 || self.caption_hidden == 0 {
            return bad("scales, points, ffn width and caption width must be positive".into());
        }
        if self.relation_dim == 0 || !self.relation_dim.is_multiple_of(2) {
            return bad(format!(
                "relation embedding width must be even, got {}",
                self.relation_dim
            ));
        }
        if self.max_count == 0 {
            return bad("maximum event count must be at least 1".into());
        }
        if self.vocab <= crate::heads::UNK as usize || self.max_caption_len == 0 {
            return bad(
                "vocabulary must hold the special tokens and captions need a length".into(),
            );
        }
        if !(self.window_sigma > 0.0) {
            return bad("caption window sigma must be positive".into());
        }
        encoder::ScaleLayout::new(self.frames, self.scales)?;
        Ok(())
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            frames: self.frames,
            scales: self.scales,
            heads: self.heads,
            points: self.points,
            layers: self.encoder_layers,
            ffn_dim: self.ffn_dim,
            pe: self.pe,
            positional: self.positional,
        }
    }

    fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            dim: self.dim,
            heads: self.heads,
            scales: self.scales,
            points: self.points,
            layers: self.decoder_layers,
            ffn_dim: self.ffn_dim,
            relation_dim: self.relation_dim,
            relation: self.ablation.relation_prior,
            metric: self.ablation.metric,
            pe: self.pe,
        }
    }
}

#[derive(Debug, Clone)]
pub enum QueryModule {
    Anchored(PositionAnchoredQueries),
    Learned(LearnedQueries),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: VideoEncoder,
    pub queries: QueryModule,
    pub decoder: RelationDecoder,
    pub localize: LocalizationHead,
    pub count: CountHead,
    pub caption: CaptionHead,
}

pub struct Forward {
    pub encoded: Encoded,
    pub queries: EventQuerySet,
    pub decoded: Decoded,
    /// Localization of every decoder layer, last one final.
    pub layers: Vec<Localized>,
    pub count_logits: Var,
}

impl Forward {
    pub fn last(&self) -> &Localized {
        self.layers.last().expect("at least one decoder layer")
    }
}

pub struct LossOutput {
    pub total: Var,
    pub report: LossReport,
    /// Final-layer assignment.
    pub matched: MatchedPrediction,
    /// `(correct, counted)` caption tokens under teacher forcing.
    pub caption_accuracy: (usize, usize),
    pub unmatched_proposals: usize,
    pub count_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Selected events, most confident first.
    pub events: Vec<PredictedEvent>,
    pub count: CountDistribution,
    /// Decoded boxes and confidences of every query.
    pub all: Vec<(TemporalInterval, f64)>,
}

impl Model {
    /// `centroids` must hold one `(c, d)` per query when the position prior
    /// is on and is ignored otherwise.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: ModelConfig,
        centroids: Option<&[Point]>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = VideoEncoder::new(store, cfg.encoder(), rng)?;
        let queries = if cfg.ablation.position_prior {
            let c = centroids
                .ok_or_else(|| Error::Config("position prior needs clustering centroids".into()))?;
            if c.len() != cfg.queries {
                return Err(Error::Config(format!(
                    "{} centroids for {} queries",
                    c.len(),
                    cfg.queries
                )));
            }
            QueryModule::Anchored(PositionAnchoredQueries::new(
                store,
                c.to_vec(),
                cfg.dim,
                cfg.slot_iterations,
                cfg.pe,
                rng,
            )?)
        } else {
            QueryModule::Learned(LearnedQueries::new(store, cfg.queries, cfg.dim, rng)?)
        };
        let decoder = RelationDecoder::new(store, cfg.decoder(), rng)?;
        let localize = LocalizationHead::new(store, "head.localize", cfg.dim, rng)?;
        let count = CountHead::new(store, "head.count", cfg.dim, cfg.max_count, rng)?;
        let caption = CaptionHead::new(
            store,
            "head.caption",
            cfg.dim,
            CaptionConfig {
                vocab: cfg.vocab,
                max_len: cfg.max_caption_len,
                hidden: cfg.caption_hidden,
                attn_dim: cfg.caption_hidden,
                window_sigma: cfg.window_sigma,
            },
            rng,
        )?;
        Ok(Model {
            cfg,
            encoder,
            queries,
            decoder,
            localize,
            count,
            caption,
        })
    }

    /// Frames of any length are linearly rescaled to the configured length.
    pub fn forward(&self, g: &mut Graph<'_>, frames: &Tensor) -> Result<Forward> {
        if frames.cols() != self.cfg.dim {
            return Err(Error::dim(
                "forward",
                frames.shape(),
                &[self.cfg.frames, self.cfg.dim],
            ));
        }
        if !frames.all_finite() {
            return Err(Error::Input(
                "frame features contain non-finite values".into(),
            ));
        }
        let frames = if frames.rows() == self.cfg.frames {
            frames.clone()
        } else {
            encoder::rescale_frames(frames, self.cfg.frames)?
        };
        let x = g.constant(frames);
        let encoded = self.encoder.encode(g, x)?;
        let queries = match &self.queries {
            QueryModule::Anchored(q) => q.generate(g, encoded.pyramid.tokens)?,
            QueryModule::Learned(q) => q.generate(g)?,
        };
        let decoded = self.decoder.decode(g, &queries, &encoded.encoded)?;
        let mut layers = Vec::with_capacity(decoded.states.len());
        for s in &decoded.states {
            layers.push(self.localize.forward(g, s.embeddings, &s.anchors)?);
        }
        let last = decoded.states.last().expect("decoder layer");
        let count_logits = self.count.forward(g, last.embeddings)?;
        Ok(Forward {
            encoded,
            queries,
            decoded,
            layers,
            count_logits,
        })
    }

    fn match_layer(
        &self,
        g: &Graph<'_>,
        loc: &Localized,
        gts: &[TemporalInterval],
    ) -> Result<MatchedPrediction> {
        let boxes = geometry::intervals_from_rows(g.value(loc.boxes));
        let conf: Vec<f64> = g
            .value(loc.logits)
            .data()
            .iter()
            .map(|&z| math::sigmoid(z))
            .collect();
        let cost = matching::head_matching_cost(
            &boxes,
            &conf,
            gts,
            self.cfg.match_giou,
            self.cfg.match_cls,
            self.cfg.focal,
        )?;
        MatchedPrediction::from_cost(&cost)
    }

    pub fn loss(&self, g: &mut Graph<'_>, fwd: &Forward, events: &[Event]) -> Result<LossOutput> {
        let gts: Vec<TemporalInterval> = events.iter().map(|e| e.interval).collect();
        let n = self.cfg.queries;
        let supervised: Vec<usize> = if self.cfg.deep_supervision {
            (0..fwd.layers.len()).collect()
        } else {
            alloc::vec![fwd.layers.len() - 1]
        };
        let mut cls_terms = Vec::new();
        let mut loc_terms = Vec::new();
        let mut matched = None;
        for &l in &supervised {
            let loc = &fwd.layers[l];
            let m = self.match_layer(g, loc, &gts)?;
            cls_terms.push(matching::focal_loss(
                g,
                loc.logits,
                &m.positives(n),
                self.cfg.focal,
            )?);
            if !m.pairs.is_empty() {
                let rows: Vec<Option<usize>> = m.pairs.iter().map(|p| Some(p.0)).collect();
                let targets: Vec<TemporalInterval> = m.pairs.iter().map(|p| gts[p.1]).collect();
                let picked = g.gather_rows(loc.boxes, &rows)?;
                let per = geometry::giou_loss(g, picked, &targets)?;
                loc_terms.push(g.mean_all(per)?);
            }
            matched = Some(m);
        }
        let matched = matched.expect("at least one supervised layer");
        let cls = sum_vars(g, &cls_terms)?;
        let loc = sum_vars(g, &loc_terms)?;

        let target = gts.len().min(self.cfg.max_count);
        let cnt = matching::cross_entropy(g, fwd.count_logits, &[Some(target)])?;

        let mut caption_accuracy = (0, 0);
        let cap = if matched.pairs.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let last = fwd.decoded.states.last().expect("decoder layer");
            let rows: Vec<Option<usize>> = matched.pairs.iter().map(|p| Some(p.0)).collect();
            let emb = g.gather_rows(last.embeddings, &rows)?;
            let anchors = g.gather_rows(fwd.last().boxes, &rows)?;
            let caps: Vec<Vec<u32>> = matched
                .pairs
                .iter()
                .map(|p| events[p.1].tokens.clone())
                .collect();
            let out = self
                .caption
                .teacher_forced(g, emb, anchors, &fwd.encoded.encoded, &caps)?;
            caption_accuracy = CaptionHead::token_accuracy(g, &out);
            CaptionHead::loss(g, &out)?
        };

        let mut unmatched_proposals = 0;
        let prop = if self.cfg.ablation.position_prior && !gts.is_empty() {
            let p = query::proposal_loss(g, fwd.queries.anchors.decoded, &gts)?;
            unmatched_proposals = p.unmatched_ground_truth;
            p.loss
        } else {
            g.constant(Tensor::scalar(0.0))
        };

        let w = self.cfg.weights;
        let parts = [
            (cls, 1.0),
            (loc, w.loc),
            (cnt, w.cnt),
            (cap, w.cap),
            (prop, w.prop),
        ];
        let mut total = g.constant(Tensor::scalar(0.0));
        for (v, s) in parts {
            let t = g.scale(v, s)?;
            total = g.add(total, t)?;
        }
        let report = LossReport::compose(
            g.value(cls).item(),
            g.value(loc).item(),
            g.value(cnt).item(),
            g.value(cap).item(),
            g.value(prop).item(),
            w,
        );
        if !report.is_finite() {
            return Err(Error::NonFinite {
                param: "loss".into(),
            });
        }
        Ok(LossOutput {
            total,
            report,
            matched,
            caption_accuracy,
            unmatched_proposals,
            count_clamped: gts.len() > self.cfg.max_count,
        })
    }

    /// Ranks queries by confidence and keeps the counter's `N_select`.
    pub fn predict(&self, store: &ParamStore, frames: &Tensor) -> Result<Prediction> {
        self.predict_with_count(store, frames, None)
    }

    /// As [`Model::predict`], optionally overriding the selected count.
    pub fn predict_with_count(
        &self,
        store: &ParamStore,
        frames: &Tensor,
        count: Option<usize>,
    ) -> Result<Prediction> {
        let mut g = Graph::inference(store);
        let fwd = self.forward(&mut g, frames)?;
        let dist = CountHead::distribution(&g, fwd.count_logits)?;
        let last = fwd.last();
        let boxes = geometry::intervals_from_rows(g.value(last.boxes));
        let conf: Vec<f64> = g
            .value(last.logits)
            .data()
            .iter()
            .map(|&z| math::sigmoid(z))
            .collect();
        let all: Vec<PredictedEvent> = boxes
            .iter()
            .zip(&conf)
            .map(|(b, &c)| PredictedEvent {
                interval: b.clamped(),
                confidence: c,
                tokens: Vec::new(),
            })
            .collect();
        let keep = count.unwrap_or_else(|| dist.n_select()).min(all.len());
        let chosen: Vec<usize> = eval::confidence_order(&all)
            .into_iter()
            .take(keep)
            .collect();
        let mut events: Vec<PredictedEvent> = chosen.iter().map(|&i| all[i].clone()).collect();
        if !chosen.is_empty() {
            let state = fwd.decoded.states.last().expect("decoder layer");
            let rows: Vec<Option<usize>> = chosen.iter().map(|&i| Some(i)).collect();
            let emb = g.gather_rows(state.embeddings, &rows)?;
            let flat: Vec<f64> = events
                .iter()
                .flat_map(|e| [e.interval.center, e.interval.duration])
                .collect();
            let anchors = g.constant(Tensor::matrix(events.len(), 2, flat)?);
            let caps = self
                .caption
                .greedy(&mut g, emb, anchors, &fwd.encoded.encoded)?;
            for (e, c) in events.iter_mut().zip(caps) {
                e.tokens = c;
            }
        }
        Ok(Prediction {
            events,
            count: dist,
            all: all
                .into_iter()
                .map(|e| (e.interval, e.confidence))
                .collect(),
        })
    }
}

fn sum_vars(g: &mut Graph<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = g.constant(Tensor::scalar(0.0));
    for &v in vars {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}
