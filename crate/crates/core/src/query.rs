//! Position-anchored event queries: clustered slots, slot-attention
//! aggregation over video features and anchor refinement.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, TemporalInterval};
use crate::graph::{Graph, Var};
use crate::kmeans::Point;
use crate::matching;
use crate::math;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::pe::{self, PeConfig};
use crate::tensor::Tensor;

/// Sinusoidal embedding of each `(c, d)` centroid, `N×dim`.
pub fn init_event_slots(centroids: &[Point], dim: usize, cfg: PeConfig) -> Result<Tensor> {
    let flat: Vec<f64> = centroids.iter().flatten().copied().collect();
    pe::encode_coords(&Tensor::matrix(centroids.len(), 2, flat)?, dim, cfg)
}

pub fn centroid_logits(centroids: &[Point]) -> Result<Tensor> {
    let flat = centroids
        .iter()
        .flatten()
        .map(|&v| math::inverse_sigmoid(v))
        .collect();
    Tensor::matrix(centroids.len(), 2, flat)
}

/// Slot attention where slots compete for each feature token.
#[derive(Debug, Clone)]
pub struct FeatureAggregator {
    pub slot_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub slot_q: Linear,
    pub feat_k: Linear,
    pub feat_v: Linear,
    pub update_norm: LayerNorm,
    pub update_mlp: Mlp,
    pub iterations: usize,
    dim: usize,
}

pub struct Aggregation {
    pub slots: Var,
    /// Slot-normalized attention `N×T` of every iteration.
    pub attention: Vec<Var>,
}

impl FeatureAggregator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        iterations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Config(
                "slot attention needs at least one iteration".into(),
            ));
        }
        Ok(FeatureAggregator {
            slot_norm: LayerNorm::new(store, &format!("{name}.slot_norm"), dim)?,
            feat_norm: LayerNorm::new(store, &format!("{name}.feat_norm"), dim)?,
            slot_q: Linear::new(store, &format!("{name}.slot_q"), dim, dim, rng)?,
            feat_k: Linear::new(store, &format!("{name}.feat_k"), dim, dim, rng)?,
            feat_v: Linear::new(store, &format!("{name}.feat_v"), dim, dim, rng)?,
            update_norm: LayerNorm::new(store, &format!("{name}.update_norm"), dim)?,
            update_mlp: Mlp::new(
                store,
                &format!("{name}.update_mlp"),
                &[dim, dim, dim],
                false,
                rng,
            )?,
            iterations,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, slots: Var, features: Var) -> Result<Aggregation> {
        // Feature transforms do not depend on the slots.
        let f = self.feat_norm.forward(g, features)?;
        let keys = self.feat_k.forward(g, f)?;
        let values = self.feat_v.forward(g, f)?;
        let scale = 1.0 / math::sqrt(self.dim as f64);
        let mut s = slots;
        let mut attention = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let sn = self.slot_norm.forward(g, s)?;
            let q = self.slot_q.forward(g, sn)?;
            let logits = g.matmul_nt(q, keys)?;
            let logits = g.scale(logits, scale)?;
            let a = g.softmax_cols(logits)?;
            let col = g.sum_axis0(a)?;
            let a = g.div_row(a, col)?;
            attention.push(a);
            let upd = g.matmul(a, values)?;
            let u = g.add(s, upd)?;
            let un = self.update_norm.forward(g, u)?;
            let m = self.update_mlp.forward(g, un)?;
            s = g.add(u, m)?;
        }
        Ok(Aggregation {
            slots: s,
            attention,
        })
    }
}

/// Decoded anchors with their pre-sigmoid form.
#[derive(Debug, Clone, Copy)]
pub struct Anchors {
    pub logits: Var,
    pub decoded: Var,
}

impl Anchors {
    pub fn from_logits(g: &mut Graph<'_>, logits: Var) -> Result<Self> {
        Ok(Anchors {
            logits,
            decoded: g.sigmoid(logits)?,
        })
    }
}

/// Offsets from the aggregated slots, added to the centroids in logit space.
#[derive(Debug, Clone)]
pub struct AnchorRefiner {
    pub mlp: Mlp,
}

impl AnchorRefiner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AnchorRefiner {
            mlp: Mlp::new(store, name, &[dim, dim, 2], true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, slots: Var, centroids: &[Point]) -> Result<Anchors> {
        let base = g.constant(centroid_logits(centroids)?);
        let off = self.mlp.forward(g, slots)?;
        let logits = g.add(base, off)?;
        Anchors::from_logits(g, logits)
    }
}

/// Everything the decoder needs from query generation.
pub struct EventQuerySet {
    pub embeddings: Var,
    pub anchors: Anchors,
    /// Initial anchors; every decoder layer sees these unchanged.
    pub static_anchors: Var,
    pub centroids: Vec<Point>,
    pub attention: Vec<Var>,
}

impl EventQuerySet {
    pub fn len(&self, g: &Graph<'_>) -> usize {
        g.value(self.embeddings).rows()
    }

    pub fn is_empty(&self, g: &Graph<'_>) -> bool {
        self.len(g) == 0
    }
}

/// Clustered slots refined against the video features.
#[derive(Debug, Clone)]
pub struct PositionAnchoredQueries {
    pub centroids: Vec<Point>,
    pub aggregator: FeatureAggregator,
    pub refiner: AnchorRefiner,
    pub dim: usize,
    pub pe: PeConfig,
}

impl PositionAnchoredQueries {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        centroids: Vec<Point>,
        dim: usize,
        iterations: usize,
        pe: PeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Config(
                "position-anchored queries need centroids".into(),
            ));
        }
        Ok(PositionAnchoredQueries {
            aggregator: FeatureAggregator::new(store, "query.aggregator", dim, iterations, rng)?,
            refiner: AnchorRefiner::new(store, "query.offsets", dim, rng)?,
            centroids,
            dim,
            pe,
        })
    }

    pub fn generate(&self, g: &mut Graph<'_>, features: Var) -> Result<EventQuerySet> {
        let s0 = g.constant(init_event_slots(&self.centroids, self.dim, self.pe)?);
        let agg = self.aggregator.forward(g, s0, features)?;
        let anchors = self.refiner.forward(g, agg.slots, &self.centroids)?;
        Ok(EventQuerySet {
            embeddings: agg.slots,
            anchors,
            static_anchors: anchors.decoded,
            centroids: self.centroids.clone(),
            attention: agg.attention,
        })
    }
}

/// Free embeddings and anchors, the baseline without a position prior.
#[derive(Debug, Clone, Copy)]
pub struct LearnedQueries {
    pub embed: ParamId,
    pub anchor_logits: ParamId,
}

impl LearnedQueries {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = store.insert_uniform("query.embed", &[n, dim], dim, 1.0, rng)?;
        let mut logits = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c: f64 = rng.random_range(0.05..0.95);
            let d: f64 = rng.random_range(0.05..0.5);
            logits.push(math::inverse_sigmoid(c));
            logits.push(math::inverse_sigmoid(d));
        }
        let anchor_logits =
            store.insert("query.anchor_logits", Tensor::matrix(n, 2, logits)?, true)?;
        Ok(LearnedQueries {
            embed,
            anchor_logits,
        })
    }

    pub fn generate(&self, g: &mut Graph<'_>) -> Result<EventQuerySet> {
        let embeddings = g.param(self.embed);
        let logits = g.param(self.anchor_logits);
        let anchors = Anchors::from_logits(g, logits)?;
        Ok(EventQuerySet {
            embeddings,
            anchors,
            static_anchors: anchors.decoded,
            centroids: Vec::new(),
            attention: Vec::new(),
        })
    }
}

pub struct ProposalLoss {
    pub loss: Var,
    /// `(anchor, ground_truth)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Ground truths left without an anchor; non-zero means warn.
    pub unmatched_ground_truth: usize,
}

/// `1 - gIoU` Hungarian matching of anchors to ground truth, summed over pairs.
pub fn proposal_loss(
    g: &mut Graph<'_>,
    anchors: Var,
    gts: &[TemporalInterval],
) -> Result<ProposalLoss> {
    if gts.is_empty() {
        return Err(Error::Input(
            "proposal loss needs at least one ground-truth event".into(),
        ));
    }
    let boxes = geometry::intervals_from_rows(g.value(anchors));
    let mut cost = Vec::with_capacity(boxes.len() * gts.len());
    for b in &boxes {
        for gt in gts {
            cost.push(1.0 - geometry::giou_1d(b, gt));
        }
    }
    let cost = Tensor::matrix(boxes.len(), gts.len(), cost)?;
    let pairs = matching::hungarian(&cost)?;
    let rows: Vec<Option<usize>> = pairs.iter().map(|p| Some(p.0)).collect();
    let targets: Vec<TemporalInterval> = pairs.iter().map(|p| gts[p.1]).collect();
    let picked = g.gather_rows(anchors, &rows)?;
    let per_pair = geometry::giou_loss(g, picked, &targets)?;
    let loss = g.sum_all(per_pair)?;
    Ok(ProposalLoss {
        loss,
        unmatched_ground_truth: gts.len() - pairs.len(),
        pairs,
    })
}
