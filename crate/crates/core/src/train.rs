//! Single-video training steps with Adam.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kmeans::{self, ClusterModel, Point};
use crate::matching::LossReport;
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::synth::SyntheticVideo;

/// Clusters every ground-truth `(c, d)` of the training split into `k`
/// centroids ordered by center.
pub fn fit_centroids(videos: &[SyntheticVideo], k: usize, seed: u64) -> Result<ClusterModel> {
    let points: Vec<Point> = videos
        .iter()
        .flat_map(|v| {
            v.events
                .iter()
                .map(|e| [e.interval.center, e.interval.duration])
        })
        .collect();
    let mut m = kmeans::fit_kmeans(&points, k, seed, 300)?;
    kmeans::sort_by_center(&mut m.centroids);
    Ok(m)
}

/// Video visiting order of an epoch, reproducible from the seed.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::substream(seed ^ 0x5eed_0f_e90c, epoch as u64);
    order.shuffle(&mut r);
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
    pub caption_correct: usize,
    pub caption_total: usize,
    pub unmatched_proposals: usize,
    pub count_clamped: bool,
}

enum AdamSlot<'a> {
    Owned(Adam),
    Borrowed(&'a mut Adam),
}

pub struct Trainer<'m> {
    pub model: &'m Model,
    adam: AdamSlot<'m>,
    steps: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, store: &ParamStore, config: AdamConfig) -> Self {
        Trainer {
            model,
            adam: AdamSlot::Owned(Adam::new(store, config)),
            steps: 0,
        }
    }

    /// Continues with optimizer state owned by the caller.
    pub fn resume(model: &'m Model, adam: &'m mut Adam, steps: usize) -> Self {
        Trainer {
            model,
            adam: AdamSlot::Borrowed(adam),
            steps,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, video: &SyntheticVideo) -> Result<StepRecord> {
        let (grads, out) = {
            let mut g = Graph::new(store);
            let fwd = self.model.forward(&mut g, &video.features)?;
            let out = self.model.loss(&mut g, &fwd, &video.events)?;
            (g.backward(out.total)?, out)
        };
        match &mut self.adam {
            AdamSlot::Owned(a) => a.step(store, &grads),
            AdamSlot::Borrowed(a) => a.step(store, &grads),
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.value.all_finite()) {
            return Err(Error::NonFinite {
                param: p.name.clone(),
            });
        }
        self.steps += 1;
        Ok(StepRecord {
            step: self.steps,
            report: out.report,
            caption_correct: out.caption_accuracy.0,
            caption_total: out.caption_accuracy.1,
            unmatched_proposals: out.unmatched_proposals,
            count_clamped: out.count_clamped,
        })
    }
}

/// Toy dimensions for the whole-pipeline gradient check.
pub fn toy_config() -> crate::model::ModelConfig {
    let mut c = crate::model::ModelConfig::with_dim(8);
    c.frames = 16;
    c.scales = 2;
    c.queries = 4;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.heads = 2;
    c.points = 2;
    c.max_count = 4;
    c.vocab = 16;
    c.max_caption_len = 6;
    c
}

/// A three-event video whose captions fit the toy vocabulary.
pub fn toy_video(seed: u64, frames: usize, dim: usize) -> Result<SyntheticVideo> {
    use crate::geometry::TemporalInterval;
    use crate::synth::Event;
    use rand::Rng;
    let mut r = rng::seeded(seed);
    let spans = [(0.1, 0.35), (0.35, 0.8), (0.5, 0.7)];
    let events = spans
        .iter()
        .map(|&(s, e)| {
            let len = r.random_range(3..=5usize);
            Ok(Event {
                interval: TemporalInterval::from_bounds(s, e)?,
                tokens: (0..len).map(|_| r.random_range(4..16u32)).collect(),
                archetype: None,
                partner: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = (0..frames * dim)
        .map(|_| rng::normal(&mut r, 0.0, 1.0))
        .collect();
    Ok(SyntheticVideo {
        id: alloc::string::String::from("toy"),
        regime: None,
        features: crate::tensor::Tensor::matrix(frames, dim, data)?,
        events,
    })
}

/// Builds the toy model, jitters every parameter away from its structured
/// initialisation and checks the gradient of the total training loss.
pub fn pipeline_grad_check(
    seed: u64,
    cfg: crate::model::ModelConfig,
    check: crate::gradcheck::GradCheckConfig,
) -> Result<crate::gradcheck::GradCheckReport> {
    let video = toy_video(seed, cfg.frames, cfg.dim)?;
    let centroids = fit_centroids(core::slice::from_ref(&video), cfg.queries, seed)?;
    let mut store = ParamStore::new();
    let mut r = rng::seeded(seed.wrapping_add(1));
    let model = Model::new(&mut store, cfg, Some(&centroids.centroids), &mut r)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng::normal(&mut r, 0.0, 0.1);
        }
    }
    crate::gradcheck::grad_check(&mut store, check, |g| {
        let fwd = model.forward(g, &video.features)?;
        Ok(model.loss(g, &fwd, &video.events)?.total)
    })
}
