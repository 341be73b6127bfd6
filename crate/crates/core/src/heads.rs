//! Localization, event-count and caption heads over decoder outputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::geometry::TemporalInterval;
use crate::graph::{Graph, Var};
use crate::matching;
use crate::math;
use crate::nn::{Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::query::Anchors;
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Initial foreground logit, a prior of roughly 0.1 for every query.
pub const SCORE_PRIOR_LOGIT: f64 = -2.0;

#[derive(Debug, Clone)]
pub struct LocalizationHead {
    pub offsets: Mlp,
    pub score: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct Localized {
    /// Decoded `(center, duration)` rows, `N×2`.
    pub boxes: Var,
    /// Foreground logits, `N×1`.
    pub logits: Var,
}

impl LocalizationHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let score = Linear::new(store, &format!("{name}.score"), dim, 1, rng)?;
        store.value_mut(score.bias.expect("score bias")).data_mut()[0] = SCORE_PRIOR_LOGIT;
        Ok(LocalizationHead {
            offsets: Mlp::new(store, &format!("{name}.offsets"), &[dim, dim, 2], true, rng)?,
            score,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        embeddings: Var,
        anchors: &Anchors,
    ) -> Result<Localized> {
        let off = self.offsets.forward(g, embeddings)?;
        let logits = g.add(anchors.logits, off)?;
        Ok(Localized {
            boxes: g.sigmoid(logits)?,
            logits: self.score.forward(g, embeddings)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountDistribution {
    pub probs: Vec<f64>,
}

impl CountDistribution {
    pub fn max_count(&self) -> usize {
        self.probs.len() - 1
    }

    /// Most likely count; ties go to the larger count.
    pub fn n_select(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p >= self.probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CountHead {
    pub fc: Linear,
}

impl CountHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        max_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_count == 0 {
            return Err(Error::Config(
                "event counter needs a maximum count of at least 1".into(),
            ));
        }
        Ok(CountHead {
            fc: Linear::new(store, name, dim, max_count + 1, rng)?,
        })
    }

    /// Count logits `1×(C_max+1)` from the max-pooled embeddings.
    pub fn forward(&self, g: &mut Graph<'_>, embeddings: Var) -> Result<Var> {
        let pooled = g.max_axis0(embeddings)?;
        self.fc.forward(g, pooled)
    }

    pub fn distribution(g: &Graph<'_>, logits: Var) -> Result<CountDistribution> {
        let p = crate::tensor::softmax_rows(g.value(logits))?;
        Ok(CountDistribution {
            probs: p.data().to_vec(),
        })
    }
}

/// Window-restricted log bias: zero inside the anchor span, Gaussian decay
/// in the distance past either edge with `sigma = duration * sigma_ratio`.
pub fn window_log_weight(position: f64, anchor: &TemporalInterval, sigma_ratio: f64) -> f64 {
    let excess = (position - anchor.center).abs() - anchor.duration / 2.0;
    if excess <= 0.0 {
        return 0.0;
    }
    let sigma = (anchor.duration * sigma_ratio).max(1e-6);
    -(excess * excess) / (2.0 * sigma * sigma)
}

pub const DEFAULT_WINDOW_SIGMA: f64 = 0.25;

/// Differentiable [`window_log_weight`] of decoded anchors `R×2` at every
/// token position, `R×T`.
pub fn window_bias(
    g: &mut Graph<'_>,
    anchors: Var,
    positions: &[f64],
    sigma_ratio: f64,
) -> Result<Var> {
    let a = g.value(anchors);
    if a.cols() != 2 {
        return Err(Error::dim("window_bias", a.shape(), &[a.rows(), 2]));
    }
    let (r, t) = (a.rows(), positions.len());
    let mut value = Vec::with_capacity(r * t);
    let mut partials = Vec::with_capacity(r * t);
    for i in 0..r {
        let (c, d) = (a.get(i, 0), a.get(i, 1));
        let sigma = (d * sigma_ratio).max(1e-6);
        let live = d * sigma_ratio > 1e-6;
        for &x in positions {
            let e = (x - c).abs() - d / 2.0;
            if e <= 0.0 {
                value.push(0.0);
                partials.push((0.0, 0.0));
                continue;
            }
            let s2 = sigma * sigma;
            value.push(-(e * e) / (2.0 * s2));
            let side = if x >= c { 1.0 } else { -1.0 };
            let dc = e / s2 * side;
            let dd = e / (2.0 * s2)
                + if live {
                    e * e * sigma_ratio / (s2 * sigma)
                } else {
                    0.0
                };
            partials.push((dc, dd));
        }
    }
    Ok(g.custom(
        &[anchors],
        Tensor::matrix(r, t, value)?,
        alloc::boxed::Box::new(move |grad, _, _| {
            let mut out = Tensor::zeros(&[r, 2]);
            for i in 0..r {
                let (mut gc, mut gd) = (0.0, 0.0);
                for j in 0..t {
                    let gv = grad.data()[i * t + j];
                    let (dc, dd) = partials[i * t + j];
                    gc += gv * dc;
                    gd += gv * dd;
                }
                out.set(i, 0, gc);
                out.set(i, 1, gd);
            }
            vec![Some(out)]
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptionConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub window_sigma: f64,
}

/// Gated recurrent captioner with anchor-windowed soft attention.
#[derive(Debug, Clone)]
pub struct CaptionHead {
    pub cfg: CaptionConfig,
    pub embed: ParamId,
    pub init: Linear,
    pub gru_x: Linear,
    pub gru_h: Linear,
    pub attn_q: Linear,
    pub attn_k: Linear,
    pub out: Linear,
}

pub struct CaptionOutput {
    /// Stacked step logits, `(steps·R)×vocab`, step-major.
    pub logits: Var,
    pub targets: Vec<Option<usize>>,
    /// Per-step attention `R×T` over memory tokens.
    pub attention: Vec<Var>,
}

struct StepOut {
    h: Var,
    logits: Var,
    attention: Var,
}

impl CaptionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: CaptionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.vocab <= UNK as usize || cfg.max_len == 0 || cfg.hidden == 0 || cfg.attn_dim == 0 {
            return Err(Error::Config(format!(
                "invalid caption head settings {cfg:?}"
            )));
        }
        let h = cfg.hidden;
        let embed = store.insert_normal(&format!("{name}.embed"), &[cfg.vocab, h], 1.0, rng)?;
        Ok(CaptionHead {
            cfg,
            embed,
            init: Linear::new(store, &format!("{name}.init"), dim, h, rng)?,
            gru_x: Linear::new(store, &format!("{name}.gru_x"), h + 2 * dim, 3 * h, rng)?,
            gru_h: Linear::new(store, &format!("{name}.gru_h"), h, 3 * h, rng)?,
            attn_q: Linear::new(store, &format!("{name}.attn_q"), h, cfg.attn_dim, rng)?,
            attn_k: Linear::new(store, &format!("{name}.attn_k"), dim, cfg.attn_dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), 2 * h + dim, cfg.vocab, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        g: &mut Graph<'_>,
        h: Var,
        word: Var,
        events: Var,
        keys: Var,
        bias: Var,
        memory: Var,
    ) -> Result<StepOut> {
        let hs = self.cfg.hidden;
        let q = self.attn_q.forward(g, h)?;
        let logits = g.matmul_nt(q, keys)?;
        let logits = g.scale(logits, 1.0 / math::sqrt(self.cfg.attn_dim as f64))?;
        let logits = g.add(logits, bias)?;
        let attention = g.softmax_rows(logits)?;
        let z = g.matmul(attention, memory)?;
        let x = g.concat_cols(&[word, z, events])?;
        let gx = self.gru_x.forward(g, x)?;
        let gh = self.gru_h.forward(g, h)?;
        let (xr, xz, xn) = (
            g.slice_cols(gx, 0, hs)?,
            g.slice_cols(gx, hs, hs)?,
            g.slice_cols(gx, 2 * hs, hs)?,
        );
        let (hr, hz, hn) = (
            g.slice_cols(gh, 0, hs)?,
            g.slice_cols(gh, hs, hs)?,
            g.slice_cols(gh, 2 * hs, hs)?,
        );
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let u = g.add(xz, hz)?;
        let u = g.sigmoid(u)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n)?;
        let keep = g.one_minus(u)?;
        let a = g.mul(keep, n)?;
        let b = g.mul(u, h)?;
        let h = g.add(a, b)?;
        let hzw = g.concat_cols(&[h, z, word])?;
        let logits = self.out.forward(g, hzw)?;
        Ok(StepOut {
            h,
            logits,
            attention,
        })
    }

    fn start(
        &self,
        g: &mut Graph<'_>,
        events: Var,
        anchors: Var,
        memory: &MultiScaleFeatures,
    ) -> Result<(Var, Var, Var)> {
        if g.value(events).rows() != g.value(anchors).rows() {
            return Err(Error::dim(
                "caption_event",
                g.shape(events),
                g.shape(anchors),
            ));
        }
        let h0 = self.init.forward(g, events)?;
        let h0 = g.tanh(h0)?;
        let keys = self.attn_k.forward(g, memory.tokens)?;
        let bias = window_bias(
            g,
            anchors,
            &memory.layout.positions(),
            self.cfg.window_sigma,
        )?;
        Ok((h0, keys, bias))
    }

    fn embed_tokens(&self, g: &mut Graph<'_>, tokens: &[u32]) -> Result<Var> {
        let idx = tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.cfg.vocab {
                    Ok(Some(t as usize))
                } else {
                    Err(Error::Vocabulary(t as usize))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let table = g.param(self.embed);
        g.gather_rows(table, &idx)
    }

    /// Teacher-forced logits for one caption per event row. `anchors` are
    /// decoded `(c, d)` rows. Captions are content tokens only; BOS and EOS
    /// are added here.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<'_>,
        events: Var,
        anchors: Var,
        memory: &MultiScaleFeatures,
        captions: &[Vec<u32>],
    ) -> Result<CaptionOutput> {
        if captions.len() != g.value(anchors).rows() {
            return Err(Error::dim(
                "caption_event",
                &[captions.len()],
                g.shape(anchors),
            ));
        }
        let longest = captions.iter().map(Vec::len).max().unwrap_or(0);
        let steps = (longest + 1).min(self.cfg.max_len);
        let (mut h, keys, bias) = self.start(g, events, anchors, memory)?;
        let mut logits = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * captions.len());
        let mut attention = Vec::with_capacity(steps);
        for t in 0..steps {
            let inputs: Vec<u32> = captions
                .iter()
                .map(|c| {
                    if t == 0 {
                        BOS
                    } else {
                        c.get(t - 1).copied().unwrap_or(PAD)
                    }
                })
                .collect();
            for c in captions {
                let tgt = match t.cmp(&c.len()) {
                    core::cmp::Ordering::Less => Some(c[t] as usize),
                    core::cmp::Ordering::Equal => Some(EOS as usize),
                    core::cmp::Ordering::Greater => None,
                };
                if let Some(v) = tgt {
                    if v >= self.cfg.vocab {
                        return Err(Error::Vocabulary(v));
                    }
                }
                targets.push(tgt);
            }
            let word = self.embed_tokens(g, &inputs)?;
            let out = self.step(g, h, word, events, keys, bias, memory.tokens)?;
            h = out.h;
            logits.push(out.logits);
            attention.push(out.attention);
        }
        Ok(CaptionOutput {
            logits: g.concat_rows(&logits)?,
            targets,
            attention,
        })
    }

    /// Greedy decoding; returned captions exclude BOS and EOS.
    pub fn greedy(
        &self,
        g: &mut Graph<'_>,
        events: Var,
        anchors: Var,
        memory: &MultiScaleFeatures,
    ) -> Result<Vec<Vec<u32>>> {
        let r = g.value(anchors).rows();
        let (mut h, keys, bias) = self.start(g, events, anchors, memory)?;
        let mut prev = vec![BOS; r];
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); r];
        let mut done = vec![false; r];
        for _ in 0..self.cfg.max_len {
            let word = self.embed_tokens(g, &prev)?;
            let s = self.step(g, h, word, events, keys, bias, memory.tokens)?;
            h = s.h;
            let l = g.value(s.logits);
            for i in 0..r {
                let row = l.row(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                let tok = best as u32;
                if !done[i] {
                    if tok == EOS {
                        done[i] = true;
                    } else {
                        out[i].push(tok);
                    }
                }
                prev[i] = tok;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    pub fn loss(g: &mut Graph<'_>, out: &CaptionOutput) -> Result<Var> {
        matching::cross_entropy(g, out.logits, &out.targets)
    }

    /// `(correct, counted)` argmax matches over the non-padded targets.
    pub fn token_accuracy(g: &Graph<'_>, out: &CaptionOutput) -> (usize, usize) {
        let l = g.value(out.logits);
        let mut correct = 0;
        let mut total = 0;
        for (r, t) in out.targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = l.row(r);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                total += 1;
                correct += usize::from(best == t);
            }
        }
        (correct, total)
    }
}
