//! Multi-scale temporal encoder: frame rescaling, the strided convolution
//! pyramid and stacked deformable self-attention layers.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{Init, LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::pe::{self, PeConfig};
use crate::tensor::Tensor;

/// Linear interpolation along time from `T` rows to `target_len` rows,
/// aligning the first and last frames.
pub fn rescale_frames(features: &Tensor, target_len: usize) -> Result<Tensor> {
    let t = features.rows();
    if t == 0 || target_len == 0 {
        return Err(Error::Input(format!(
            "cannot rescale {t} frames to {target_len}"
        )));
    }
    if t == target_len {
        return Ok(features.clone());
    }
    let d = features.cols();
    let mut data = Vec::with_capacity(target_len * d);
    for i in 0..target_len {
        let x = if target_len == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (target_len - 1) as f64
        };
        let i0 = (math::floor(x) as usize).min(t - 1);
        let i1 = (i0 + 1).min(t - 1);
        let w = x - i0 as f64;
        for c in 0..d {
            data.push((1.0 - w) * features.get(i0, c) + w * features.get(i1, c));
        }
    }
    Tensor::matrix(target_len, d, data)
}

/// Token layout of a pyramid flattened scale by scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleLayout {
    pub lengths: Vec<usize>,
    pub starts: Vec<usize>,
}

impl ScaleLayout {
    pub fn new(frames: usize, scales: usize) -> Result<Self> {
        if scales == 0 {
            return Err(Error::Config("need at least one scale".into()));
        }
        let div = 1usize << (scales - 1);
        if frames == 0 || !frames.is_multiple_of(div) {
            let minimal = frames.div_ceil(div).max(1) * div;
            return Err(Error::Config(format!(
                "frame count {frames} is not divisible by 2^(H-1) = {div}; nearest valid length is {minimal}"
            )));
        }
        let lengths: Vec<usize> = (0..scales).map(|i| frames >> i).collect();
        let mut starts = Vec::with_capacity(scales);
        let mut acc = 0;
        for &l in &lengths {
            starts.push(acc);
            acc += l;
        }
        Ok(ScaleLayout { lengths, starts })
    }

    pub fn scales(&self) -> usize {
        self.lengths.len()
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Normalized position `(t + 0.5) / L` of every flattened token.
    pub fn positions(&self) -> Vec<f64> {
        self.lengths
            .iter()
            .flat_map(|&l| (0..l).map(move |t| (t as f64 + 0.5) / l as f64))
            .collect()
    }

    pub fn level_of(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(s, &l)| core::iter::repeat_n(s, l))
            .collect()
    }
}

/// Multi-scale features bound to a graph: tokens are flattened `T×D`.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub layout: ScaleLayout,
    pub tokens: Var,
}

impl MultiScaleFeatures {
    pub fn level(&self, g: &mut Graph<'_>, i: usize) -> Result<Var> {
        g.slice_rows(self.tokens, self.layout.starts[i], self.layout.lengths[i])
    }
}

/// Where a query samples from.
#[derive(Debug, Clone)]
pub enum Reference {
    /// Fixed normalized positions; offsets are in frames of each scale.
    Fixed(Vec<f64>),
    /// Decoded `(center, duration)` rows; offsets scale with the duration.
    Anchors(Var),
}

#[derive(Clone, Copy)]
struct Sample {
    i0: usize,
    i1: usize,
    frac: f64,
    live: bool,
}

/// Samples per-head value features at `reference + offset` by linear
/// interpolation and sums them with the given attention weights.
///
/// `offsets` and `weights` are `Q×(heads·scales·points)` with column
/// `(h·S + s)·P + p`; `values` is the flattened `T×D` token matrix.
#[allow(clippy::too_many_arguments)]
pub fn deform_sample(
    g: &mut Graph<'_>,
    offsets: Var,
    weights: Var,
    values: Var,
    layout: &ScaleLayout,
    reference: &Reference,
    heads: usize,
    points: usize,
) -> Result<Var> {
    let (off, w, val) = (g.value(offsets), g.value(weights), g.value(values));
    let q = off.rows();
    let s_count = layout.scales();
    let width = heads * s_count * points;
    if off.cols() != width || w.cols() != width || w.rows() != q {
        return Err(Error::dim("deform_sample", off.shape(), w.shape()));
    }
    if val.rows() != layout.total() || val.cols() % heads != 0 {
        return Err(Error::dim(
            "deform_sample",
            val.shape(),
            &[layout.total(), heads],
        ));
    }
    let d = val.cols();
    let dh = d / heads;
    let refs: Vec<(f64, f64)> = match reference {
        Reference::Fixed(p) => {
            if p.len() != q {
                return Err(Error::dim("deform_sample", &[p.len()], &[q]));
            }
            p.iter().map(|&c| (c, 0.0)).collect()
        }
        Reference::Anchors(a) => {
            let a = g.value(*a);
            if a.rows() != q || a.cols() != 2 {
                return Err(Error::dim("deform_sample", a.shape(), &[q, 2]));
            }
            (0..q).map(|r| (a.get(r, 0), a.get(r, 1))).collect()
        }
    };
    let anchored = matches!(reference, Reference::Anchors(_));
    let mut out = vec![0.0; q * d];
    let mut samples = Vec::with_capacity(q * width);
    for qi in 0..q {
        let (c, dur) = refs[qi];
        for h in 0..heads {
            for s in 0..s_count {
                let len = layout.lengths[s];
                let base = layout.starts[s];
                for p in 0..points {
                    let col = (h * s_count + s) * points + p;
                    let o = off.get(qi, col);
                    let loc = if anchored {
                        c + o * dur * 0.5 / points as f64
                    } else {
                        c + o / len as f64
                    };
                    let u = loc * len as f64 - 0.5;
                    let max = (len - 1) as f64;
                    let live = u > 0.0 && u < max;
                    let uc = u.clamp(0.0, max);
                    let i0 = (math::floor(uc) as usize).min(len - 1);
                    let i1 = (i0 + 1).min(len - 1);
                    let frac = uc - i0 as f64;
                    let wt = w.get(qi, col);
                    let r0 = val.row(base + i0);
                    let r1 = val.row(base + i1);
                    let orow = &mut out[qi * d + h * dh..qi * d + (h + 1) * dh];
                    for k in 0..dh {
                        let x = (1.0 - frac) * r0[h * dh + k] + frac * r1[h * dh + k];
                        orow[k] += wt * x;
                    }
                    samples.push(Sample {
                        i0: base + i0,
                        i1: base + i1,
                        frac,
                        live,
                    });
                }
            }
        }
    }
    let value = Tensor::matrix(q, d, out)?;
    let mut inputs = vec![offsets, weights, values];
    if let Reference::Anchors(a) = reference {
        inputs.push(*a);
    }
    let lengths = layout.lengths.clone();
    Ok(g.custom(
        &inputs,
        value,
        Box::new(move |grad, x, _| {
            let (off, w, val) = (x[0], x[1], x[2]);
            let mut g_off = Tensor::zeros(off.shape());
            let mut g_w = Tensor::zeros(w.shape());
            let mut g_val = Tensor::zeros(val.shape());
            let mut g_anchor = if anchored {
                Some(Tensor::zeros(&[q, 2]))
            } else {
                None
            };
            let mut idx = 0;
            for qi in 0..q {
                let (_, dur) = refs[qi];
                let grow = grad.row(qi);
                for h in 0..heads {
                    for s in 0..s_count {
                        let len = lengths[s] as f64;
                        for p in 0..points {
                            let col = (h * s_count + s) * points + p;
                            let sm = samples[idx];
                            idx += 1;
                            let wt = w.get(qi, col);
                            let mut dw = 0.0;
                            let mut dfrac = 0.0;
                            for k in 0..dh {
                                let c = h * dh + k;
                                let v0 = val.get(sm.i0, c);
                                let v1 = val.get(sm.i1, c);
                                let gk = grow[c];
                                dw += gk * ((1.0 - sm.frac) * v0 + sm.frac * v1);
                                dfrac += gk * (v1 - v0);
                                let gv = g_val.data_mut();
                                gv[sm.i0 * d + c] += wt * (1.0 - sm.frac) * gk;
                                gv[sm.i1 * d + c] += wt * sm.frac * gk;
                            }
                            g_w.set(qi, col, dw);
                            if sm.live {
                                let dloc = wt * dfrac * len;
                                if let Some(ga) = g_anchor.as_mut() {
                                    let o = off.get(qi, col);
                                    let k = 0.5 / points as f64;
                                    g_off.set(qi, col, dloc * dur * k);
                                    let gd = ga.data_mut();
                                    gd[qi * 2] += dloc;
                                    gd[qi * 2 + 1] += dloc * o * k;
                                } else {
                                    g_off.set(qi, col, dloc / len);
                                }
                            }
                        }
                    }
                }
            }
            let mut v = vec![Some(g_off), Some(g_w), Some(g_val)];
            if let Some(ga) = g_anchor {
                v.push(Some(ga));
            }
            v
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformConfig {
    pub dim: usize,
    pub heads: usize,
    pub scales: usize,
    pub points: usize,
}

/// Multi-head, multi-scale deformable attention.
#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub cfg: DeformConfig,
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub output: Linear,
}

pub struct DeformOutput {
    pub out: Var,
    /// `Q×(heads·scales·points)` normalized weights.
    pub attention: Var,
}

impl DeformableAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: DeformConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                cfg.dim, cfg.heads
            )));
        }
        let width = cfg.heads * cfg.scales * cfg.points;
        let offsets = Linear::with_init(
            store,
            &format!("{name}.offsets"),
            cfg.dim,
            width,
            Init::Zeros,
            true,
            rng,
        )?;
        // Head h samples to one side of the reference, point p at p + 1/2 frames.
        let bias = store.value_mut(offsets.bias.expect("offset bias"));
        for h in 0..cfg.heads {
            let sign = if h % 2 == 0 { 1.0 } else { -1.0 };
            for s in 0..cfg.scales {
                for p in 0..cfg.points {
                    bias.data_mut()[(h * cfg.scales + s) * cfg.points + p] =
                        sign * (p as f64 + 0.5);
                }
            }
        }
        let weights = Linear::with_init(
            store,
            &format!("{name}.weights"),
            cfg.dim,
            width,
            Init::Zeros,
            true,
            rng,
        )?;
        Ok(DeformableAttention {
            cfg,
            offsets,
            weights,
            value: Linear::new(store, &format!("{name}.value"), cfg.dim, cfg.dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), cfg.dim, cfg.dim, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        values: &MultiScaleFeatures,
        reference: &Reference,
    ) -> Result<DeformOutput> {
        let c = self.cfg;
        let q = g.value(query).rows();
        let off = self.offsets.forward(g, query)?;
        let logits = self.weights.forward(g, query)?;
        let grouped = g.reshape(logits, &[q * c.heads, c.scales * c.points])?;
        let attn = g.softmax_rows(grouped)?;
        let attn = g.reshape(attn, &[q, c.heads * c.scales * c.points])?;
        let v = self.value.forward(g, values.tokens)?;
        let sampled = deform_sample(
            g,
            off,
            attn,
            v,
            &values.layout,
            reference,
            c.heads,
            c.points,
        )?;
        let out = self.output.forward(g, sampled)?;
        Ok(DeformOutput {
            out,
            attention: attn,
        })
    }
}

/// Stride-1 projection for the finest scale and stride-2, kernel-3
/// convolutions for every coarser one.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub input: Linear,
    pub input_norm: LayerNorm,
    pub convs: Vec<(Linear, LayerNorm)>,
}

impl Pyramid {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        scales: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), dim, dim, rng)?;
        let input_norm = LayerNorm::new(store, &format!("{name}.input_norm"), dim)?;
        let mut convs = Vec::new();
        for i in 1..scales {
            let conv = Linear::new(store, &format!("{name}.conv{i}"), 3 * dim, dim, rng)?;
            let norm = LayerNorm::new(store, &format!("{name}.conv{i}_norm"), dim)?;
            convs.push((conv, norm));
        }
        Ok(Pyramid {
            input,
            input_norm,
            convs,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        frames: Var,
        layout: &ScaleLayout,
    ) -> Result<MultiScaleFeatures> {
        let v = g.value(frames).rows();
        if v != layout.lengths[0] || layout.scales() != self.convs.len() + 1 {
            return Err(Error::dim(
                "downsample_pyramid",
                g.shape(frames),
                &[layout.lengths[0]],
            ));
        }
        let dim = g.value(frames).cols();
        let x = self.input.forward(g, frames)?;
        let mut level = self.input_norm.forward(g, x)?;
        let mut levels = vec![level];
        for (i, (conv, norm)) in self.convs.iter().enumerate() {
            let out_len = layout.lengths[i + 1];
            let in_len = layout.lengths[i];
            let mut idx = Vec::with_capacity(out_len * 3);
            for t in 0..out_len {
                for k in 0..3 {
                    let src = (2 * t + k) as isize - 1;
                    idx.push((src >= 0 && (src as usize) < in_len).then_some(src as usize));
                }
            }
            let cols = g.gather_rows(level, &idx)?;
            let cols = g.reshape(cols, &[out_len, 3 * dim])?;
            let y = conv.forward(g, cols)?;
            level = norm.forward(g, y)?;
            levels.push(level);
        }
        let tokens = g.concat_rows(&levels)?;
        Ok(MultiScaleFeatures {
            layout: layout.clone(),
            tokens,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: DeformableAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: DeformConfig,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: DeformableAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                &[cfg.dim, ffn_dim, cfg.dim],
                false,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: &MultiScaleFeatures,
        pos: Var,
        positions: &[f64],
    ) -> Result<MultiScaleFeatures> {
        let q = g.add(x.tokens, pos)?;
        let a = self
            .attn
            .forward(g, q, x, &Reference::Fixed(positions.to_vec()))?;
        let y = g.add(x.tokens, a.out)?;
        let y = self.norm1.forward(g, y)?;
        let f = self.ffn.forward(g, y)?;
        let z = g.add(y, f)?;
        let z = self.norm2.forward(g, z)?;
        Ok(MultiScaleFeatures {
            layout: x.layout.clone(),
            tokens: z,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub frames: usize,
    pub scales: usize,
    pub heads: usize,
    pub points: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub pe: PeConfig,
    /// Add sinusoidal token positions to the attention queries.
    pub positional: bool,
}

#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub cfg: EncoderConfig,
    pub layout: ScaleLayout,
    pub pyramid: Pyramid,
    pub level_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
}

/// Pyramid features before the encoder stack, and the encoded output.
pub struct Encoded {
    pub pyramid: MultiScaleFeatures,
    pub encoded: MultiScaleFeatures,
}

impl VideoEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = ScaleLayout::new(cfg.frames, cfg.scales)?;
        let pyramid = Pyramid::new(store, "encoder.pyramid", cfg.dim, cfg.scales, rng)?;
        let level_embed = store.insert_uniform(
            "encoder.level_embed",
            &[cfg.scales, cfg.dim],
            cfg.dim,
            1.0,
            rng,
        )?;
        let dcfg = DeformConfig {
            dim: cfg.dim,
            heads: cfg.heads,
            scales: cfg.scales,
            points: cfg.points,
        };
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::new(store, &format!("encoder.layer{l}"), dcfg, cfg.ffn_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(VideoEncoder {
            cfg,
            layout,
            pyramid,
            level_embed,
            layers,
        })
    }

    /// Sinusoidal token positions plus the learned per-scale embedding.
    pub fn query_embedding(&self, g: &mut Graph<'_>) -> Result<Var> {
        let positions = self.layout.positions();
        let n = positions.len();
        let pos = if self.cfg.positional {
            pe::encode_coords(&Tensor::matrix(n, 1, positions)?, self.cfg.dim, self.cfg.pe)?
        } else {
            Tensor::zeros(&[n, self.cfg.dim])
        };
        let pos = g.constant(pos);
        let levels: Vec<Option<usize>> = self.layout.level_of().into_iter().map(Some).collect();
        let table = g.param(self.level_embed);
        let lvl = g.gather_rows(table, &levels)?;
        g.add(pos, lvl)
    }

    pub fn encode(&self, g: &mut Graph<'_>, frames: Var) -> Result<Encoded> {
        let pyramid = self.pyramid.forward(g, frames, &self.layout)?;
        let mut x = pyramid.clone();
        if !self.layers.is_empty() {
            let pos = self.query_embedding(g)?;
            let positions = self.layout.positions();
            for layer in &self.layers {
                x = layer.forward(g, &x, pos, &positions)?;
            }
        }
        Ok(Encoded {
            pyramid,
            encoded: x,
        })
    }
}
