//! Relation-enhanced decoder: pairwise anchor relations bias the query
//! self-attention, then deformable cross-attention reads the encoded video.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::{DeformConfig, DeformableAttention, MultiScaleFeatures, Reference};
use crate::error::{Error, Result};
use crate::geometry::{self, RelationMetric};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::pe::{self, PeConfig};
use crate::query::{Anchors, EventQuerySet};

/// Pointwise encoder from the `(N·N)×2` relation matrix to one additive
/// bias per attention head.
#[derive(Debug, Clone)]
pub struct RelationEncoder {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub embed_dim: usize,
    pub pe: PeConfig,
}

impl RelationEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        heads: usize,
        pe: PeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if heads < 2 {
            return Err(Error::Config(
                "relation mask needs at least two heads to normalise".into(),
            ));
        }
        Ok(RelationEncoder {
            proj: Linear::new(store, &format!("{name}.proj"), 2 * embed_dim, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), heads)?,
            embed_dim,
            pe,
        })
    }

    /// `(N·N)×2 -> (N·N)×M`, row `i·N + j` biasing query `i` attending to `j`.
    pub fn forward(&self, g: &mut Graph<'_>, relations: Var) -> Result<Var> {
        let e = pe::sinusoidal(g, relations, self.embed_dim, self.pe)?;
        let y = self.proj.forward(g, e)?;
        let y = self.norm.forward(g, y)?;
        g.relu(y)
    }

    /// Parameters whose zeroing makes the mask identically zero.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v = self.proj.params();
        v.push(self.norm.beta);
        v
    }
}

/// `MLP(PE(anchor))`, the static positional term added to queries and keys.
#[derive(Debug, Clone)]
pub struct StaticAnchorProjection {
    pub mlp: Mlp,
    pub dim: usize,
    pub pe: PeConfig,
}

impl StaticAnchorProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        pe: PeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "model width {dim} must be a multiple of 4"
            )));
        }
        Ok(StaticAnchorProjection {
            mlp: Mlp::new(store, name, &[dim, dim, dim], false, rng)?,
            dim,
            pe,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, anchors: Var) -> Result<Var> {
        let e = pe::sinusoidal(g, anchors, self.dim / 2, self.pe)?;
        self.mlp.forward(g, e)
    }
}

#[derive(Debug, Clone)]
pub struct RelationSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct SelfAttentionOutput {
    /// Output including the residual, before normalisation.
    pub out: Var,
    /// Per-head `N×N` attention maps.
    pub maps: Vec<Var>,
}

impl RelationSelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(RelationSelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    /// `mask` is `(N·N)×heads` or absent.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        embeddings: Var,
        static_pos: Var,
        mask: Option<Var>,
    ) -> Result<SelfAttentionOutput> {
        let (n, dim) = (g.value(embeddings).rows(), g.value(embeddings).cols());
        if g.shape(static_pos) != g.shape(embeddings) {
            return Err(Error::dim(
                "relation_self_attention",
                g.shape(embeddings),
                g.shape(static_pos),
            ));
        }
        if let Some(m) = mask {
            if g.shape(m) != [n * n, self.heads] {
                return Err(Error::dim(
                    "relation_self_attention",
                    g.shape(m),
                    &[n * n, self.heads],
                ));
            }
        }
        let qk_in = g.add(embeddings, static_pos)?;
        let q = self.q.forward(g, qk_in)?;
        let k = self.k.forward(g, qk_in)?;
        let v = self.v.forward(g, embeddings)?;
        let hd = dim / self.heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut heads = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let logits = g.matmul_nt(qh, kh)?;
            let mut logits = g.scale(logits, scale)?;
            if let Some(m) = mask {
                let col = g.slice_cols(m, h, 1)?;
                let bias = g.reshape(col, &[n, n])?;
                logits = g.add(logits, bias)?;
            }
            let a = g.softmax_rows(logits)?;
            maps.push(a);
            heads.push(g.matmul(a, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let o = self.out.forward(g, cat)?;
        Ok(SelfAttentionOutput {
            out: g.add(o, embeddings)?,
            maps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub scales: usize,
    pub points: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Sinusoidal width per relation channel.
    pub relation_dim: usize,
    pub relation: bool,
    pub metric: RelationMetric,
    pub pe: PeConfig,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub relation: Option<RelationEncoder>,
    pub self_attn: RelationSelfAttention,
    pub norm1: LayerNorm,
    pub cross: DeformableAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
    pub refine: Mlp,
    pub metric: RelationMetric,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub layer: usize,
    pub embeddings: Var,
    pub anchors: Anchors,
}

/// Intermediate maps kept for inspection.
pub struct LayerTrace {
    pub relation_mask: Option<Var>,
    pub self_attention: Vec<Var>,
    pub cross_attention: Var,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let relation = if cfg.relation {
            Some(RelationEncoder::new(
                store,
                &format!("{name}.relation"),
                cfg.relation_dim,
                cfg.heads,
                cfg.pe,
                rng,
            )?)
        } else {
            None
        };
        let dcfg = DeformConfig {
            dim: cfg.dim,
            heads: cfg.heads,
            scales: cfg.scales,
            points: cfg.points,
        };
        Ok(DecoderLayer {
            relation,
            self_attn: RelationSelfAttention::new(
                store,
                &format!("{name}.self_attn"),
                cfg.dim,
                cfg.heads,
                rng,
            )?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            cross: DeformableAttention::new(store, &format!("{name}.cross"), dcfg, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                &[cfg.dim, cfg.ffn_dim, cfg.dim],
                false,
                rng,
            )?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), cfg.dim)?,
            refine: Mlp::new(
                store,
                &format!("{name}.refine"),
                &[cfg.dim, cfg.dim, 2],
                true,
                rng,
            )?,
            metric: cfg.metric,
        })
    }

    /// Relation mask for the given decoded anchors, if this layer has one.
    pub fn relation_mask(&self, g: &mut Graph<'_>, anchors: Var) -> Result<Option<Var>> {
        match &self.relation {
            Some(enc) => {
                let r = geometry::relation_matrix(g, anchors, self.metric)?;
                Ok(Some(enc.forward(g, r)?))
            }
            None => Ok(None),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        state: &DecoderState,
        static_pos: Var,
        memory: &MultiScaleFeatures,
    ) -> Result<(DecoderState, LayerTrace)> {
        let mask = self.relation_mask(g, state.anchors.decoded)?;
        let sa = self
            .self_attn
            .forward(g, state.embeddings, static_pos, mask)?;
        let e = self.norm1.forward(g, sa.out)?;
        let ca = self
            .cross
            .forward(g, e, memory, &Reference::Anchors(state.anchors.decoded))?;
        let e = g.add(e, ca.out)?;
        let e = self.norm2.forward(g, e)?;
        let f = self.ffn.forward(g, e)?;
        let e = g.add(e, f)?;
        let e = self.norm3.forward(g, e)?;
        let off = self.refine.forward(g, e)?;
        let logits = g.add(state.anchors.logits, off)?;
        let next = DecoderState {
            layer: state.layer + 1,
            embeddings: e,
            anchors: Anchors::from_logits(g, logits)?,
        };
        Ok((
            next,
            LayerTrace {
                relation_mask: mask,
                self_attention: sa.maps,
                cross_attention: ca.attention,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct RelationDecoder {
    pub cfg: DecoderConfig,
    pub static_proj: StaticAnchorProjection,
    pub layers: Vec<DecoderLayer>,
}

pub struct Decoded {
    /// One state per layer, the last one feeds the heads.
    pub states: Vec<DecoderState>,
    pub traces: Vec<LayerTrace>,
    pub static_pos: Var,
}

impl RelationDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let static_proj =
            StaticAnchorProjection::new(store, "decoder.static_proj", cfg.dim, cfg.pe, rng)?;
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, &format!("decoder.layer{l}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(RelationDecoder {
            cfg,
            static_proj,
            layers,
        })
    }

    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        queries: &EventQuerySet,
        memory: &MultiScaleFeatures,
    ) -> Result<Decoded> {
        let static_pos = self.static_proj.forward(g, queries.static_anchors)?;
        let mut state = DecoderState {
            layer: 0,
            embeddings: queries.embeddings,
            anchors: queries.anchors,
        };
        let mut states = Vec::with_capacity(self.layers.len());
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, trace) = layer.forward(g, &state, static_pos, memory)?;
            states.push(next);
            traces.push(trace);
            state = next;
        }
        Ok(Decoded {
            states,
            traces,
            static_pos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn mask_shape_and_range() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let enc =
            RelationEncoder::new(&mut store, "rel", 16, 8, PeConfig::default(), &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::matrix(3, 2, vec![0.25, 0.5, 0.75, 0.5, 0.5, 0.2]).unwrap());
        let r = geometry::relation_matrix(&mut g, a, RelationMetric::Overlap).unwrap();
        let m = enc.forward(&mut g, r).unwrap();
        let m = g.value(m);
        assert_eq!(m.shape(), &[9, 8]);
        assert!(m.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_mask_matches_no_mask() {
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        let sa = RelationSelfAttention::new(&mut store, "sa", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let e = g.constant(
            Tensor::new(vec![3, 8], (0..24).map(|i| math::cos(i as f64)).collect()).unwrap(),
        );
        let p = g.constant(
            Tensor::new(
                vec![3, 8],
                (0..24).map(|i| math::sin(i as f64 * 0.3)).collect(),
            )
            .unwrap(),
        );
        let zero = g.constant(Tensor::zeros(&[9, 2]));
        let a = sa.forward(&mut g, e, p, Some(zero)).unwrap();
        let b = sa.forward(&mut g, e, p, None).unwrap();
        assert_eq!(g.value(a.out), g.value(b.out));
    }
}
