//! One-dimensional interval geometry on normalized video time.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;

/// An event span stored as `(center, duration)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalInterval {
    pub center: f64,
    pub duration: f64,
}

impl TemporalInterval {
    pub fn new(center: f64, duration: f64) -> Result<Self> {
        if !(duration > 0.0) || !center.is_finite() || !duration.is_finite() {
            return Err(Error::Domain(format!(
                "interval needs finite center and positive duration, got ({center}, {duration})"
            )));
        }
        Ok(TemporalInterval { center, duration })
    }

    pub fn from_bounds(start: f64, end: f64) -> Result<Self> {
        if !(end > start) {
            return Err(Error::Domain(format!(
                "interval bounds [{start}, {end}] are not increasing"
            )));
        }
        Self::new((start + end) / 2.0, end - start)
    }

    pub fn start(&self) -> f64 {
        self.center - self.duration / 2.0
    }

    pub fn end(&self) -> f64 {
        self.center + self.duration / 2.0
    }

    /// Clips to `[0, 1]`; keeps a minimal positive width.
    pub fn clamped(&self) -> Self {
        let s = self.start().clamp(0.0, 1.0);
        let e = self.end().clamp(0.0, 1.0);
        let (s, e) = if e - s < 1e-6 {
            let m = ((s + e) / 2.0).clamp(5e-7, 1.0 - 5e-7);
            (m - 5e-7, m + 5e-7)
        } else {
            (s, e)
        };
        TemporalInterval {
            center: (s + e) / 2.0,
            duration: e - s,
        }
    }

    /// Strict containment of `other` inside `self` (shared boundaries allowed).
    pub fn contains(&self, other: &TemporalInterval) -> bool {
        self.start() <= other.start() && other.end() <= self.end() && self != other
    }

    pub fn overlaps(&self, other: &TemporalInterval) -> bool {
        self.start().max(other.start()) < self.end().min(other.end())
    }
}

pub fn intersection(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    (a.end().min(b.end()) - a.start().max(b.start())).max(0.0)
}

pub fn hull(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    a.end().max(b.end()) - a.start().min(b.start())
}

/// `end - start`, consistent with [`intersection`] and [`hull`] to the last
/// bit, which the stored duration is not.
fn span(a: &TemporalInterval) -> f64 {
    a.end() - a.start()
}

pub fn iou(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    let inter = intersection(a, b);
    let union = span(a) + span(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU in `(-1, 1]`.
pub fn giou_1d(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    let inter = intersection(a, b);
    let union = span(a) + span(b) - inter;
    let h = hull(a, b);
    // hull >= union, up to rounding for nested intervals
    inter / union - (h - union).max(0.0) / h
}

/// `1 + (min end - max start) / (max end - min start)`, in `(0, 2]` for
/// intervals inside `[0, 1]`.
pub fn location_correlation(a: &TemporalInterval, b: &TemporalInterval) -> Result<f64> {
    let h = hull(a, b);
    if !(h > 0.0) {
        return Err(Error::Domain(format!(
            "zero hull length for {a:?} and {b:?}"
        )));
    }
    Ok(1.0 + (a.end().min(b.end()) - a.start().max(b.start())) / h)
}

/// How pairwise boundary relations are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelationMetric {
    /// `|min end - max start|`: zero exactly for touching events.
    #[default]
    Overlap,
    /// `|c_i - c_j|`.
    Center,
}

fn relation_beta(p: &TemporalInterval, q: &TemporalInterval, metric: RelationMetric) -> f64 {
    match metric {
        RelationMetric::Overlap => (p.end().min(q.end()) - p.start().max(q.start())).abs(),
        RelationMetric::Center => (p.center - q.center).abs(),
    }
}

/// `[ln(beta / d_i + 1), ln(d_i / d_j)]` with the overlap-aware beta.
pub fn relation_vector(p_i: &TemporalInterval, p_j: &TemporalInterval) -> (f64, f64) {
    relation_vector_with(p_i, p_j, RelationMetric::Overlap)
}

pub fn relation_vector_with(
    p_i: &TemporalInterval,
    p_j: &TemporalInterval,
    metric: RelationMetric,
) -> (f64, f64) {
    let beta = relation_beta(p_i, p_j, metric);
    (
        math::ln(beta / p_i.duration + 1.0),
        math::ln(p_i.duration / p_j.duration),
    )
}

/// `N×N×2` tensor of pairwise relation vectors, entry `(i, j)` at row `i*N + j`.
pub fn pairwise_relation_matrix(
    anchors: &[TemporalInterval],
    metric: RelationMetric,
) -> Result<Tensor> {
    let n = anchors.len();
    if n == 0 {
        return Err(Error::Input(
            "relation matrix needs at least one anchor".into(),
        ));
    }
    let mut data = Vec::with_capacity(n * n * 2);
    for a in anchors {
        for b in anchors {
            let (r0, r1) = relation_vector_with(a, b, metric);
            data.push(r0);
            data.push(r1);
        }
    }
    Tensor::new(vec![n, n, 2], data)
}

pub fn intervals_from_rows(t: &Tensor) -> Vec<TemporalInterval> {
    (0..t.rows())
        .map(|r| TemporalInterval {
            center: t.get(r, 0),
            duration: t.get(r, 1),
        })
        .collect()
}

#[inline]
fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of gIoU w.r.t. the `(start, end)` of `pred`. Ties at shared
/// boundaries take the derivative from the side where `pred` lies inside.
fn giou_grad_bounds(s: f64, e: f64, gs: f64, ge: f64) -> (f64, f64, f64) {
    let lo = s.max(gs);
    let hi = e.min(ge);
    let raw = hi - lo;
    let inter = raw.max(0.0);
    let union = (e - s) + (ge - gs) - inter;
    let h = e.max(ge) - s.min(gs);
    let giou = inter / union - (h - union).max(0.0) / h;
    let live = ind(raw > 0.0);
    let di_de = live * ind(e <= ge);
    let di_ds = -live * ind(s >= gs);
    let du_de = 1.0 - di_de;
    let du_ds = -1.0 - di_ds;
    let dh_de = ind(e > ge);
    let dh_ds = -ind(s < gs);
    let d = |di: f64, du: f64, dh: f64| {
        (di * union - inter * du) / (union * union) + (du * h - union * dh) / (h * h)
    };
    (giou, d(di_ds, du_ds, dh_ds), d(di_de, du_de, dh_de))
}

/// Per-row `1 - gIoU(pred_i, target_i)` for an `n×2` tensor of decoded
/// `(center, duration)` predictions; returns `n×1`.
pub fn giou_loss(g: &mut Graph<'_>, pred: Var, targets: &[TemporalInterval]) -> Result<Var> {
    let p = g.value(pred);
    if p.cols() != 2 || p.rows() != targets.len() {
        return Err(Error::dim("giou_loss", p.shape(), &[targets.len(), 2]));
    }
    let n = targets.len();
    let mut vals = Vec::with_capacity(n);
    let mut partials = Vec::with_capacity(n);
    for (r, t) in targets.iter().enumerate() {
        let (c, d) = (p.get(r, 0), p.get(r, 1));
        let (giou, ds, de) = giou_grad_bounds(c - d / 2.0, c + d / 2.0, t.start(), t.end());
        vals.push(1.0 - giou);
        // d(1-giou)/dc = -(ds + de), d/dd = -(-ds/2 + de/2)
        partials.push((-(ds + de), -(de - ds) / 2.0));
    }
    let value = Tensor::matrix(n, 1, vals)?;
    Ok(g.custom(
        &[pred],
        value,
        Box::new(move |grad, _, _| {
            let mut out = Tensor::zeros(&[n, 2]);
            for (r, &(dc, dd)) in partials.iter().enumerate() {
                let gv = grad.data()[r];
                out.set(r, 0, gv * dc);
                out.set(r, 1, gv * dd);
            }
            vec![Some(out)]
        }),
    ))
}

/// Differentiable pairwise relation matrix: decoded anchors `n×2` to `(n·n)×2`.
pub fn relation_matrix(g: &mut Graph<'_>, anchors: Var, metric: RelationMetric) -> Result<Var> {
    let a = g.value(anchors);
    if a.cols() != 2 || a.rows() == 0 {
        return Err(Error::dim("relation_matrix", a.shape(), &[a.rows(), 2]));
    }
    let n = a.rows();
    let iv = intervals_from_rows(a);
    // Per pair: d r0 / d(c_i, d_i, c_j, d_j).
    let mut jac = Vec::with_capacity(n * n);
    let mut data = Vec::with_capacity(n * n * 2);
    for p in &iv {
        for q in &iv {
            let (di, dj) = (p.duration, q.duration);
            let (beta, db) = match metric {
                RelationMetric::Overlap => {
                    let m = p.end().min(q.end()) - p.start().max(q.start());
                    let e_i = ind(p.end() <= q.end());
                    let s_i = ind(p.start() >= q.start());
                    let dm = [
                        e_i - s_i,
                        0.5 * e_i + 0.5 * s_i,
                        (1.0 - e_i) - (1.0 - s_i),
                        0.5 * (1.0 - e_i) + 0.5 * (1.0 - s_i),
                    ];
                    let sg = sign(m);
                    (m.abs(), dm.map(|v| v * sg))
                }
                RelationMetric::Center => {
                    let sg = sign(p.center - q.center);
                    ((p.center - q.center).abs(), [sg, 0.0, -sg, 0.0])
                }
            };
            let inv = 1.0 / (beta + di);
            jac.push([
                inv * db[0],
                inv * db[1] + inv - 1.0 / di,
                inv * db[2],
                inv * db[3],
            ]);
            data.push(math::ln(beta / di + 1.0));
            data.push(math::ln(di / dj));
        }
    }
    let value = Tensor::matrix(n * n, 2, data)?;
    Ok(g.custom(
        &[anchors],
        value,
        Box::new(move |grad, x, _| {
            let a = x[0];
            let mut out = Tensor::zeros(&[n, 2]);
            for i in 0..n {
                for j in 0..n {
                    let row = i * n + j;
                    let (g0, g1) = (grad.get(row, 0), grad.get(row, 1));
                    let jr = jac[row];
                    let o = out.data_mut();
                    o[i * 2] += g0 * jr[0];
                    o[i * 2 + 1] += g0 * jr[1] + g1 / a.get(i, 1);
                    o[j * 2] += g0 * jr[2];
                    o[j * 2 + 1] += g0 * jr[3] - g1 / a.get(j, 1);
                }
            }
            vec![Some(out)]
        }),
    ))
}
