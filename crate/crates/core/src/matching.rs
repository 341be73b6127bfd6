//! Bipartite assignment and the set-prediction losses built on it.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{self, TemporalInterval};
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;

/// Minimum-cost injective assignment of `min(rows, cols)` pairs.
///
/// Returns `(row, col)` pairs sorted by row. Uses shortest augmenting
/// paths with dual potentials, `O(n² m)`.
pub fn hungarian(cost: &Tensor) -> Result<Vec<(usize, usize)>> {
    let (n, m) = (cost.rows(), cost.cols());
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cost matrix has a non-finite entry".into()));
    }
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    if n > m {
        let mut pairs: Vec<(usize, usize)> = solve_rows(&cost.transpose())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    Ok(solve_rows(cost))
}

/// Assigns every row of an `n×m` (`n ≤ m`) matrix.
fn solve_rows(cost: &Tensor) -> Vec<(usize, usize)> {
    let (n, m) = (cost.rows(), cost.cols());
    let inf = f64::INFINITY;
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Sum of the assigned entries, accumulated in row order.
pub fn assignment_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
}

/// Prediction to ground-truth assignment with per-pair costs.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPrediction {
    /// `(prediction, ground_truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub pair_costs: Vec<f64>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

impl MatchedPrediction {
    pub fn from_cost(cost: &Tensor) -> Result<Self> {
        let pairs = hungarian(cost)?;
        let pair_costs = pairs.iter().map(|&(r, c)| cost.get(r, c)).collect();
        let unmatched_predictions = (0..cost.rows())
            .filter(|r| !pairs.iter().any(|p| p.0 == *r))
            .collect();
        let unmatched_ground_truth = (0..cost.cols())
            .filter(|c| !pairs.iter().any(|p| p.1 == *c))
            .collect();
        Ok(MatchedPrediction {
            pairs,
            pair_costs,
            unmatched_predictions,
            unmatched_ground_truth,
        })
    }

    pub fn positives(&self, n: usize) -> Vec<bool> {
        let mut pos = vec![false; n];
        for &(p, _) in &self.pairs {
            pos[p] = true;
        }
        pos
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    /// Positive-class weight; `None` weighs both classes by one.
    pub alpha: Option<f64>,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: Some(0.25),
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    fn weights(&self) -> (f64, f64) {
        match self.alpha {
            Some(a) => (a, 1.0 - a),
            None => (1.0, 1.0),
        }
    }
}

/// Focal matching cost of calling a query with probability `p` foreground.
pub fn focal_cost(p: f64, params: FocalParams) -> f64 {
    let (wp, wn) = params.weights();
    let eps = 1e-8;
    let pos = wp * math::powf(1.0 - p, params.gamma) * -math::ln(p + eps);
    let neg = wn * math::powf(p, params.gamma) * -math::ln(1.0 - p + eps);
    pos - neg
}

/// `w_giou (1 - gIoU) + w_cls focal_cost` for every (prediction, ground truth).
pub fn head_matching_cost(
    boxes: &[TemporalInterval],
    confidences: &[f64],
    gts: &[TemporalInterval],
    w_giou: f64,
    w_cls: f64,
    focal: FocalParams,
) -> Result<Tensor> {
    if boxes.len() != confidences.len() {
        return Err(Error::dim(
            "head_matching_cost",
            &[boxes.len()],
            &[confidences.len()],
        ));
    }
    let mut data = Vec::with_capacity(boxes.len() * gts.len());
    for (b, &p) in boxes.iter().zip(confidences) {
        let cls = focal_cost(p, focal);
        for gt in gts {
            data.push(w_giou * (1.0 - geometry::giou_1d(b, gt)) + w_cls * cls);
        }
    }
    Tensor::matrix(boxes.len(), gts.len(), data)
}

/// Sigmoid focal loss on per-query logits (`N×1`), summed and divided by
/// `max(1, #positives)`.
pub fn focal_loss(
    g: &mut Graph<'_>,
    logits: Var,
    positives: &[bool],
    params: FocalParams,
) -> Result<Var> {
    let x = g.value(logits);
    if x.len() != positives.len() {
        return Err(Error::dim("focal_loss", x.shape(), &[positives.len(), 1]));
    }
    let (wp, wn) = params.weights();
    let gamma = params.gamma;
    let norm = positives.iter().filter(|&&p| p).count().max(1) as f64;
    let mut total = 0.0;
    let mut dx = Vec::with_capacity(x.len());
    for (&z, &pos) in x.data().iter().zip(positives) {
        let p = math::sigmoid(z);
        // log p = -softplus(-z), log(1-p) = -softplus(z)
        if pos {
            let lp = -math::softplus(-z);
            let m = math::powf(1.0 - p, gamma);
            total += -wp * m * lp;
            dx.push(wp * m * (gamma * p * lp - (1.0 - p)));
        } else {
            let lq = -math::softplus(z);
            let m = math::powf(p, gamma);
            total += -wn * m * lq;
            dx.push(wn * m * (p - gamma * (1.0 - p) * lq));
        }
    }
    let shape = x.shape().to_vec();
    Ok(g.custom(
        &[logits],
        Tensor::scalar(total / norm),
        Box::new(move |grad, _, _| {
            let s = grad.item() / norm;
            vec![Some(
                Tensor::new(shape.clone(), dx.iter().map(|v| v * s).collect()).unwrap(),
            )]
        }),
    ))
}

/// Mean token cross-entropy over rows whose target is `Some`.
pub fn cross_entropy(g: &mut Graph<'_>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let x = g.value(logits);
    if x.rows() != targets.len() {
        return Err(Error::dim("cross_entropy", x.shape(), &[targets.len()]));
    }
    let c = x.cols();
    let lsm = crate::tensor::log_softmax_rows(x)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= c {
                return Err(Error::Vocabulary(t));
            }
            total -= lsm.get(r, t);
            count += 1;
        }
    }
    let denom = count.max(1) as f64;
    let targets = targets.to_vec();
    Ok(g.custom(
        &[logits],
        Tensor::scalar(total / denom),
        Box::new(move |grad, _, _| {
            let s = grad.item() / denom;
            let mut out = Tensor::zeros(lsm.shape());
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                        let p = math::exp(lsm.get(r, k));
                        *o = s * (p - if k == t { 1.0 } else { 0.0 });
                    }
                }
            }
            vec![Some(out)]
        }),
    ))
}

/// Weights of the loss composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub loc: f64,
    pub cnt: f64,
    pub cap: f64,
    pub prop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            loc: 2.0,
            cnt: 1.0,
            cap: 1.0,
            prop: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub cls: f64,
    pub loc: f64,
    pub cnt: f64,
    pub cap: f64,
    pub prop: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn compose(cls: f64, loc: f64, cnt: f64, cap: f64, prop: f64, w: LossWeights) -> Self {
        LossReport {
            cls,
            loc,
            cnt,
            cap,
            prop,
            total: cls + w.loc * loc + w.cnt * cnt + w.cap * cap + w.prop * prop,
            weights: w,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cls, self.loc, self.cnt, self.cap, self.prop, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl core::fmt::Display for LossReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{}",
            format!(
                "total {:.5} (cls {:.4} loc {:.4} cnt {:.4} cap {:.4} prop {:.4})",
                self.total, self.cls, self.loc, self.cnt, self.cap, self.prop
            )
        )
    }
}
