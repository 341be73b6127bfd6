//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation
//! stores its output value and, when any input needs a gradient, a
//! closure that maps the output gradient to input gradients. Parameters
//! are read from a borrowed [`ParamStore`]; [`Graph::backward`] returns the
//! gradient for every parameter that was touched.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Maps `(output_grad, input_values, output_value)` to one optional
/// gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` yields no gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            backward: if requires_grad { Some(backward) } else { None },
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            inputs: Vec::new(),
            backward: None,
            param: Some(id),
            requires_grad: self.grad_enabled && p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Registers an operation with a hand-written backward pass.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, inputs.to_vec(), backward)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut out = Gradients {
            per_param: vec![None; self.store.len()],
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(pid) = node.param {
                out.per_param[pid.0] = Some(g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let ig = bw(&g, &inputs, &node.value);
            for (inp, gi) in node.inputs.iter().zip(ig) {
                let Some(gi) = gi else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, x, _| {
                vec![
                    Some(tensor::matmul_nt(g, x[1]).unwrap()),
                    Some(tensor::matmul_tn(x[0], g).unwrap()),
                ]
            }),
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, x, _| {
                vec![
                    Some(tensor::matmul(g, x[1]).unwrap()),
                    Some(tensor::matmul_tn(g, x[0]).unwrap()),
                ]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        Ok(self.push(v, vec![a], Box::new(|g, _, _| vec![Some(g.transpose())])))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let orig = self.shape(a).to_vec();
        Ok(self.push(
            v,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.reshape(&orig).unwrap())]),
        ))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, x, _| {
                vec![
                    Some(g.zip_map(x[1], |g, b| g * b)),
                    Some(g.zip_map(x[0], |g, a| g * a)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        Ok(self.push(
            v,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]),
        ))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        Ok(self.push(v, vec![a], Box::new(|g, _, _| vec![Some(g.clone())])))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 - x);
        Ok(self.push(v, vec![a], Box::new(|g, _, _| vec![Some(g.map(|v| -v))])))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, x, _| vec![Some(g.zip_map(x[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(math::sigmoid);
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, y| g * y * (1.0 - y)))]),
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(math::tanh);
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, y| g * (1.0 - y * y)))]),
        ))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(math::exp);
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, y| g * y))]),
        ))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(math::ln);
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, x, _| vec![Some(g.zip_map(x[0], |g, x| g / x))]),
        ))
    }

    // ---- broadcasting ----

    fn check_row(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    fn check_col(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.cols() != 1 || bv.rows() != av.rows() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    /// `a (R×C) + b (1×C)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_row("add_row", a, b)?;
        let mut v = self.value(a).clone();
        let brow = self.value(b).data().to_vec();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&brow) {
                *x += y;
            }
        }
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(col_sums(g))]),
        ))
    }

    /// `a (R×C) * b (1×C)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_row("mul_row", a, b)?;
        let mut v = self.value(a).clone();
        let brow = self.value(b).data().to_vec();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&brow) {
                *x *= y;
            }
        }
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, x, _| {
                let (a, b) = (x[0], x[1]);
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(b.shape());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let gv = g.get(r, c);
                        ga.set(r, c, gv * b.data()[c]);
                        gb.data_mut()[c] += gv * a.get(r, c);
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// `a (R×C) + b (R×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_col("add_col", a, b)?;
        let mut v = self.value(a).clone();
        let bcol = self.value(b).data().to_vec();
        for (r, y) in bcol.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|x| *x += y);
        }
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(row_sums(g))]),
        ))
    }

    /// `a (R×C) * b (R×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_col("mul_col", a, b)?;
        let mut v = self.value(a).clone();
        let bcol = self.value(b).data().to_vec();
        for (r, y) in bcol.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|x| *x *= y);
        }
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, x, _| {
                let (a, b) = (x[0], x[1]);
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(b.shape());
                for r in 0..g.rows() {
                    let bv = b.data()[r];
                    let mut acc = 0.0;
                    for (c, gv) in ga.row_mut(r).iter_mut().enumerate() {
                        acc += *gv * a.get(r, c);
                        *gv *= bv;
                    }
                    gb.data_mut()[r] = acc;
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// `a (R×C) / b (1×C)` broadcast over rows.
    pub fn div_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_row("div_row", a, b)?;
        let mut v = self.value(a).clone();
        let brow = self.value(b).data().to_vec();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&brow) {
                *x /= y;
            }
        }
        Ok(self.push(
            v,
            vec![a, b],
            Box::new(|g, x, y| {
                let b = x[1];
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(b.shape());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let gv = g.get(r, c);
                        let bv = b.data()[c];
                        ga.set(r, c, gv / bv);
                        gb.data_mut()[c] -= gv * y.get(r, c) / bv;
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, x, _| vec![Some(Tensor::full(x[0].shape(), g.item()))]),
        ))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum down the rows: `R×C -> 1×C`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let v = col_sums(self.value(a));
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, x, _| {
                let mut out = Tensor::zeros(x[0].shape());
                for r in 0..out.rows() {
                    out.row_mut(r).copy_from_slice(g.data());
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Sum along each row: `R×C -> R×1`.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let v = row_sums(self.value(a));
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, x, _| {
                let mut out = Tensor::zeros(x[0].shape());
                for r in 0..out.rows() {
                    let gv = g.data()[r];
                    out.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Column-wise max over rows: `R×C -> 1×C`. Ties route to the first row.
    pub fn max_axis0(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        if rows == 0 {
            return Err(Error::dim("max_axis0", x.shape(), &[1, cols]));
        }
        let mut arg = vec![0usize; cols];
        let mut best = x.row(0).to_vec();
        for r in 1..rows {
            for c in 0..cols {
                if x.get(r, c) > best[c] {
                    best[c] = x.get(r, c);
                    arg[c] = r;
                }
            }
        }
        let v = Tensor::row_vector(best);
        Ok(self.push(
            v,
            vec![a],
            Box::new(move |g, x, _| {
                let mut out = Tensor::zeros(x[0].shape());
                for (c, &r) in arg.iter().enumerate() {
                    out.set(r, c, g.data()[c]);
                }
                vec![Some(out)]
            }),
        ))
    }

    // ---- normalisation ----

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, _, y| {
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (o, &yv) in out.row_mut(r).iter_mut().zip(yr) {
                        *o = yv * (*o - dot);
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::log_softmax_rows(self.value(a))?;
        Ok(self.push(
            v,
            vec![a],
            Box::new(|g, _, y| {
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for (o, &ly) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= math::exp(ly) * gs;
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Softmax along axis 0 (each column sums to one).
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.transpose(a)?;
        let s = self.softmax_rows(t)?;
        self.transpose(s)
    }

    /// Per-row zero mean and unit variance (no affine part).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() < 2 {
            return Err(Error::dim("layer_norm", x.shape(), &[x.rows(), 2]));
        }
        let (v, inv_std) = tensor::normalize_rows(x);
        Ok(self.push(
            v,
            vec![a],
            Box::new(move |g, _, y| {
                let c = y.cols() as f64;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let gsum: f64 = gr.iter().sum();
                    let gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    let inv = inv_std[r];
                    for ((o, &gv), &yv) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv / c * (c * gv - gsum - yv * gy);
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    // ---- structure ----

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::dim("slice_cols", x.shape(), &[start, len]));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::matrix(rows, len, data)?;
        Ok(self.push(
            v,
            vec![a],
            Box::new(move |g, x, _| {
                let mut out = Tensor::zeros(&[x[0].rows(), x[0].cols()]);
                for r in 0..g.rows() {
                    out.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                vec![Some(out.reshape(x[0].shape()).unwrap())]
            }),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(Error::dim("slice_rows", x.shape(), &[start, len]));
        }
        let c = x.cols();
        let v = Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(
            v,
            vec![a],
            Box::new(move |g, x, _| {
                let mut out = Tensor::zeros(x[0].shape());
                out.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![Some(out)]
            }),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(
            v,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut outs = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut t = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        t.extend_from_slice(&g.row(r)[off..off + w]);
                    }
                    outs.push(Some(Tensor::matrix(g.rows(), w, t).unwrap()));
                    off += w;
                }
                outs
            }),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut heights = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), x.shape()));
            }
            heights.push(x.rows());
            data.extend_from_slice(x.data());
        }
        let total: usize = heights.iter().sum();
        let v = Tensor::matrix(total, cols, data)?;
        Ok(self.push(
            v,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut outs = Vec::with_capacity(heights.len());
                let mut off = 0;
                for &h in &heights {
                    let t = g.data()[off * cols..(off + h) * cols].to_vec();
                    outs.push(Some(Tensor::matrix(h, cols, t).unwrap()));
                    off += h;
                }
                outs
            }),
        ))
    }

    /// Selects rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: &[Option<usize>]) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            match i {
                Some(i) if i < x.rows() => data.extend_from_slice(x.row(i)),
                Some(i) => return Err(Error::dim("gather_rows", x.shape(), &[i])),
                None => data.extend(core::iter::repeat_n(0.0, c)),
            }
        }
        let v = Tensor::matrix(idx.len(), c, data)?;
        let idx = idx.to_vec();
        Ok(self.push(
            v,
            vec![a],
            Box::new(move |g, x, _| {
                let mut out = Tensor::zeros(x[0].shape());
                for (r, &i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        for (o, gv) in out.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
                vec![Some(out)]
            }),
        ))
    }
}

pub(crate) fn col_sums(g: &Tensor) -> Tensor {
    let mut s = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (a, b) in s.iter_mut().zip(g.row(r)) {
            *a += b;
        }
    }
    Tensor::row_vector(s)
}

pub(crate) fn row_sums(g: &Tensor) -> Tensor {
    let s: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
    Tensor::matrix(g.rows(), 1, s).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_through_shared_input() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(3.0), true).unwrap();
        let g = {
            let mut g = Graph::new(&store);
            let x = g.param(w);
            let y = g.mul(x, x).unwrap();
            let grads = g.backward(y).unwrap();
            grads.get(w).unwrap().item()
        };
        assert_eq!(g, 6.0);
    }

    #[test]
    fn inference_graph_has_no_gradients() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(2.0), true).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.param(w);
        let y = g.scale(x, 4.0).unwrap();
        assert_eq!(g.value(y).item(), 8.0);
        assert!(g.backward(y).unwrap().get(w).is_none());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(2.0), false).unwrap();
        let mut g = Graph::new(&store);
        let x = g.param(w);
        let y = g.scale(x, 4.0).unwrap();
        assert!(g.backward(y).unwrap().get(w).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::zeros(&[1, 2]), true).unwrap();
        let mut g = Graph::new(&store);
        let x = g.param(w);
        assert!(g.backward(x).is_err());
    }
}
