//! Standard layers built from graph primitives.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// `y = x W + b`.
pub fn affine(g: &mut Graph<'_>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(weight).to_vec());
    if g.value(x).cols() != g.value(weight).rows() {
        return Err(Error::dim("affine", &xs, &ws));
    }
    let y = g.matmul(x, weight)?;
    match bias {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform fan-in scaled by a gain.
    Uniform(u32),
    Zeros,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::Uniform(1), true, rng)
    }

    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.insert_const(&format!("{name}.weight"), &[in_dim, out_dim], 0.0)?;
        let bias = store.insert_const(&format!("{name}.bias"), &[1, out_dim], 0.0)?;
        Ok(Linear {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = match init {
            Init::Uniform(gain) => store.insert_uniform(
                &format!("{name}.weight"),
                &[in_dim, out_dim],
                in_dim,
                gain as f64,
                rng,
            )?,
            Init::Zeros => {
                store.insert_const(&format!("{name}.weight"), &[in_dim, out_dim], 0.0)?
            }
        };
        let bias = if bias {
            Some(store.insert_const(&format!("{name}.bias"), &[1, out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        affine(g, x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = alloc::vec![self.weight];
        v.extend(self.bias);
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.insert_const(&format!("{name}.gamma"), &[1, dim], 1.0)?,
            beta: store.insert_const(&format!("{name}.beta"), &[1, dim], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.normalize_rows(x)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. With `zero_last`, the final layer
    /// starts at zero so the MLP initially outputs exactly zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let lname = format!("{name}.{i}");
            let last = i == dims.len() - 2;
            let layer = if last && zero_last {
                Linear::zeros(store, &lname, w[0], w[1])?
            } else {
                Linear::new(store, &lname, w[0], w[1], rng)?
            };
            layers.push(layer);
        }
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}
