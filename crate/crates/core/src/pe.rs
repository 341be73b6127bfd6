//! Sinusoidal position encoding.
//!
//! Pair `i` of a `dim`-wide encoding is `[sin(w_i x), cos(w_i x)]` with
//! `w_i = scale / temperature^(2i / dim)`. Multi-coordinate inputs encode
//! each coordinate into `dim / k` columns and concatenate.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeConfig {
    pub temperature: f64,
    pub scale: f64,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            temperature: 10000.0,
            scale: 2.0 * core::f64::consts::PI,
        }
    }
}

impl PeConfig {
    fn frequencies(&self, dim: usize) -> Result<Vec<f64>> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinusoidal encoding width must be even and positive, got {dim}"
            )));
        }
        Ok((0..dim / 2)
            .map(|i| self.scale / math::powf(self.temperature, (2 * i) as f64 / dim as f64))
            .collect())
    }
}

/// Encodes one scalar position.
pub fn sinusoidal_pe(pos: f64, dim: usize, cfg: PeConfig) -> Result<Vec<f64>> {
    let freqs = cfg.frequencies(dim)?;
    let mut out = Vec::with_capacity(dim);
    for w in freqs {
        out.push(math::sin(w * pos));
        out.push(math::cos(w * pos));
    }
    Ok(out)
}

/// Encodes every row of an `n×k` coordinate matrix into `n×dim`.
pub fn encode_coords(coords: &Tensor, dim: usize, cfg: PeConfig) -> Result<Tensor> {
    let k = coords.cols();
    if k == 0 || !dim.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "encoding width {dim} is not divisible by coordinate count {k}"
        )));
    }
    let per = dim / k;
    let freqs = cfg.frequencies(per)?;
    let mut data = Vec::with_capacity(coords.rows() * dim);
    for r in 0..coords.rows() {
        for &x in coords.row(r) {
            for &w in &freqs {
                data.push(math::sin(w * x));
                data.push(math::cos(w * x));
            }
        }
    }
    Tensor::matrix(coords.rows(), dim, data)
}

/// Differentiable [`encode_coords`]: `n×k -> n×(k·per_coord)`.
pub fn sinusoidal(g: &mut Graph<'_>, coords: Var, per_coord: usize, cfg: PeConfig) -> Result<Var> {
    let freqs = cfg.frequencies(per_coord)?;
    let x = g.value(coords);
    let k = x.cols();
    let value = encode_coords(x, per_coord * k, cfg)?;
    Ok(g.custom(
        &[coords],
        value,
        Box::new(move |grad, _, y| {
            let n = y.rows();
            let mut out = vec![0.0; n * k];
            for r in 0..n {
                for j in 0..k {
                    let mut acc = 0.0;
                    for (i, &w) in freqs.iter().enumerate() {
                        let col = j * per_coord + 2 * i;
                        let s = y.get(r, col);
                        let c = y.get(r, col + 1);
                        acc += grad.get(r, col) * w * c - grad.get(r, col + 1) * w * s;
                    }
                    out[r * k + j] = acc;
                }
            }
            vec![Some(Tensor::matrix(n, k, out).unwrap())]
        }),
    ))
}
