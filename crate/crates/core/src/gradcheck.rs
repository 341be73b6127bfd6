//! Central finite-difference oracle for analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
    /// A failing entry is retried this many times with a step ten times
    /// smaller, so a kink inside the stencil is not mistaken for a bad
    /// gradient. Retries are counted in the report.
    pub kink_retries: u32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-5,
            max_entries: None,
            kink_retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    /// Entries that only agreed at a smaller step.
    pub retried: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn entries_retried(&self) -> usize {
        self.params.iter().map(|p| p.retried).sum()
    }
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

fn central_difference<F>(
    store: &mut ParamStore,
    id: crate::params::ParamId,
    k: usize,
    step: f64,
    f: &F,
    name: &str,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let orig = store.value(id).data()[k];
    store.value_mut(id).data_mut()[k] = orig + step;
    let up = eval_loss(store, f);
    store.value_mut(id).data_mut()[k] = orig - step;
    let down = eval_loss(store, f);
    store.value_mut(id).data_mut()[k] = orig;
    let (up, down) = (up?, down?);
    if !up.is_finite() || !down.is_finite() {
        return Err(Error::NonFinite { param: name.into() });
    }
    Ok((up - down) / (2.0 * step))
}

/// Compares `f`'s analytic gradient with central differences for every
/// trainable parameter in `store`. `store` is restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite {
                param: String::from("<unperturbed>"),
            });
        }
        g.backward(loss)?
    };

    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut params = Vec::with_capacity(ids.len());
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        let picks: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let analytic: Vec<f64> = match grads.get(id) {
            Some(t) => t.data().to_vec(),
            None => alloc::vec![0.0; n],
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            entries: picks.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            retried: 0,
        };
        for &k in &picks {
            let a = analytic[k];
            let mut step = cfg.step;
            let mut attempt = 0;
            let (abs, rel) = loop {
                let numeric = central_difference(store, id, k, step, &f, &check.name)?;
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
                if rel <= cfg.tolerance || attempt >= cfg.kink_retries {
                    if attempt > 0 && rel <= cfg.tolerance {
                        check.retried += 1;
                    }
                    break (abs, rel);
                }
                attempt += 1;
                step *= 0.1;
            };
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = k;
            }
            check.max_abs_err = check.max_abs_err.max(abs);
        }
        worst = worst.max(check.max_rel_err);
        params.push(check);
    }
    Ok(GradCheckReport {
        passed: worst <= cfg.tolerance,
        max_rel_err: worst,
        tolerance: cfg.tolerance,
        params,
    })
}
