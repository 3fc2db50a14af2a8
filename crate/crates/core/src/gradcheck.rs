//! Central finite-difference checks of tape gradients.
//!
//! The error reported is `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`
//! over the probed entries, which stays meaningful when individual
//! gradient entries are near zero.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub rel_err: f64,
    /// Largest analytic gradient magnitude among probed entries.
    pub analytic_max: f64,
    pub probed: usize,
}

impl GradCheck {
    /// Passes when the error is within `tol` and the gradient is not
    /// identically zero (a vacuous check).
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol && self.analytic_max > 0.0
    }
}

fn probe_indices(numel: usize, max_entries: usize) -> Vec<usize> {
    if numel <= max_entries {
        return (0..numel).collect();
    }
    let stride = numel as f64 / max_entries as f64;
    (0..max_entries).map(|i| (i as f64 * stride) as usize).collect()
}

fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let amax = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let nmax = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = amax.max(nmax);
    GradCheck {
        rel_err: if scale == 0.0 { 0.0 } else { diff / scale },
        analytic_max: amax,
        probed: analytic.len(),
    }
}

/// Checks the gradient of the scalar `loss` with respect to parameter `id`,
/// probing at most `max_entries` entries with step `step`.
pub fn check_param<F>(
    store: &ParamStore<f64>,
    id: ParamId,
    mode: Mode,
    step: f64,
    max_entries: usize,
    loss: F,
) -> Result<GradCheck>
where
    F: for<'g> Fn(&Ctx<'g, f64>) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let ctx = Ctx::new(&graph, store, mode);
    let l = loss(&ctx)?;
    let mut grads = graph.backward(&l);
    let shape = store.get(id).shape();
    let analytic_full = ctx
        .param_grads(&mut grads)
        .into_iter()
        .find(|(p, _)| *p == id)
        .map(|(_, g)| g)
        .unwrap_or_else(|| Tensor::zeros(shape));

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::inference();
        let c = Ctx::new(&g, s, mode);
        Ok(loss(&c)?.value().data()[0])
    };
    let idx = probe_indices(store.get(id).numel(), max_entries);
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(idx.len());
    let mut analytic = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = store.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + step;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - step;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
        analytic.push(analytic_full.data()[i]);
    }
    Ok(compare(&analytic, &numeric))
}

/// Checks gradients with respect to each of `inputs` for a scalar function
/// built directly on the tape.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, max_entries: usize, f: F) -> Vec<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&graph, &vars);
    let grads = graph.backward(&out);
    let analytic_full: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let vs: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).value().data()[0]
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    (0..inputs.len())
        .map(|k| {
            let idx = probe_indices(inputs[k].numel(), max_entries);
            let mut numeric = Vec::with_capacity(idx.len());
            let mut analytic = Vec::with_capacity(idx.len());
            for &i in &idx {
                let orig = inputs[k].data()[i];
                work[k].data_mut()[i] = orig + step;
                let plus = eval(&work);
                work[k].data_mut()[i] = orig - step;
                let minus = eval(&work);
                work[k].data_mut()[i] = orig;
                numeric.push((plus - minus) / (2.0 * step));
                analytic.push(analytic_full[k].data()[i]);
            }
            compare(&analytic, &numeric)
        })
        .collect()
}

/// Pins a closure to the higher-ranked signature [`check_param`] expects.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&Ctx<'g, f64>) -> Result<Var<'g, f64>>,
{
    f
}
