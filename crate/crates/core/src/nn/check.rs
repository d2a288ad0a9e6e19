//! Central finite-difference gradient checking.

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub param: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares analytic parameter gradients of `build` (which must return a
/// scalar node) with central differences of step `eps`.
///
/// The relative error for one entry is `|a - n| / max(|a|, |n|, floor)`;
/// the floor keeps entries whose true gradient is numerically zero from
/// dominating.
pub fn check_gradients<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, mut build: F) -> Vec<GradCheck>
where
    F: FnMut(&mut Graph, &ParamStore) -> NodeId,
{
    const FLOOR: f64 = 1e-6;
    let mut graph = Graph::new();
    let loss = build(&mut graph, store);
    let grads = graph.backward(loss);
    let mut report = Vec::new();
    for &pid in params {
        let analytic = grads.param(pid).cloned().unwrap_or_else(|| {
            let v = store.value(pid);
            super::tensor::Tensor::zeros(v.rows, v.cols)
        });
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = store.value(pid).data[i];
            store.value_mut(pid).data[i] = orig + eps;
            let plus = eval(store, &mut build);
            store.value_mut(pid).data[i] = orig - eps;
            let minus = eval(store, &mut build);
            store.value_mut(pid).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        report.push(GradCheck {
            param: store.name(pid).to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            entries: analytic.len(),
        });
    }
    report
}

fn eval<F>(store: &ParamStore, build: &mut F) -> f64
where
    F: FnMut(&mut Graph, &ParamStore) -> NodeId,
{
    let mut g = Graph::new();
    let out = build(&mut g, store);
    g.value(out).data[0]
}
