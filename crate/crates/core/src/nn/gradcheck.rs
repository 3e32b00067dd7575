//! Central finite-difference oracle for analytic gradients.
//!
//! Only ever calls the forward closure, so it stays independent of every
//! backward pass it is used to check.

use rand::Rng;

use super::{ParamId, ParamStore};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(θ + ε e_i) − f(θ − ε e_i)) / 2ε` for scalar `index` of `param`.
pub fn central_difference<F>(store: &mut ParamStore, param: ParamId, index: usize, eps: f64, f: &mut F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let orig = store.value(param).data()[index];
    store.value_mut(param).data_mut()[index] = orig + eps;
    let plus = f(store);
    store.value_mut(param).data_mut()[index] = orig - eps;
    let minus = f(store);
    store.value_mut(param).data_mut()[index] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Same as [`central_difference`] for a free input vector.
pub fn central_difference_vec<F>(x: &mut [f64], index: usize, eps: f64, f: &mut F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[index];
    x[index] = orig + eps;
    let plus = f(x);
    x[index] = orig - eps;
    let minus = f(x);
    x[index] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Relative error used by every gradient check in the crate. The `1e-8`
/// floor keeps coordinates with near-zero gradients from dividing by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Attention key biases add the same amount to every score of a query row,
/// so their exact gradient is zero and a finite difference only sees
/// rounding noise. Random probes skip them.
pub fn softmax_invariant(name: &str) -> bool {
    name.ends_with(".k.bias")
}

/// Compares the analytic gradient already accumulated in `store` against
/// finite differences of `loss` at `n_probes` random parameter coordinates.
pub fn check_params<F, R>(store: &mut ParamStore, n_probes: usize, rng: &mut R, loss: F) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
    R: Rng + ?Sized,
{
    check_params_except(store, n_probes, rng, |_| false, loss)
}

/// [`check_params`] that also skips parameters matching `skip`, for models
/// with further shift-invariant coordinates.
pub fn check_params_except<F, R, S>(
    store: &mut ParamStore,
    n_probes: usize,
    rng: &mut R,
    skip: S,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
    R: Rng + ?Sized,
    S: Fn(&str) -> bool,
{
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| {
            let name = store.name(id);
            !store.value(id).data().is_empty() && !softmax_invariant(name) && !skip(name)
        })
        .collect();
    let mut report = GradCheckReport::default();
    for _ in 0..n_probes {
        let id = ids[rng.random_range(0..ids.len())];
        let index = rng.random_range(0..store.value(id).data().len());
        let analytic = store.grad(id).data()[index];
        let numeric = central_difference(store, id, index, DEFAULT_EPS, &mut loss);
        report.probes.push(Probe {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    report
}
