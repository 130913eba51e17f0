use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Worst coordinates, largest error first.
    pub worst: Vec<CoordinateError>,
}

/// Compares tape gradients with central finite differences on up to
/// `per_param` randomly chosen coordinates of every parameter.
///
/// `loss_fn` must build a deterministic scalar loss on a fresh evaluation
/// graph.
pub fn grad_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    per_param: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, s);
        g.scalar(loss)
    };

    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store);
    g.backward(loss, store);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.value(id).len();
        let picks = sample(&mut rng, n, per_param.min(n)).into_vec();
        for i in picks {
            let analytic = store.get(id).grad.data()[i];
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel_err =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            errors.push(CoordinateError {
                param: store.get(id).name.clone(),
                index: i,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    errors.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = errors.first().map_or(0.0, |e| e.rel_err);
    let checked = errors.len();
    errors.truncate(5);
    let report = GradCheckReport {
        checked,
        max_rel_err,
        worst: errors,
    };
    if max_rel_err.is_nan() || max_rel_err > tolerance {
        let worst = report
            .worst
            .iter()
            .map(|e| {
                format!(
                    "{}[{}] analytic={:.6e} numeric={:.6e}",
                    e.param, e.index, e.analytic, e.numeric
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::GradCheck {
            max_rel_err,
            tolerance,
            worst,
        });
    }
    Ok(report)
}
