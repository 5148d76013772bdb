use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::store::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::rng::SeedKey;
use crate::scalar::Scalar;

/// Below this, `|a| + |n|` is at the rounding noise of a central difference
/// (about 1e−11 absolute for a loss of order 10 at ε = 1e−5), so the error is
/// measured against the floor instead.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Worst coordinate: parameter name and flat index.
    pub worst: Option<(String, usize)>,
}

/// Compare analytic gradients with central differences on up to
/// `max_coords` trainable coordinates, sampled with `seed`.
///
/// Relative error is `|a − n| / max(DENOM_FLOOR, |a| + |n|)`. `loss_fn` must
/// be deterministic for fixed parameters.
pub fn grad_check<S, F>(
    store: &mut ParameterStore<S>,
    loss_fn: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<'_, S>) -> Result<Var>,
{
    let eval = |store: &ParameterStore<S>| -> Result<f64> {
        let mut g = Graph::new(store);
        let v = loss_fn(&mut g)?;
        let x = g.value(v).item().to_f64().unwrap_or(f64::NAN);
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {x}")));
        }
        Ok(x)
    };

    let analytic = {
        let mut g = Graph::new(&*store);
        let v = loss_fn(&mut g)?;
        let x = g.value(v).item();
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {x}")));
        }
        g.backward(v)?
    };

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = SeedKey::new(seed).stream_for("grad-check");
        let mut v = sample(&mut rng, coords.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: chosen.len(),
        worst: None,
    };
    for k in chosen {
        let (id, i) = coords[k];
        let a = analytic
            .param(id)
            .map_or(0.0, |t| t.data()[i].to_f64().unwrap());
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + S::lit(eps);
        let plus = eval(store);
        store.value_mut(id).data_mut()[i] = orig - S::lit(eps);
        let minus = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOM_FLOOR);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
