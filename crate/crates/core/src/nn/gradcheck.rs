//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-4,
            coords_per_param: None,
            seed: 0,
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)` where the floor scales with
/// the loss magnitude, since finite-difference rounding noise does too.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = 1e-7 * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let v = loss_fn(&mut g)?;
    Ok(g.value(v).item())
}

pub fn grad_check<F>(store: &ParamStore, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut graph = Graph::new(store);
    let loss_var = loss_fn(&mut graph)?;
    let loss = graph.value(loss_var).item();
    let again = eval(store, &loss_fn)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: loss,
            second: again,
        });
    }
    let grads = graph.backward(loss_var);
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        loss,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + opts.epsilon;
            let plus = eval(&work, &loss_fn)?;
            work.get_mut(id).data_mut()[c] = orig - opts.epsilon;
            let minus = eval(&work, &loss_fn)?;
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let analytic = grads.get(id).data()[c];
            let rel = relative_error(analytic, numeric, loss);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Mat;

    #[test]
    fn sum_of_squares_agrees() {
        let mut store = ParamStore::new(3);
        let id = store.add_uniform("w", 3, 3, 1.0);
        let report = grad_check(
            &store,
            |g| {
                let w = g.param(id);
                let zero = g.constant(Mat::zeros(3, 3));
                g.mse(w, zero)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 9);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new(3);
        store.add_uniform("w", 2, 2, 1.0);
        let report = grad_check(
            &store,
            |g| {
                let a = g.constant(Mat::scalar(2.0));
                let b = g.constant(Mat::scalar(0.5));
                g.mse(a, b)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterministic_loss_is_detected() {
        use std::cell::Cell;
        let mut store = ParamStore::new(3);
        store.add_uniform("w", 1, 1, 1.0);
        let counter = Cell::new(0.0);
        let err = grad_check(
            &store,
            |g| {
                counter.set(counter.get() + 1.0);
                let a = g.constant(Mat::scalar(counter.get()));
                let b = g.constant(Mat::scalar(0.0));
                g.mse(a, b)
            },
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
