//! Central finite-difference checking of `backward`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the per-coordinate relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn merge(&mut self, other: GradCheck) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares `backward` against central differences for every coordinate of
/// every input tensor. `f` builds a scalar from input nodes.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut report = GradCheck { max_rel_error: 0.0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let up = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let down = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            report.merge(GradCheck {
                max_rel_error: relative_error(grad.data()[i], numeric),
                checked: 1,
            });
        }
    }
    Ok(report)
}

/// Which coordinates of each parameter to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per parameter, sampled with a seed.
    Sample { per_param: usize, seed: u64 },
}

/// Finite-difference check with respect to stored parameters. `f` builds a
/// scalar loss on a graph that reads from the store.
pub fn param_finite_difference_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    coverage: Coverage,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_store(store);
        let out = f(&mut g)?;
        g.backward(out)?;
        g.param_grads()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_store(store);
        let out = f(&mut g)?;
        g.value(out).item()
    };
    let mut rng = match coverage {
        Coverage::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };
    let mut report = GradCheck { max_rel_error: 0.0, checked: 0 };
    for &id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sample { per_param, .. }, Some(rng)) if per_param < n => {
                sample(rng, n, per_param).into_vec()
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let analytic = grads.get(&id).map_or(0.0, |t| t.data()[i]);
            let x0 = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x0 + eps;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = x0 - eps;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            report.merge(GradCheck {
                max_rel_error: relative_error(analytic, numeric),
                checked: 1,
            });
        }
    }
    Ok(report)
}
