//! Central finite-difference checks of tape gradients.

use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::optim::{BoundParams, ParamStore};

/// Per-parameter relative error `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub errors: BTreeMap<String, f64>,
    pub num_scalars: usize,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.values().cloned().fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the tape gradient of the scalar `f` with central differences
/// of step `h` for every scalar in `params`. `f` must be deterministic.
pub fn check_gradients<F>(params: &ParamStore, h: f64, f: F) -> GradCheck
where
    F: for<'t> Fn(&BoundParams<'t>, &'t Tape) -> Var<'t>,
{
    let eval = |store: &ParamStore| {
        let tape = Tape::new();
        let p = store.bind(&tape);
        f(&p, &tape).item()
    };
    let tape = Tape::new();
    let p = params.bind(&tape);
    let loss = f(&p, &tape);
    let grads = tape.backward(loss);
    let analytic = p.gradients(&grads);

    let mut errors = BTreeMap::new();
    let mut work = params.clone();
    for (name, value) in params.iter() {
        let mut numeric = Vec::with_capacity(value.len());
        for idx in 0..value.len() {
            let orig = value.as_slice_memory_order().expect("contiguous")[idx];
            work.get_mut(name).as_slice_memory_order_mut().expect("contiguous")[idx] = orig + h;
            let up = eval(&work);
            work.get_mut(name).as_slice_memory_order_mut().expect("contiguous")[idx] = orig - h;
            let down = eval(&work);
            work.get_mut(name).as_slice_memory_order_mut().expect("contiguous")[idx] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let tape_grad: Vec<f64> = match analytic.get(name) {
            Some(g) => g.as_slice_memory_order().expect("contiguous").to_vec(),
            None => vec![0.0; value.len()],
        };
        let diff: Vec<f64> = tape_grad.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&tape_grad).max(norm(&numeric));
        let err = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        errors.insert(name.clone(), err);
    }
    GradCheck {
        errors,
        num_scalars: params.num_scalars(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient_matches() {
        let mut params = ParamStore::new();
        params.insert("w", array![[0.3, -1.2], [2.0, 0.5]]);
        let r = check_gradients(&params, 1e-6, |p, _| p.get("w").square().sum());
        assert!(r.max_error() < 1e-8, "{r:?}");
        assert_eq!(r.num_scalars, 4);
    }

    #[test]
    fn detached_path_is_detected() {
        let mut params = ParamStore::new();
        params.insert("w", array![[1.5]]);
        // the tape sees no dependence, finite differences do
        let r = check_gradients(&params, 1e-6, |p, tape| {
            let w = p.get("w");
            tape.leaf(w.value().mapv(|v| v * v)) + w.detach()
        });
        assert!(r.max_error() > 0.5);
    }
}
