//! Central finite-difference verification of tape gradients.

use crate::tensor::{Graph, ParamId, ParameterStore, Result, TensorError, Var};

/// Step used for central differences.
pub const EPSILON: f32 = 1e-3;
/// Agreement tolerance.
pub const TOLERANCE: f64 = 1e-3;

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Number of scalar parameters compared.
    pub checked: usize,
    /// Largest scaled error `|a − n| / max(1, |a|, |n|)`.
    pub max_error: f64,
    /// Parameter name and flat index at which `max_error` occurred.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error <= tolerance
    }
}

/// Scaled disagreement between an analytic and a numeric derivative. The
/// denominator never drops below one, so derivatives near zero are judged on
/// absolute error: in 32-bit arithmetic the central difference of an O(1)
/// loss carries about 1e-4 of rounding noise at this step size.
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares backward gradients of the scalar built by `loss` against central
/// differences for every scalar of every parameter in `params` (all stored
/// parameters when `None`). `loss` must be deterministic.
pub fn check_gradients<F>(store: &mut ParameterStore, params: Option<&[ParamId]>, eps: f32, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?;
        g.param_grads()
    };
    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        let l = loss(&mut g)?;
        let v = g.value(l);
        if v.len() != 1 {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item() as f64)
    };
    let mut report = GradCheckReport { checked: 0, max_error: 0.0, worst: None, worst_analytic: 0.0, worst_numeric: 0.0 };
    for id in ids {
        let n = store.get(id).len();
        let grad = analytic.get(id);
        for k in 0..n {
            let original = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = original + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[k] = original - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[k] = original;
            // The perturbation actually applied after f32 rounding.
            let step = (original + eps) as f64 - (original - eps) as f64;
            let numeric = (plus - minus) / step;
            let a = grad.map_or(0.0, |g| g[k] as f64);
            let err = scaled_error(a, numeric);
            report.checked += 1;
            if err > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(err);
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{SeededEngine, Tensor};

    #[test]
    fn quadratic_passes() {
        let mut store = ParameterStore::new();
        let w = store.insert("w", Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        let r = check_gradients(&mut store, None, EPSILON, |g| {
            let v = g.param(w);
            let sq = g.mul(v, v)?;
            g.sum(sq)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passes(TOLERANCE), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // clamp zeroes the gradient while the clamp is active; a check
        // straddling the boundary must notice the kink.
        let mut store = ParameterStore::new();
        let w = store.insert("w", Tensor::scalar(1.0)).unwrap();
        let r = check_gradients(&mut store, None, 0.5, |g| {
            let v = g.param(w);
            let c = g.clamp(v, -10.0, 1.0)?;
            let s = g.scale(c, 4.0)?;
            g.sum(s)
        })
        .unwrap();
        assert!(!r.passes(TOLERANCE));
    }

    #[test]
    fn untouched_params_have_zero_numeric_gradient() {
        let mut rng = SeededEngine::new(3);
        let mut store = ParameterStore::new();
        let a = store.xavier("a", 2, 2, &mut rng).unwrap();
        let _unused = store.xavier("b", 2, 2, &mut rng).unwrap();
        let r = check_gradients(&mut store, None, EPSILON, |g| {
            let v = g.param(a);
            g.sum(v)
        })
        .unwrap();
        assert_eq!(r.checked, 8);
        assert!(r.passes(TOLERANCE));
    }
}
