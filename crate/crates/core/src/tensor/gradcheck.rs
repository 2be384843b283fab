use super::{ParamId, ParamStore, Tensor};

/// Absolute floor on the relative-error denominator, so gradients that are
/// truly zero are judged on an absolute scale instead of blowing up.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error.is_nan() || p.max_rel_error >= self.tolerance)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients with central differences of `f`.
///
/// `f` must be deterministic (dropout off). `analytic` holds one gradient per
/// parameter in store order.
pub fn finite_diff_check<F>(
    mut f: F,
    store: &ParamStore,
    analytic: &[Tensor],
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    assert_eq!(
        analytic.len(),
        store.len(),
        "one analytic gradient per parameter"
    );
    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for (i, grad) in analytic.iter().enumerate() {
        let id = ParamId(i);
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..grad.numel() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = f(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = f(&work);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    GradCheckReport {
        params,
        tolerance: tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let analytic = vec![Tensor::zeros(&[3])];
        let report = finite_diff_check(|_| 4.2, &store, &analytic, 1e-5, 1e-8);
        assert!(report.passed());
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn dot_product_is_exact() {
        let x = Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        let f = |s: &ParamStore| -> (f64, Vec<Tensor>) {
            let mut g = Graph::eval();
            let wv = g.param(s, w);
            let xv = g.constant(x.clone());
            let p = g.mul(wv, xv).unwrap();
            let l = g.sum(p);
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.param_grads(s))
        };
        let (_, analytic) = f(&store);
        let report = finite_diff_check(|s| f(s).0, &store, &analytic, 1e-5, 1e-8);
        assert!(report.passed(), "{:?}", report.params);
    }

    #[test]
    fn report_flags_wrong_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1], vec![2.0]).unwrap());
        let wrong = vec![Tensor::new(&[1], vec![1.0]).unwrap()];
        let report = finite_diff_check(
            |s| s.get(ParamId(0)).item().powi(2),
            &store,
            &wrong,
            1e-5,
            1e-4,
        );
        assert!(!report.passed());
        assert_eq!(report.failures()[0].name, "w");
    }
}
