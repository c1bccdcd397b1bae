use super::{Graph, NumericsError, ParamStore, Var};

/// Outcome of comparing backward-pass gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and coordinate of the worst comparison.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates where either side was NaN or infinite.
    pub non_finite: Vec<(String, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < self.tolerance
    }
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks every coordinate of every parameter in `store`.
///
/// `f` must build a scalar from the parameters; it is re-run twice per
/// coordinate on perturbed copies of the store.
pub fn grad_check<F>(f: F, store: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumericsError>,
{
    grad_check_subset(f, store, h, tol, None)
}

/// Like [`grad_check`] but limits each parameter to at most `per_param`
/// evenly spaced coordinates when given.
pub fn grad_check_subset<F>(
    f: F,
    store: &ParamStore,
    h: f64,
    tol: f64,
    per_param: Option<usize>,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads, store);

    let eval = |s: &ParamStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let v = f(&mut g, s)?;
        Ok(g.value(v).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        non_finite: Vec::new(),
        tolerance: tol,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.value(id).len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            probe.value_mut(id).data_mut()[c] = orig + h;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[c] = orig - h;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic.get(id)[c];
            report.checked += 1;
            if !numeric.is_finite() || !exact.is_finite() {
                report.non_finite.push((store.name(id).to_string(), c));
                continue;
            }
            let err = relative_error(exact, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), c));
            }
        }
    }
    Ok(report)
}
