use super::{AutodiffError, Graph, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    /// Largest relative discrepancy over all coordinates.
    pub max_discrepancy: f64,
    /// Coordinate at which `max_discrepancy` occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Denominator floor for the relative discrepancy, so that coordinates whose
/// true gradient is zero are judged on absolute error instead.
pub const DISCREPANCY_FLOOR: f64 = 1e-6;

pub fn relative_discrepancy(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(DISCREPANCY_FLOOR);
    (analytic - numeric).abs() / scale
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let leaf = g.constant(x.clone());
    let out = f(&mut g, leaf)?;
    let value = g.value(out);
    if !value.is_scalar() {
        return Err(AutodiffError::NonScalarRoot { shape: value.shape().to_vec() });
    }
    Ok(value.item())
}

/// Checks the gradient of the scalar function `f` at `x` against central
/// differences with step `eps`. Passes iff every coordinate's relative
/// discrepancy is at most `tol`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!("finite-difference step must be positive, got {}", eps)));
    }
    if !x.all_finite() {
        return Err(AutodiffError::NonFinite { what: "gradient-check input".into() });
    }

    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    if !g.value(out).all_finite() {
        return Err(AutodiffError::NonFinite { what: "function value".into() });
    }
    g.backward(out)?;
    let analytic = g.grad(leaf).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AutodiffError::NonFinite { what: format!("function value at perturbed coordinate {}", i) });
        }
        numeric.push((plus - minus) / (2.0 * eps));
    }
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(AutodiffError::NonFinite { what: "analytic gradient".into() });
    }

    let (worst_index, max_discrepancy) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_discrepancy(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });

    Ok(GradCheckReport { passed: max_discrepancy <= tol, max_discrepancy, worst_index, analytic, numeric })
}
