use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_analytic - g_numeric| / max(1, |g_numeric|)` over coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(y).to_vec()));
    }
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };

    let mut worst = (0.0f64, 0usize);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 < tol,
    })
}
