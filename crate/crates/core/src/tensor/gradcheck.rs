use super::{Graph, Result, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` receives a fresh graph and one parameter leaf per entry of `inputs`
/// and must return a `1 x 1` node. The result is the largest
/// `|analytic - numeric| / max(1, |analytic|)` over every input entry.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.shape() != (1, 1) {
            return Err(TensorError::NotScalar {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        let v = v.get(0, 0);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()))
        })
        .collect();

    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for t in 0..xs.len() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + eps;
            let plus = eval(&xs)?;
            xs[t].data_mut()[i] = orig - eps;
            let minus = eval(&xs)?;
            xs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
