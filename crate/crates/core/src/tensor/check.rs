use super::{Graph, Result, Tensor, Var};

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps components whose true gradient is (numerically) zero
/// from dividing cancellation noise by nothing.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub max_rel_error: f64,
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every input tensor.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let eval = |x: &Tensor| -> Result<f64> {
            let g = Graph::new();
            let vars: Vec<Var<'_>> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { x.clone() } else { t.clone() }))
                .collect();
            Ok(f(&g, &vars)?.item())
        };
        let n = finite_diff_grad(eval, &inputs[k], h)?;
        worst = worst.max(max_relative_error(a, &n, floor));
        numeric.push(n);
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|x| Ok(x.item() * x.item()), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn exp_at_zero() {
        let g = finite_diff_grad(|x| Ok(x.item().exp()), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!((g.item() - 1.0).abs() < 1e-9);
    }
}
