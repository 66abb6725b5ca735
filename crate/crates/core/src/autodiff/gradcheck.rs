use super::{Graph, Result, Tensor, Var};

/// Worst relative disagreement between reverse-mode gradients of `f` at
/// `input` and central differences with step `eps`.
///
/// Each coordinate's error is `|analytic − numeric| / max(|analytic|,
/// |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |values: Vec<f64>, grad: bool| -> Result<(Graph, Var, Var)> {
        let mut g = Graph::new();
        let t = Tensor::new(input.dims().to_vec(), values)?.with_requires_grad(grad);
        let x = g.leaf(&t);
        let y = f(&mut g, x)?;
        Ok((g, x, y))
    };
    let (mut g, x, y) = eval(input.values().to_vec(), true)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);
    let mut worst = 0.0f64;
    let mut probe = input.values().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (g1, _, y1) = eval(probe.clone(), false)?;
        probe[i] = orig - eps;
        let (g2, _, y2) = eval(probe.clone(), false)?;
        probe[i] = orig;
        let numeric = (g1.scalar(y1) - g2.scalar(y2)) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
