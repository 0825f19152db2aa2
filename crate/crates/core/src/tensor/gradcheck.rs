use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares the reverse-mode gradient of a scalar graph function against
/// central differences with step `h`.
///
/// Returns the maximum over coordinates of
/// `|autodiff - fd| / (|fd| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, usize::MAX)
}

/// Multi-input version of [`finite_diff_check`]. At most `max_coords`
/// coordinates per input are probed, spread evenly over the buffer, which
/// keeps checks on large parameter sets affordable.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, grad) in analytic.iter().enumerate() {
        let n = inputs[slot].numel();
        let step = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[slot].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[slot].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max((grad[i] - fd).abs() / (fd.abs() + 1e-8));
        }
    }
    Ok(worst)
}
