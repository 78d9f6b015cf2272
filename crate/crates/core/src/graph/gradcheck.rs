//! Central finite-difference verification of analytic gradients.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per checked input, `|g_a - g_n| / max(|g_a|, |g_n|)`
    /// over the checked entries.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

/// Compares the gradient of `build(inputs)` against central differences
/// with step `eps`.
///
/// At most `max_entries` entries per input are perturbed (evenly strided);
/// pass `usize::MAX` to check all of them.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, max_entries: usize, build: F) -> GradCheckReport
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss);

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let g = Graph::<f64>::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&g, &vars);
        let v = g.value(out).item();
        v
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut entries_checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let n = input.len();
        let stride = if n <= max_entries { 1 } else { n.div_ceil(max_entries) };
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            entries_checked += 1;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        per_input.push(if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale });
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    GradCheckReport { per_input, max_rel_err, entries_checked }
}
