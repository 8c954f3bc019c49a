use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar loss on a fresh tape from leaf vars holding `params`.
/// Every coordinate of every parameter is perturbed by `±step`; the return
/// value is the largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_sampled(f, params, step, usize::MAX, 1e-8)
}

/// Like [`check_gradients`], but perturbs at most `per_param` evenly spaced
/// coordinates of each parameter (always including the first and last) and
/// uses `floor` in place of `1e-8` in the denominator. Coordinates whose true
/// gradient is zero otherwise report central-difference round-off as error.
pub fn check_gradients_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    step: f64,
    per_param: usize,
    floor: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, (p, v)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.to_vec())
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.to_vec();
        for j in sample_indices(base.len(), per_param) {
            let a = analytic[j];
            let mut plus = base.clone();
            plus[j] += step;
            work[pi] = Tensor::new(p.shape(), plus)?;
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus[j] -= step;
            work[pi] = Tensor::new(p.shape(), minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        work[pi] = p.clone();
    }
    Ok(worst)
}

fn sample_indices(len: usize, k: usize) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    if k <= 1 {
        return vec![0; k.min(len)];
    }
    let mut out: Vec<usize> = (0..k).map(|i| i * (len - 1) / (k - 1)).collect();
    out.dedup();
    out
}
