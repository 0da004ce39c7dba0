use super::autograd::Op;
use super::{Float, Tensor};
use crate::error::Result;

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements left out because the `±h` probes took different branches of a
    /// piecewise op (ReLU, abs, clamp, max pooling). Always 0 for [`grad_check`].
    pub skipped: usize,
    pub pass: bool,
}

/// Checks `f`'s gradient with respect to every element of every input.
///
/// Each element is perturbed by `±h` and `(f(x+h) - f(x-h)) / 2h` is compared
/// with the autodiff gradient using `|a - b| / max(|a|, |b|, 1e-8)`.
/// `f` must return a scalar and is evaluated on fresh gradient-tracking copies
/// of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    run(f, inputs, h, tol, false)
}

/// Like [`grad_check`], but only compares central differences whose probes
/// select the same branch as `x` in every piecewise op. Across such a kink a
/// central difference does not approximate the derivative at `x`. The step is
/// shrunk to `h/10` and `h/100` before an element is counted as skipped.
pub fn grad_check_piecewise<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    run(f, inputs, h, tol, true)
}

fn run<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64, piecewise: bool) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(Tensor::with_grad).collect();
    let loss = f(&leaves)?;
    let base_pattern = if piecewise { branch_pattern(&loss) } else { Vec::new() };
    let grads = loss.gradients()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        pass: true,
    };

    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaf);
        for (j, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> Result<(f64, Vec<usize>)> {
                let probe: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut data = t.to_vec();
                        if k == i {
                            data[j] += delta;
                        }
                        // tracked probes record the graph so its branches can be read back
                        if piecewise {
                            Tensor::param(t.shape(), data)
                        } else {
                            Tensor::new(t.shape(), data)
                        }
                    })
                    .collect::<Result<_>>()?;
                let out = f(&probe)?;
                let pattern = if piecewise { branch_pattern(&out) } else { Vec::new() };
                Ok((out.item()?, pattern))
            };
            // near a kink, shrink the step until both probes stay on x's branch
            let steps: &[f64] = if piecewise { &[h, h / 10.0, h / 100.0] } else { &[h] };
            let mut numeric = None;
            for &step in steps {
                let (plus, p_plus) = eval(step)?;
                let (minus, p_minus) = eval(-step)?;
                if p_plus == base_pattern && p_minus == base_pattern {
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, j));
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}

/// Branch taken at every element of every piecewise op in the recorded graph,
/// in a traversal order that depends only on the graph's structure.
fn branch_pattern<T: Float>(root: &Tensor<T>) -> Vec<usize> {
    let mut out = Vec::new();
    for t in root.tape_order() {
        let Some(op) = &t.node.op else { continue };
        match op {
            Op::Relu(x) => out.extend(x.data().iter().map(|&v| (v > T::zero()) as usize)),
            Op::Abs(x) => out.extend(x.data().iter().map(|&v| {
                if v > T::zero() {
                    2
                } else if v < T::zero() {
                    0
                } else {
                    1
                }
            })),
            Op::Clamp(x, lo, hi) => out.extend(x.data().iter().map(|&v| {
                if v < *lo {
                    0
                } else if v > *hi {
                    2
                } else {
                    1
                }
            })),
            Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
            _ => {}
        }
    }
    out
}
