use std::collections::{HashMap, HashSet};
use std::sync::atomic::Ordering;

use super::conv::{self, ConvGeometry, TransposeGeometry};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Recorded operation with handles to its parents and whatever the
/// vector-Jacobian product needs from the forward pass.
pub(crate) enum Op<T: Float> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    Neg(Tensor<T>),
    Abs(Tensor<T>),
    Log(Tensor<T>),
    Exp(Tensor<T>),
    ScalarMul(Tensor<T>, T),
    AddScalar(Tensor<T>),
    Relu(Tensor<T>),
    Sigmoid(Tensor<T>),
    Clamp(Tensor<T>, T, T),
    Sum(Tensor<T>),
    Mean(Tensor<T>),
    Reshape(Tensor<T>),
    MatMul(Tensor<T>, Tensor<T>),
    Transpose(Tensor<T>),
    Conv2d {
        input: Tensor<T>,
        kernel: Tensor<T>,
        bias: Tensor<T>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Tensor<T>,
        kernel: Tensor<T>,
        geom: TransposeGeometry,
    },
    MaxPool2d {
        input: Tensor<T>,
        argmax: Vec<usize>,
    },
    Concat(Vec<Tensor<T>>),
    SliceChannels {
        input: Tensor<T>,
        start: usize,
    },
    ExpandChannels(Tensor<T>),
}

impl<T: Float> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "negate",
            Op::Abs(_) => "abs",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::ScalarMul(..) => "scalar-mul",
            Op::AddScalar(_) => "add-scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv-transpose2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Concat(_) => "concat",
            Op::SliceChannels { .. } => "slice-channels",
            Op::ExpandChannels(_) => "expand-channels",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Neg(a)
            | Op::Abs(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::ScalarMul(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::ExpandChannels(a) => vec![a],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![input, kernel, bias],
            Op::ConvTranspose2d { input, kernel, .. } => vec![input, kernel],
            Op::MaxPool2d { input, .. } | Op::SliceChannels { input, .. } => vec![input],
            Op::Concat(parts) => parts.iter().collect(),
        }
    }

    /// Vector-Jacobian product: maps the output gradient onto each parent, in
    /// the order returned by [`Op::parents`]. `out` is the forward result.
    fn vjp(&self, out: &[T], g: &[T]) -> Vec<Vec<T>> {
        let zip = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> { a.iter().zip(g).map(|(&x, &gi)| f(x, gi)).collect() };
        match self {
            Op::Add(..) => vec![g.to_vec(), g.to_vec()],
            Op::Sub(..) => vec![g.to_vec(), g.iter().map(|&v| -v).collect()],
            Op::Mul(a, b) => vec![zip(b.data(), &|bv, gi| bv * gi), zip(a.data(), &|av, gi| av * gi)],
            Op::Div(a, b) => {
                let ga = zip(b.data(), &|bv, gi| gi / bv);
                let gb = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .zip(g)
                    .map(|((&av, &bv), &gi)| -gi * av / (bv * bv))
                    .collect();
                vec![ga, gb]
            }
            Op::Neg(_) => vec![g.iter().map(|&v| -v).collect()],
            Op::Abs(a) => vec![zip(a.data(), &|x, gi| {
                if x > T::zero() {
                    gi
                } else if x < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            })],
            Op::Log(a) => vec![zip(a.data(), &|x, gi| gi / x)],
            Op::Exp(_) => vec![zip(out, &|y, gi| y * gi)],
            Op::ScalarMul(_, s) => vec![g.iter().map(|&v| v * *s).collect()],
            Op::AddScalar(_) => vec![g.to_vec()],
            Op::Relu(a) => vec![zip(a.data(), &|x, gi| if x > T::zero() { gi } else { T::zero() })],
            Op::Sigmoid(_) => vec![zip(out, &|y, gi| gi * y * (T::one() - y))],
            Op::Clamp(a, lo, hi) => vec![zip(a.data(), &|x, gi| {
                if x >= *lo && x <= *hi {
                    gi
                } else {
                    T::zero()
                }
            })],
            Op::Sum(a) => vec![vec![g[0]; a.len()]],
            Op::Mean(a) => vec![vec![g[0] / T::of(a.len() as f64); a.len()]],
            Op::Reshape(_) => vec![g.to_vec()],
            Op::ExpandChannels(a) => {
                let plane = a.len();
                let mut acc = vec![T::zero(); plane];
                for chunk in g.chunks(plane) {
                    acc.iter_mut().zip(chunk).for_each(|(s, &v)| *s += v);
                }
                vec![acc]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let bt = super::ops::transpose_raw(b.data(), k, n);
                let at = super::ops::transpose_raw(a.data(), m, k);
                vec![
                    super::ops::matmul_raw(g, &bt, m, n, k),
                    super::ops::matmul_raw(&at, g, k, m, n),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                vec![super::ops::transpose_raw(g, c, r)]
            }
            Op::Conv2d {
                input, kernel, geom, ..
            } => vec![
                conv::conv2d_grad_input(g, kernel.data(), geom),
                conv::conv2d_grad_kernel(g, input.data(), geom),
                conv::conv2d_grad_bias(g, geom),
            ],
            Op::ConvTranspose2d { input, kernel, geom } => vec![
                conv::conv_transpose2d_grad_input(g, kernel.data(), geom),
                conv::conv_transpose2d_grad_kernel(g, input.data(), geom),
            ],
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![T::zero(); input.len()];
                for (&src, &v) in argmax.iter().zip(g) {
                    gi[src] += v;
                }
                vec![gi]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let chunk = g[offset..offset + p.len()].to_vec();
                        offset += p.len();
                        chunk
                    })
                    .collect()
            }
            Op::SliceChannels { input, start } => {
                let plane: usize = input.shape()[1..].iter().product();
                let mut gi = vec![T::zero(); input.len()];
                gi[start * plane..start * plane + g.len()].copy_from_slice(g);
                vec![gi]
            }
        }
    }
}

/// Leaf gradients produced by one backward pass, keyed by tensor identity.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Float> {
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient for `t`, or zeros of the right length when the loss does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        self.get(t)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); t.len()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Float> Tensor<T> {
    /// Reverse topological order of the recorded subgraph reachable from `self`.
    pub(crate) fn tape_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.node.op {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order.reverse();
        order
    }

    fn run_backward(&self) -> Result<(Vec<Tensor<T>>, Gradients<T>)> {
        if self.rank() != 0 && self.len() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Autograd(
                "loss does not depend on any gradient-tracking tensor".into(),
            ));
        }
        if self.node.consumed.swap(true, Ordering::SeqCst) {
            return Err(Error::Autograd(
                "backward already ran on this graph; call reset_backward first".into(),
            ));
        }

        let order = self.tape_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        let mut leaves = Vec::new();
        let mut out = Gradients::default();

        for t in order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.node.op {
                None => {
                    leaves.push(t.clone());
                    out.grads.insert(t.id(), g);
                }
                Some(op) => {
                    let parent_grads = op.vjp(t.data(), &g);
                    for (p, pg) in op.parents().into_iter().zip(parent_grads) {
                        if !p.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok((leaves, out))
    }

    /// Backpropagates from this scalar and adds `d(self)/d(leaf)` into every
    /// gradient-tracking leaf's grad slot.
    pub fn backward(&self) -> Result<()> {
        let (leaves, grads) = self.run_backward()?;
        for leaf in leaves {
            if let Some(g) = grads.get(&leaf) {
                leaf.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Backpropagates from this scalar and returns leaf gradients without
    /// touching any grad slot. Used for ordered reduction across samples.
    pub fn gradients(&self) -> Result<Gradients<T>> {
        self.run_backward().map(|(_, g)| g)
    }

    /// Re-arms a graph so that backward may run on it again.
    pub fn reset_backward(&self) {
        self.node.consumed.store(false, Ordering::SeqCst);
    }
}
