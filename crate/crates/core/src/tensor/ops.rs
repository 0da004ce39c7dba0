use super::{numel, Float, Op, Tensor};
use crate::error::{Error, Result};

pub(crate) fn matmul_raw<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl<T: Float> Tensor<T> {
    fn same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    fn map(&self, f: impl Fn(T) -> T) -> Vec<T> {
        self.data().iter().map(|&a| f(a)).collect()
    }

    fn unary(&self, data: Vec<T>, op: Op<T>) -> Tensor<T> {
        Tensor::from_op(self.shape().to_vec(), data, op)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "add")?;
        let data = self.zip_with(other, |a, b| a + b);
        Ok(self.unary(data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "sub")?;
        let data = self.zip_with(other, |a, b| a - b);
        Ok(self.unary(data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "mul")?;
        let data = self.zip_with(other, |a, b| a * b);
        Ok(self.unary(data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "div")?;
        if other.data().iter().any(|&v| v == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let data = self.zip_with(other, |a, b| a / b);
        Ok(self.unary(data, Op::Div(self.clone(), other.clone())))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(self.map(|a| -a), Op::Neg(self.clone()))
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(self.map(|a| a.abs()), Op::Abs(self.clone()))
    }

    /// Natural log. Non-positive entries are an error; clamp first.
    pub fn log(&self) -> Result<Tensor<T>> {
        if let Some(bad) = self
            .data()
            .iter()
            .find(|&&v| v.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater))
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(self.map(|a| a.ln()), Op::Log(self.clone())))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(self.map(|a| a.exp()), Op::Exp(self.clone()))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.unary(self.map(|a| a * s), Op::ScalarMul(self.clone(), s))
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary(self.map(|a| a + s), Op::AddScalar(self.clone()))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            self.map(|a| if a > T::zero() { a } else { T::zero() }),
            Op::Relu(self.clone()),
        )
    }

    /// Logistic sigmoid, evaluated without overflow and kept strictly inside (0, 1).
    pub fn sigmoid(&self) -> Tensor<T> {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let data = self.map(|x| {
            let s = if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            };
            // NaN must survive the clamp so divergence stays visible
            if s.is_nan() {
                s
            } else {
                s.max(lo).min(hi)
            }
        });
        self.unary(data, Op::Sigmoid(self.clone()))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        let data = self.map(|a| if a.is_nan() { a } else { a.max(lo).min(hi) });
        self.unary(data, Op::Clamp(self.clone(), lo, hi))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(Vec::new(), vec![s / T::of(self.len() as f64)], Op::Mean(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = match *self.shape() {
            [m, k] => (m, k),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("lhs must be rank 2, got {:?}", self.shape()),
                ))
            }
        };
        let n = match *other.shape() {
            [k2, n] if k2 == k => n,
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", self.shape(), other.shape()),
                ))
            }
        };
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = match *self.shape() {
            [r, c] => (r, c),
            _ => {
                return Err(Error::shape(
                    "transpose",
                    format!("rank 2 required, got {:?}", self.shape()),
                ))
            }
        };
        Ok(Tensor::from_op(
            vec![c, r],
            transpose_raw(self.data(), r, c),
            Op::Transpose(self.clone()),
        ))
    }

    /// Stacks tensors along the leading (channel) axis in argument order.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors given"))?;
        if first.rank() == 0 {
            return Err(Error::shape("concat", "cannot concatenate scalars"));
        }
        let tail = &first.shape()[1..];
        let mut channels = 0;
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[1..] != tail {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
            channels += p.shape()[0];
        }
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(tail);
        Ok(Tensor::from_op(shape, data, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start + count` along the leading axis.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor<T>> {
        if self.rank() == 0 || count == 0 || start + count > self.shape()[0] {
            return Err(Error::shape(
                "slice_channels",
                format!("{start}..{} out of {:?}", start + count, self.shape()),
            ));
        }
        let plane: usize = self.shape()[1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[0] = count;
        Ok(Tensor::from_op(
            shape,
            self.data()[start * plane..(start + count) * plane].to_vec(),
            Op::SliceChannels {
                input: self.clone(),
                start,
            },
        ))
    }

    /// Repeats a single-channel `[1 x ...]` tensor `channels` times along the leading axis.
    pub fn expand_channels(&self, channels: usize) -> Result<Tensor<T>> {
        if self.rank() == 0 || self.shape()[0] != 1 || channels == 0 {
            return Err(Error::shape(
                "expand_channels",
                format!("need a [1 x ...] tensor, got {:?}", self.shape()),
            ));
        }
        let mut data = Vec::with_capacity(self.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(self.data());
        }
        let mut shape = self.shape().to_vec();
        shape[0] = channels;
        Ok(Tensor::from_op(shape, data, Op::ExpandChannels(self.clone())))
    }
}
