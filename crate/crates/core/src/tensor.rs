//! Dense row-major `f64` tensors.
//!
//! Only the handful of operations the autodiff tape records are provided.
//! Binary operations accept equal shapes, or one operand whose shape is a
//! suffix of the other's (a vector against the trailing dimension of a
//! matrix, or a rank-0 scalar against anything).
//!
//! Values are kept finite. The one exception is `log(0) = -inf`, which
//! downstream operations may carry along; NaN and overflow from finite
//! inputs are reported as [`Error::Numeric`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Neg,
    /// `log(1 + e^x)`, evaluated without overflow.
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// How the smaller operand of a binary op is laid over the larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand repeats along the leading dimensions of the left.
    Right,
    /// Left operand repeats along the leading dimensions of the right.
    Left,
}

pub(crate) fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if a == b {
        Ok((Broadcast::Same, a.to_vec()))
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok((Broadcast::Right, a.to_vec()))
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok((Broadcast::Left, b.to_vec()))
    } else {
        Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "expected a single value, tensor has shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        let mut out = Vec::with_capacity(self.data.len());
        for &x in &self.data {
            let y = match op {
                UnaryOp::Exp => x.exp(),
                UnaryOp::Log => {
                    if x < 0.0 {
                        return Err(Error::numeric(format!("log of negative value {x}")));
                    }
                    x.ln()
                }
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Neg => -x,
                UnaryOp::Softplus => softplus(x),
            };
            if y.is_nan() || (y.is_infinite() && x.is_finite() && !(op == UnaryOp::Log && x == 0.0))
            {
                return Err(Error::numeric(format!("{op:?}({x}) is not finite")));
            }
            out.push(y);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        let (plan, shape) = broadcast_plan(&self.shape, &other.shape)?;
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        let (la, lb) = (self.data.len().max(1), other.data.len().max(1));
        for i in 0..n {
            let (x, y) = match plan {
                Broadcast::Same => (self.data[i], other.data[i]),
                Broadcast::Right => (self.data[i], other.data[i % lb]),
                Broadcast::Left => (self.data[i % la], other.data[i]),
            };
            let z = match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        return Err(Error::numeric(format!("division of {x} by zero")));
                    }
                    x / y
                }
            };
            if z.is_nan() || (z.is_infinite() && x.is_finite() && y.is_finite()) {
                return Err(Error::numeric(format!("{op:?}({x}, {y}) is not finite")));
            }
            out.push(z);
        }
        Ok(Tensor { shape, data: out })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Log)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Neg)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Softplus)
    }

    /// Scales every element; never fails on finite input.
    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(Error::shape(format!(
                "matmul needs two matrices, got {:?} and {:?}",
                self.shape, other.shape
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let &[m, n] = self.shape.as_slice() else {
            return Err(Error::shape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Reduces along `axis`, or over every element when `axis` is `None`
    /// (yielding a rank-0 tensor).
    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
        let Some(axis) = axis else {
            let total: f64 = self.data.iter().sum();
            let value = match op {
                ReduceOp::Sum => total,
                ReduceOp::Mean => {
                    if self.data.is_empty() {
                        return Err(Error::shape("mean of an empty tensor"));
                    }
                    total / self.data.len() as f64
                }
            };
            return Ok(Tensor::scalar(value));
        };
        let (outer, extent, inner) = self.axis_split(axis)?;
        if op == ReduceOp::Mean && extent == 0 {
            return Err(Error::shape("mean over an empty axis"));
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &self.data[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        if op == ReduceOp::Mean {
            let n = extent as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceOp::Sum, axis)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceOp::Mean, axis)
    }

    /// Element-wise maximum along `axis`; used for log-sum-exp shifts.
    pub fn max_along(&self, axis: usize) -> Result<Tensor> {
        let (outer, extent, inner) = self.axis_split(axis)?;
        if extent == 0 {
            return Err(Error::shape("max over an empty axis"));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &self.data[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst = dst.max(v);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// `(outer, extent, inner)` element counts around `axis`.
    pub(crate) fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Selects slices along the leading axis. Indices may repeat.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let Some((&rows, rest)) = self.shape.split_first() else {
            return Err(Error::shape("gather needs rank >= 1"));
        };
        let width: usize = rest.iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape(format!(
                    "gather index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Applies `f` element-wise without finiteness checks.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn elementwise_examples() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(Tensor::vector(vec![0.0, 0.0]).exp().unwrap().data(), &[1.0, 1.0]);
        assert_eq!(Tensor::vector(vec![1.0]).log().unwrap().data(), &[0.0]);
    }

    #[test]
    fn broadcast_vector_against_rows() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::vector(vec![10.0, 20.0]);
        assert_eq!(m.add(&v).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(v.sub(&m).unwrap().data(), &[9.0, 18.0, 7.0, 16.0]);
        let s = Tensor::scalar(2.0);
        assert_eq!(m.mul(&s).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let b = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        let m = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(m.matmul(&m), Err(Error::Shape(_))));
        assert!(matches!(m.sum(Some(2)), Err(Error::Shape(_))));
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 0.0]);
        assert!(matches!(a.div(&b), Err(Error::Numeric(_))));
    }

    #[test]
    fn log_of_zero_is_negative_infinity_but_overflow_is_rejected() {
        let z = Tensor::vector(vec![0.0]).log().unwrap();
        assert_eq!(z.data()[0], f64::NEG_INFINITY);
        assert!(Tensor::vector(vec![-1.0]).log().is_err());
        assert!(Tensor::vector(vec![1000.0]).exp().is_err());
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[0.0]);
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(Tensor::vector(vec![1.0, 2.0, 3.0]).sum(None).unwrap().item().unwrap(), 6.0);
        assert_eq!(Tensor::vector(vec![2.0, 4.0]).mean(None).unwrap().item().unwrap(), 3.0);
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = m.sum(Some(0)).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[4.0, 6.0]);
        assert_eq!(m.sum(Some(1)).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(m.mean(Some(1)).unwrap().data(), &[1.5, 3.5]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gather_repeats_rows() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = m.gather(&[1, 0, 1]).unwrap();
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(m.gather(&[2]).is_err());
    }

    proptest! {
        #[test]
        fn add_then_sub_round_trips(v in proptest::collection::vec(-1e6f64..1e6, 1..32)) {
            let a = Tensor::vector(v.clone());
            let b = Tensor::vector(v.iter().map(|x| x * 0.5 + 1.0).collect());
            let back = a.add(&b).unwrap().sub(&b).unwrap();
            // (a + b) - b need not equal a under rounding; it must equal the
            // same scalar expression evaluated in the same order.
            for (i, x) in back.data().iter().enumerate() {
                prop_assert_eq!(*x, (v[i] + b.data()[i]) - b.data()[i]);
            }
        }

        #[test]
        fn add_then_sub_is_exact_on_integers(
            v in proptest::collection::vec(-1_000_000i32..1_000_000, 1..32),
            w in proptest::collection::vec(-1_000_000i32..1_000_000, 32),
        ) {
            let a = Tensor::vector(v.iter().map(|&x| x as f64).collect());
            let b = Tensor::vector(w[..v.len()].iter().map(|&x| x as f64).collect());
            prop_assert_eq!(a.add(&b).unwrap().sub(&b).unwrap(), a);
        }

        #[test]
        fn operations_do_not_mutate_inputs(v in proptest::collection::vec(-10f64..10.0, 4)) {
            let a = Tensor::matrix(2, 2, v.clone()).unwrap();
            let b = Tensor::vector(vec![1.0, 2.0]);
            let (a0, b0) = (a.clone(), b.clone());
            let _ = a.mul(&b).unwrap();
            let _ = a.tanh().unwrap();
            let _ = a.matmul(&a).unwrap();
            prop_assert_eq!(a, a0);
            prop_assert_eq!(b, b0);
        }
    }
}
