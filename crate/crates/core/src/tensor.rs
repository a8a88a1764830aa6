//! Dense row-major `f64` tensors.

use crate::error::{shape_err, Error, Result};

/// Dense n-dimensional array stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl<'a> From<&'a Tensor> for Operand<'a> {
    fn from(t: &'a Tensor) -> Self {
        Operand::Tensor(t)
    }
}

impl From<f64> for Operand<'_> {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return shape_err(format!("axis sizes must be positive, got {dims:?}"));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            ));
        }
        check_finite(&data)?;
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.dims)
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("ragged rows");
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place builders; callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.dims[1] != other.dims[0] {
            return shape_err(format!(
                "matmul lhs {:?} incompatible with rhs {:?}",
                self.dims, other.dims
            ));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        check_finite(&out)?;
        Ok(Tensor {
            dims: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return shape_err(format!("transpose needs rank 2, got {:?}", self.dims));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            dims: vec![c, r],
            data: out,
        })
    }

    /// Elementwise `add`, `sub`, `mul` against a same-shaped tensor or a
    /// scalar, and `scale` by a scalar.
    pub fn ewise<'a>(&self, op: EwiseOp, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        let rhs = rhs.into();
        let f: fn(f64, f64) -> f64 = match op {
            EwiseOp::Add => |a, b| a + b,
            EwiseOp::Sub => |a, b| a - b,
            EwiseOp::Mul | EwiseOp::Scale => |a, b| a * b,
        };
        let data: Vec<f64> = match rhs {
            Operand::Tensor(t) => {
                if op == EwiseOp::Scale {
                    return shape_err("scale takes a scalar operand");
                }
                if t.dims != self.dims {
                    return shape_err(format!(
                        "elementwise lhs {:?} vs rhs {:?}",
                        self.dims, t.dims
                    ));
                }
                self.data
                    .iter()
                    .zip(&t.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect()
            }
            Operand::Scalar(s) => self.data.iter().map(|&a| f(a, s)).collect(),
        };
        check_finite(&data)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.ewise(EwiseOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.ewise(EwiseOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.ewise(EwiseOp::Mul, rhs)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.ewise(EwiseOp::Scale, s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        check_finite(&data)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    /// In-place `self += rhs`.
    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if self.dims != rhs.dims {
            return shape_err(format!("add_assign {:?} vs {:?}", self.dims, rhs.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return shape_err(format!("dot {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Index of the maximum along `axis`; ties go to the lowest index.
    ///
    /// The result has the input dims with `axis` removed (a rank-1 input
    /// yields a single-element vector).
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        if axis >= self.rank() {
            return shape_err(format!("axis {axis} out of range for {:?}", self.dims));
        }
        let len = self.dims[axis];
        let inner: usize = self.dims[axis + 1..].iter().product();
        let outer: usize = self.dims[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut best_v = self.data[base];
                for k in 1..len {
                    let v = self.data[base + k * inner];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numerical(format!(
            "non-finite value {} at flat index {i}",
            data[i]
        ))),
    }
}
