//! Dense row-major f64 tensors.
//!
//! These kernels are the single source of truth for forward arithmetic: the
//! gradient tape calls exactly these methods, so evaluation with and without
//! recording is bitwise identical. Public operations verify that their output
//! is finite, keeping NaN/Inf out of the simulation.

use rand::Rng;

use crate::error::{Result, SimError};

/// Floor applied to the argument of `log` so saturated-wrong predictions
/// yield a large finite loss instead of infinity.
pub const LOG_FLOOR: f64 = 1e-300;

/// Floor for norm and ratio denominators on degenerate inputs.
pub const DENOM_FLOOR: f64 = 1e-12;

/// Dense real-valued n-dimensional array, row-major.
///
/// A scalar is represented with an empty shape (`product([]) == 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, validating `product(shape) == data.len()` and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(SimError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel(&shape), data.len()),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![value; n] }
    }

    /// Scalar tensor (empty shape, one element).
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Uniform samples in [0, 1).
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.gen::<f64>()).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a scalar (or any one-element) tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(SimError::ShapeMismatch {
                op: "Tensor::scalar_value",
                detail: format!("expected 1 element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Same data viewed as 1-D.
    pub fn flattened(&self) -> Tensor {
        Tensor { shape: vec![self.data.len()], data: self.data.clone() }
    }

    /// Same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.data.len() {
            return Err(SimError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SimError::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(SimError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            })
        }
    }

    fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "subtract", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "multiply", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "divide", |a, b| a / b)
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| a * factor).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.check_finite("scale")?;
        Ok(out)
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, offset: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| a + offset).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.check_finite("add_scalar")?;
        Ok(out)
    }

    /// Matrix product. Supports `[m,k] x [k,n] -> [m,n]` and the
    /// matrix-vector case `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = |detail: String| SimError::ShapeMismatch { op: "matmul", detail };
        match (self.shape.as_slice(), other.shape.as_slice()) {
            ([m, k], [k2]) if k == k2 => {
                let (m, k) = (*m, *k);
                let mut data = vec![0.0; m];
                for i in 0..m {
                    let row = &self.data[i * k..(i + 1) * k];
                    data[i] = row.iter().zip(&other.data).map(|(&a, &b)| a * b).sum();
                }
                let out = Tensor { shape: vec![m], data };
                out.check_finite("matmul")?;
                Ok(out)
            }
            ([m, k], [k2, n]) if k == k2 => {
                let (m, k, n) = (*m, *k, *n);
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let a = self.data[i * k + l];
                        let brow = &other.data[l * n..(l + 1) * n];
                        let orow = &mut data[i * n..(i + 1) * n];
                        for (o, &b) in orow.iter_mut().zip(brow) {
                            *o += a * b;
                        }
                    }
                }
                let out = Tensor { shape: vec![m, n], data };
                out.check_finite("matmul")?;
                Ok(out)
            }
            (a, b) => Err(err(format!("{:?} x {:?}", a, b))),
        }
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Softmax over a 1-D tensor, computed with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.shape.len() != 1 || self.data.is_empty() {
            return Err(SimError::ShapeMismatch {
                op: "softmax",
                detail: format!("expected non-empty 1-D tensor, got {:?}", self.shape),
            });
        }
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.data.iter().map(|&a| (a - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let data = exps.iter().map(|&e| e / sum).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.check_finite("softmax")?;
        Ok(out)
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| a.max(LOG_FLOOR).ln()).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.check_finite("log")?;
        Ok(out)
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.data.is_empty() {
            return Err(SimError::EmptyInput("mean"));
        }
        Ok(Tensor::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64))
    }

    pub fn l1_norm(&self) -> Tensor {
        Tensor::scalar(self.data.iter().map(|a| a.abs()).sum())
    }

    pub fn l2_norm(&self) -> Tensor {
        Tensor::scalar(self.data.iter().map(|a| a * a).sum::<f64>().sqrt())
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "dot")?;
        let v = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum();
        let out = Tensor::scalar(v);
        out.check_finite("dot")?;
        Ok(out)
    }

    /// Replicate a 2-D `[H, W]` mask across `channels` as `[H, W, C]`.
    pub fn broadcast_mask(&self, channels: usize) -> Result<Tensor> {
        let [h, w] = match self.shape.as_slice() {
            [h, w] => [*h, *w],
            other => {
                return Err(SimError::ShapeMismatch {
                    op: "broadcast_mask",
                    detail: format!("expected 2-D mask, got {:?}", other),
                })
            }
        };
        if channels == 0 {
            return Err(SimError::InvalidArgument {
                op: "broadcast_mask",
                detail: "channels must be positive".into(),
            });
        }
        let mut data = Vec::with_capacity(h * w * channels);
        for &v in &self.data {
            for _ in 0..channels {
                data.push(v);
            }
        }
        Ok(Tensor { shape: vec![h, w, channels], data })
    }

    /// Clamp every element to [0, 1].
    pub fn clamp01(&self) -> Tensor {
        let data = self.data.iter().map(|&a| a.clamp(0.0, 1.0)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}
