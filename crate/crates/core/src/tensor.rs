//! Dense NCHW tensors in double precision.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn height(&self) -> usize {
        self.0[2]
    }

    pub fn width(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one (height, width) plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Row-major NCHW array with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    /// Uniform values in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    /// Zero-mean Gaussian values with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape {
                op: "Tensor::set_grad",
                detail: format!("{} grad values for shape {}", grad.len(), self.shape),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Shape {
                op: "Tensor::accumulate_grad",
                detail: format!("{} grad values for shape {}", delta.len(), self.shape),
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape.0;
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    /// One (height, width) plane of batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels() + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels() + c) * p;
        &mut self.data[start..start + p]
    }

    /// Batch item `n` as a standalone 1×C×H×W tensor.
    pub fn item(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape.0;
        let len = c * h * w;
        Tensor {
            shape: Shape::new(1, c, h, w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
            grad: None,
        }
    }

    /// Concatenates equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| crate::error::contract("stack of zero tensors"))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut batch = 0;
        for t in items {
            let [n, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::Shape {
                    op: "Tensor::stack",
                    detail: format!("{} vs {}", t.shape, first.shape),
                });
            }
            batch += n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(batch, c, h, w),
            data,
            grad: None,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
