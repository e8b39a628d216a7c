//! Dense row-major f64 tensors.
//!
//! Plain value containers; gradients live here only after a backward pass
//! copies them out of the graph (see [`crate::graph`]).

use crate::error::{Result, StaError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(StaError::shape(
                "Tensor::from_vec",
                format!("shape {:?} holds {} values, got {}", shape, numel, values.len()),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
            grad: None,
        }
    }

    /// Gaussian init with the given standard deviation (Box-Muller on a seeded stream).
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(std * gaussian(rng));
        }
        Tensor {
            shape,
            values,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// 2-D accessor; rows are the leading axis.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[row * self.shape[1] + col]
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Round every value through IEEE-754 binary32. Training does this at
    /// epoch boundaries so checkpoints are lossless snapshots of live state.
    pub fn quantize_f32(&mut self) {
        for v in self.values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// One standard normal draw.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0,1] avoids ln(0).
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
