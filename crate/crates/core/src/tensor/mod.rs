//! Minimal dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! Training runs in f32; gradient verification runs the same graph in f64
//! (finite differences are unreliable in single precision).

pub mod gradcheck;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Element type for tape computations: f32 for training, f64 for checking.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Plain row-major f32 tensor storage (parameters, checkpoints, datasets).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        TensorData { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f32 = rng.sample(StandardNormal);
                v * std
            })
            .collect();
        TensorData { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_vec<F: Scalar>(&self) -> Vec<F> {
        self.data.iter().map(|&v| F::from_f32(v)).collect()
    }
}
