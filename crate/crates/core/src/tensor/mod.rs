//! Minimal reverse-mode differentiable tensor engine.
//!
//! Activations are 5-D `[batch, channels, height, width, frames]`, stored
//! row-major (frames innermost). A [`Graph`] records every operation on a tape
//! and [`Graph::backward`] walks it in reverse. Only the operators the
//! filtering network and its losses need are implemented.

mod conv;
pub mod gradcheck;
mod graph;
pub mod optim;
pub mod params;

pub use gradcheck::grad_check;
pub use graph::{BnStats, Branches, Graph, Mode, Var};
pub use optim::{AdamState, LrPlateau};
pub use params::ParamStore;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(batch, channels, height, width, frames)` of a 5-D tensor.
    pub fn dims5(&self) -> Result<(usize, usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w, f] => Ok((b, c, h, w, f)),
            _ => Err(Error::Dimension(format!(
                "expected a 5-D tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
