//! Closed-form models: the sum-of-squares ring/sphere problems and a linear
//! map used by the Gaussian sanity checks.

use nalgebra::{DMatrix, DVector};

use super::ForwardModel;
use crate::error::{Error, Result};

pub fn sum_of_squares(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `y = Σ xᵢ²`; "ring2" for two parameters, "sphere100" for one hundred.
#[derive(Debug, Clone, Copy)]
pub struct SumOfSquares {
    dim: usize,
}

impl SumOfSquares {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl ForwardModel for SumOfSquares {
    fn n_params(&self) -> usize {
        self.dim
    }

    fn n_outputs(&self) -> usize {
        1
    }

    fn evaluate(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.dim {
            return Err(Error::Dimension {
                context: "sum_of_squares input",
                expected: self.dim,
                found: params.len(),
            });
        }
        Ok(vec![sum_of_squares(params)])
    }
}

/// `y = G·m`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    g: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(g: DMatrix<f64>) -> Self {
        Self { g }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n))
    }
}

impl ForwardModel for LinearModel {
    fn n_params(&self) -> usize {
        self.g.ncols()
    }

    fn n_outputs(&self) -> usize {
        self.g.nrows()
    }

    fn evaluate(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.g.ncols() {
            return Err(Error::Dimension {
                context: "linear model input",
                expected: self.g.ncols(),
                found: params.len(),
            });
        }
        let y = &self.g * DVector::from_column_slice(params);
        Ok(y.iter().copied().collect())
    }
}
