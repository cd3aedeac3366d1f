//! Forward models and the batch-evaluation contract.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stats::{Ensemble, PredictionSet};

pub mod analytic;
pub mod groundwater;
pub mod hymod;

pub use analytic::{sum_of_squares, LinearModel, SumOfSquares};

/// A deterministic, side-effect-free map from a parameter vector to outputs.
pub trait ForwardModel: Send + Sync {
    fn n_params(&self) -> usize;

    fn n_outputs(&self) -> usize;

    fn evaluate(&self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Evaluates every member of `ensemble`, in parallel on the current rayon
/// pool. Column `j` of the result is `model.evaluate(member j)`.
pub fn evaluate_ensemble(model: &dyn ForwardModel, ensemble: &Ensemble) -> Result<PredictionSet> {
    evaluate_columns(model, ensemble.params())
}

pub(crate) fn evaluate_columns(
    model: &dyn ForwardModel,
    params: &DMatrix<f64>,
) -> Result<PredictionSet> {
    if params.nrows() != model.n_params() {
        return Err(Error::Dimension {
            context: "model parameter count",
            expected: model.n_params(),
            found: params.nrows(),
        });
    }
    let outputs: Vec<Vec<f64>> = (0..params.ncols())
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = params.column(j).iter().copied().collect();
            let y = model.evaluate(&col).map_err(|e| Error::Model {
                member: j,
                message: e.to_string(),
            })?;
            if y.len() != model.n_outputs() {
                return Err(Error::Model {
                    member: j,
                    message: format!("returned {} outputs, expected {}", y.len(), model.n_outputs()),
                });
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Model {
                    member: j,
                    message: "non-finite output".into(),
                });
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let nd = model.n_outputs();
    let mut m = DMatrix::zeros(nd, outputs.len());
    for (j, y) in outputs.iter().enumerate() {
        m.column_mut(j).copy_from_slice(y);
    }
    PredictionSet::new(m)
}
