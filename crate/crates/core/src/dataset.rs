use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Features stored column-wise (`d x n`) with one real label per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl FeatureDataset {
    /// Shapes must agree and entries must be finite. Empty datasets are
    /// representable (a parsed empty file) but rejected by model builders.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.ncols() != y.len() {
            return Err(Error::DimensionMismatch {
                op: "FeatureDataset::new",
                expected: x.ncols(),
                got: y.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("FeatureDataset::new", "finite feature and label entries"));
        }
        Ok(Self { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() || self.dim() == 0 {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.x.column(i).into_owned()
    }

    /// Sub-dataset made of the given columns, in order.
    pub fn select(&self, idx: &[usize]) -> FeatureDataset {
        let x = self.x.select_columns(idx);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        FeatureDataset { x, y }
    }

    /// Copy with record `i` replaced by `(x_new, y_new)`.
    pub fn replace_record(&self, i: usize, x_new: &DVector<f64>, y_new: f64) -> FeatureDataset {
        let mut out = self.clone();
        out.x.set_column(i, x_new);
        out.y[i] = y_new;
        out
    }

    /// Data part of the per-record squared-loss gradient, `X_j (X_j^T theta - y_j)`.
    /// The ridge term is data-independent and not included.
    pub fn sample_gradient(&self, j: usize, theta: &DVector<f64>) -> DVector<f64> {
        let xj = self.x.column(j);
        let r = xj.dot(theta) - self.y[j];
        xj * r
    }
}
