use ndarray::Array2;

use crate::error::{LeftError, Result};

/// A T×C window of a multivariate series, optionally with point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    pub values: Array2<f64>,
    pub labels: Option<Vec<u8>>,
}

impl TimeSeriesWindow {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values, labels: None }
    }

    pub fn with_labels(values: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != values.nrows() {
            return Err(LeftError::shape(format!(
                "{} labels for a window of length {}",
                labels.len(),
                values.nrows()
            )));
        }
        Ok(Self { values, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

impl From<Array2<f64>> for TimeSeriesWindow {
    fn from(values: Array2<f64>) -> Self {
        Self::new(values)
    }
}
