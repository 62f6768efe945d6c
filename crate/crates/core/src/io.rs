//! JSON file helpers and the dense-matrix block used by every artifact.

use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_array(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn into_array(self) -> Result<Array2<f64>> {
        let (rows, cols) = (self.rows, self.cols);
        Array2::from_shape_vec((rows, cols), self.data)
            .map_err(|e| Error::Validation(format!("matrix block {rows}x{cols}: {e}")))
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(Error::json)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(Error::json)
}

pub(crate) fn check_format(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Validation(format!(
            "expected a {expected:?} document, found format {found:?}"
        )));
    }
    Ok(())
}
