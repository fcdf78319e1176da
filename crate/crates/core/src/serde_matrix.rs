//! Row-major JSON layout for dense matrices: `{"rows", "cols", "data"}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct RowMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
    RowMajor {
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.transpose().as_slice().to_vec(),
    }
    .serialize(ser)
}

pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
    let raw = RowMajor::deserialize(de)?;
    if raw.rows * raw.cols != raw.data.len() {
        return Err(serde::de::Error::custom(format!(
            "matrix {}x{} with {} entries",
            raw.rows,
            raw.cols,
            raw.data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(raw.rows, raw.cols, &raw.data))
}

/// Plain JSON array layout for vectors.
pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, ser: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(de)?))
    }
}
