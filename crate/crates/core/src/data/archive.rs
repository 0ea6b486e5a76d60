//! Fixed-size record archives.
//!
//! An archive is a plain concatenation of records with no file header:
//!
//! ```text
//! record := label block (label_bytes) | input block (input_len * element size)
//! ```
//!
//! The class id is the single unsigned byte at offset `label_byte` within the
//! label block; the other label bytes are ignored on read and written as
//! zero. Input elements are stored channel-major (`c, h, w`). `U8` elements
//! map to `[0, 1]` by dividing by 255; `F64Le` elements are IEEE-754 doubles
//! in little-endian order.
//!
//! The CIFAR-10 binary files are `label_bytes = 1, label_byte = 0`, shape
//! `3x32x32`, `U8`; CIFAR-100 uses `label_bytes = 2` and `label_byte = 1`
//! for the fine label.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Shape3;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementType {
    U8,
    F64Le,
}

impl ElementType {
    pub const fn size(self) -> usize {
        match self {
            ElementType::U8 => 1,
            ElementType::F64Le => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLayout {
    pub label_bytes: usize,
    pub label_byte: usize,
    pub input_shape: Shape3,
    pub element: ElementType,
}

impl RecordLayout {
    pub const fn cifar10() -> Self {
        RecordLayout {
            label_bytes: 1,
            label_byte: 0,
            input_shape: Shape3::new(3, 32, 32),
            element: ElementType::U8,
        }
    }

    pub const fn cifar100_fine() -> Self {
        RecordLayout {
            label_bytes: 2,
            label_byte: 1,
            input_shape: Shape3::new(3, 32, 32),
            element: ElementType::U8,
        }
    }

    /// Lossless layout for real-valued vector data.
    pub const fn f64_vectors(dims: usize) -> Self {
        RecordLayout {
            label_bytes: 1,
            label_byte: 0,
            input_shape: Shape3::vector(dims),
            element: ElementType::F64Le,
        }
    }

    pub const fn record_size(&self) -> usize {
        self.label_bytes + self.input_shape.len() * self.element.size()
    }

    fn validate(&self) -> Result<()> {
        if self.label_byte >= self.label_bytes {
            return Err(Error::invalid("label_byte", "must lie inside the label block"));
        }
        if self.input_shape.is_empty() {
            return Err(Error::invalid("input_shape", "must be non-empty"));
        }
        Ok(())
    }
}

/// Decode an archive into an input matrix and label vector.
pub fn read_archive(bytes: &[u8], layout: &RecordLayout) -> Result<(Array2<f64>, Vec<usize>)> {
    layout.validate()?;
    let rs = layout.record_size();
    if bytes.len() % rs != 0 {
        return Err(Error::invalid(
            "archive",
            format!("length {} is not a multiple of the record size {rs}", bytes.len()),
        ));
    }
    let n = bytes.len() / rs;
    let d = layout.input_shape.len();
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(rs).enumerate() {
        labels.push(rec[layout.label_byte] as usize);
        let body = &rec[layout.label_bytes..];
        match layout.element {
            ElementType::U8 => {
                for (j, &b) in body.iter().enumerate() {
                    x[[i, j]] = b as f64 / 255.0;
                }
            }
            ElementType::F64Le => {
                for (j, chunk) in body.chunks_exact(8).enumerate() {
                    x[[i, j]] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                }
            }
        }
    }
    Ok((x, labels))
}

/// Encode inputs and labels with the given layout. `U8` quantizes by
/// rounding `255 * x` after clamping to `[0, 1]`.
pub fn write_archive(inputs: &Array2<f64>, labels: &[usize], layout: &RecordLayout) -> Result<Vec<u8>> {
    layout.validate()?;
    if inputs.ncols() != layout.input_shape.len() || inputs.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "archive encode",
            expected: format!("{} x {}", labels.len(), layout.input_shape.len()),
            actual: format!("{} x {}", inputs.nrows(), inputs.ncols()),
        });
    }
    let mut out = Vec::with_capacity(labels.len() * layout.record_size());
    for (row, &y) in inputs.rows().into_iter().zip(labels) {
        let label = u8::try_from(y).map_err(|_| Error::invalid("label", format!("{y} does not fit in one byte")))?;
        let mut block = vec![0u8; layout.label_bytes];
        block[layout.label_byte] = label;
        out.extend_from_slice(&block);
        for &v in row {
            match layout.element {
                ElementType::U8 => out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8),
                ElementType::F64Le => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}
