//! Dense tensors, named-layer checkpoints, and structural compatibility
//! checks. Scalars are stored as `f64` regardless of the declared dtype;
//! an `f32` tensor simply rounds every scalar to `f32` precision on
//! construction so that in-memory values always match what the container
//! round-trips.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Storage precision of a tensor's scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Bytes per scalar in serialized form.
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("tensor rank must be at least 1")]
    EmptyShape,
    #[error("tensor extent along axis {axis} must be at least 1")]
    ZeroExtent { axis: usize },
    #[error("shape {shape:?} implies {expected} scalars but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape extent product overflows usize")]
    ShapeOverflow,
    #[error("non-finite scalar at flat index {index}")]
    NonFinite { index: usize },
    #[error("scalar at flat index {index} is outside f32 range")]
    F32Overflow { index: usize },
}

/// A dense row-major tensor with rank >= 1, every extent >= 1, and only
/// finite scalars. Equality is bitwise on the scalar payload, so `+0.0`
/// and `-0.0` are distinct and two tensors compare equal exactly when
/// their serialized forms would.
#[derive(Debug, Clone)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, mut data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { axis });
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or(TensorError::ShapeOverflow)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        if dtype == DType::F32 {
            for (index, v) in data.iter_mut().enumerate() {
                let rounded = *v as f32;
                if !rounded.is_finite() {
                    return Err(TensorError::F32Overflow { index });
                }
                *v = f64::from(rounded);
            }
        }
        Ok(Tensor { dtype, shape, data })
    }

    /// Convenience constructor for an `f64` tensor.
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(DType::F64, shape, data)
    }

    /// Convenience constructor for an `f32` tensor (scalars are rounded).
    pub fn f32(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(DType::F32, shape, data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of scalars.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        // Invariants forbid empty tensors; kept for clippy symmetry with len.
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.dtype == other.dtype
            && self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Eq for Tensor {}

/// An ordered map from layer name to tensor. Iteration is always in
/// lexicographic (byte-wise) order of the names, which fixes the payload
/// layout of the container format and makes every merge deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Checkpoint {
    layers: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    /// Inserts a layer, replacing any previous tensor under the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.layers.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layers in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Layer names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }
}

impl FromIterator<(String, Tensor)> for Checkpoint {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Checkpoint {
            layers: iter.into_iter().collect(),
        }
    }
}

/// Why a layer failed structural compatibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchReason {
    MissingInA,
    MissingInB,
    ShapeDiffers,
    DtypeDiffers,
}

impl fmt::Display for MismatchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MismatchReason::MissingInA => "missing in A",
            MismatchReason::MissingInB => "missing in B",
            MismatchReason::ShapeDiffers => "shape differs",
            MismatchReason::DtypeDiffers => "dtype differs",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub layer: String,
    pub reason: MismatchReason,
}

/// Outcome of [`validate_compat`]: empty means the two checkpoints share
/// layer names, shapes, and dtypes exactly.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompatReport {
    pub mismatches: Vec<Mismatch>,
}

impl CompatReport {
    pub fn compatible(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compatible() {
            return write!(f, "compatible");
        }
        let parts: Vec<String> = self
            .mismatches
            .iter()
            .map(|m| format!("{}: {}", m.layer, m.reason))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Compares two checkpoints structurally. The report lists one entry per
/// problem in lexicographic layer order; a layer present in both with both
/// shape and dtype wrong contributes two entries (shape first).
pub fn validate_compat(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    let mut names: Vec<&str> = a.names().chain(b.names()).collect();
    names.sort_unstable();
    names.dedup();

    let mut mismatches = Vec::new();
    for name in names {
        match (a.get(name), b.get(name)) {
            (None, Some(_)) => mismatches.push(Mismatch {
                layer: name.to_string(),
                reason: MismatchReason::MissingInA,
            }),
            (Some(_), None) => mismatches.push(Mismatch {
                layer: name.to_string(),
                reason: MismatchReason::MissingInB,
            }),
            (Some(ta), Some(tb)) => {
                if ta.shape() != tb.shape() {
                    mismatches.push(Mismatch {
                        layer: name.to_string(),
                        reason: MismatchReason::ShapeDiffers,
                    });
                }
                if ta.dtype() != tb.dtype() {
                    mismatches.push(Mismatch {
                        layer: name.to_string(),
                        reason: MismatchReason::DtypeDiffers,
                    });
                }
            }
            (None, None) => unreachable!("name came from one of the two checkpoints"),
        }
    }
    CompatReport { mismatches }
}
