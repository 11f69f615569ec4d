//! Task-vector arithmetic and coefficient-weighted checkpoint merging.
//!
//! A task vector is the per-layer difference between a fine-tuned model and
//! its shared base. Merging recombines the base with two specialist
//! checkpoints using per-layer coefficient pairs constrained to the
//! probability simplex, so the merged layer is
//! `(1 - v - m) * base + v * vggt + m * mde` with the base term vanishing
//! exactly when the pair sums to one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{validate_compat, Checkpoint, CompatReport, Tensor};

/// Coefficient pairs whose sum may drift from 1 by at most this much.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("checkpoints are incompatible ({context}): {report}")]
    Incompatible {
        context: &'static str,
        report: CompatReport,
    },
    #[error("coefficients ({vggt}, {mde}) are not on the unit simplex: {reason}")]
    InvalidCoefficients {
        vggt: f64,
        mde: f64,
        reason: &'static str,
    },
    #[error("no coefficients supplied for layer '{layer}'")]
    MissingCoefficients { layer: String },
}

/// A pair of merge weights on the unit 1-simplex: both non-negative and
/// summing to 1 within [`SIMPLEX_TOL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCoeffs {
    pub vggt: f64,
    pub mde: f64,
}

impl LayerCoeffs {
    pub fn new(vggt: f64, mde: f64) -> Result<Self, MergeError> {
        if !vggt.is_finite() || !mde.is_finite() {
            return Err(MergeError::InvalidCoefficients {
                vggt,
                mde,
                reason: "non-finite",
            });
        }
        if vggt < 0.0 || mde < 0.0 {
            return Err(MergeError::InvalidCoefficients {
                vggt,
                mde,
                reason: "negative entry",
            });
        }
        if (vggt + mde - 1.0).abs() > SIMPLEX_TOL {
            return Err(MergeError::InvalidCoefficients {
                vggt,
                mde,
                reason: "sum differs from 1 beyond tolerance",
            });
        }
        Ok(LayerCoeffs { vggt, mde })
    }

    /// Equal-weight pair, the barycenter of the simplex.
    pub fn barycenter() -> Self {
        LayerCoeffs {
            vggt: 0.5,
            mde: 0.5,
        }
    }
}

/// Per-layer merge weights, keyed by layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeCoefficients {
    per_layer: BTreeMap<String, LayerCoeffs>,
}

impl MergeCoefficients {
    pub fn new() -> Self {
        MergeCoefficients::default()
    }

    /// The same pair for every named layer.
    pub fn uniform<'a>(names: impl IntoIterator<Item = &'a str>, coeffs: LayerCoeffs) -> Self {
        MergeCoefficients {
            per_layer: names
                .into_iter()
                .map(|n| (n.to_string(), coeffs))
                .collect(),
        }
    }

    pub fn insert(&mut self, layer: impl Into<String>, coeffs: LayerCoeffs) {
        self.per_layer.insert(layer.into(), coeffs);
    }

    pub fn get(&self, layer: &str) -> Option<LayerCoeffs> {
        self.per_layer.get(layer).copied()
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, LayerCoeffs)> {
        self.per_layer.iter().map(|(n, c)| (n.as_str(), *c))
    }
}

impl FromIterator<(String, LayerCoeffs)> for MergeCoefficients {
    fn from_iter<I: IntoIterator<Item = (String, LayerCoeffs)>>(iter: I) -> Self {
        MergeCoefficients {
            per_layer: iter.into_iter().collect(),
        }
    }
}

/// Where a task vector came from, for report labelling only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub base: String,
}

/// Per-layer difference `model - base`, stored at full `f64` precision so
/// that adding it back to the base reproduces the model exactly up to
/// rounding in the final sum.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    layers: BTreeMap<String, Tensor>,
    pub provenance: Provenance,
}

impl TaskVector {
    pub fn with_provenance(mut self, model: impl Into<String>, base: impl Into<String>) -> Self {
        self.provenance = Provenance {
            model: model.into(),
            base: base.into(),
        };
        self
    }

    pub fn get(&self, layer: &str) -> Option<&Tensor> {
        self.layers.get(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Adds the task vector back onto a base checkpoint. The result keeps
    /// each base layer's dtype.
    pub fn apply(&self, base: &Checkpoint) -> Result<Checkpoint, MergeError> {
        let shapes_match = base.len() == self.layers.len()
            && base
                .iter()
                .all(|(n, t)| self.get(n).is_some_and(|d| d.shape() == t.shape()));
        if !shapes_match {
            let as_ckpt: Checkpoint = self
                .layers
                .iter()
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect();
            return Err(MergeError::Incompatible {
                context: "task vector vs base",
                report: validate_compat(&as_ckpt, base),
            });
        }
        let mut out = Checkpoint::new();
        for (name, tensor) in base.iter() {
            let delta = self.get(name).expect("checked above");
            let data: Vec<f64> = tensor
                .data()
                .iter()
                .zip(delta.data())
                .map(|(b, d)| b + d)
                .collect();
            out.insert(
                name,
                Tensor::new(tensor.dtype(), tensor.shape().to_vec(), data)
                    .expect("sum of finite layers stays finite at these magnitudes"),
            );
        }
        Ok(out)
    }
}

/// Computes a per-layer task vector `model - base`. Both checkpoints must
/// be structurally compatible.
pub fn task_vector(model: &Checkpoint, base: &Checkpoint) -> Result<TaskVector, MergeError> {
    let report = validate_compat(model, base);
    if !report.compatible() {
        return Err(MergeError::Incompatible {
            context: "model vs base",
            report,
        });
    }
    let mut layers = BTreeMap::new();
    for (name, m) in model.iter() {
        let b = base.get(name).expect("compat verified");
        let data: Vec<f64> = m.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        layers.insert(
            name.to_string(),
            Tensor::f64(m.shape().to_vec(), data).expect("difference of finite layers is finite"),
        );
    }
    Ok(TaskVector {
        layers,
        provenance: Provenance {
            model: "model".to_string(),
            base: "base".to_string(),
        },
    })
}

/// Strict merge: every base layer needs compatible counterparts in both
/// specialist checkpoints plus a coefficient pair.
pub fn apply_merge(
    base: &Checkpoint,
    vggt: &Checkpoint,
    mde: &Checkpoint,
    coeffs: &MergeCoefficients,
) -> Result<Checkpoint, MergeError> {
    let report = validate_compat(base, vggt);
    if !report.compatible() {
        return Err(MergeError::Incompatible {
            context: "base vs vggt",
            report,
        });
    }
    let report = validate_compat(base, mde);
    if !report.compatible() {
        return Err(MergeError::Incompatible {
            context: "base vs mde",
            report,
        });
    }
    let mut out = Checkpoint::new();
    for (name, b) in base.iter() {
        let c = coeffs
            .get(name)
            .ok_or_else(|| MergeError::MissingCoefficients {
                layer: name.to_string(),
            })?;
        let v = vggt.get(name).expect("compat verified");
        let m = mde.get(name).expect("compat verified");
        out.insert(name, merge_layer(b, v, m, c));
    }
    Ok(out)
}

/// Lenient merge: base layers without compatible counterparts in *both*
/// specialists are copied through unchanged; mergeable layers still
/// require a coefficient pair. Extra layers in the specialists are
/// ignored.
pub fn apply_merge_partial(
    base: &Checkpoint,
    vggt: &Checkpoint,
    mde: &Checkpoint,
    coeffs: &MergeCoefficients,
) -> Result<Checkpoint, MergeError> {
    let mut out = Checkpoint::new();
    for (name, b) in base.iter() {
        let counterpart = |ck: &Checkpoint| {
            ck.get(name)
                .filter(|t| t.shape() == b.shape() && t.dtype() == b.dtype())
                .cloned()
        };
        match (counterpart(vggt), counterpart(mde)) {
            (Some(v), Some(m)) => {
                let c = coeffs
                    .get(name)
                    .ok_or_else(|| MergeError::MissingCoefficients {
                        layer: name.to_string(),
                    })?;
                out.insert(name, merge_layer(b, &v, &m, c));
            }
            _ => {
                out.insert(name, b.clone());
            }
        }
    }
    Ok(out)
}

fn merge_layer(base: &Tensor, vggt: &Tensor, mde: &Tensor, c: LayerCoeffs) -> Tensor {
    // Collapsed pairs copy a specialist verbatim; no arithmetic, so the
    // output is bit-identical to its source.
    if c.vggt == 1.0 && c.mde == 0.0 {
        return vggt.clone();
    }
    if c.vggt == 0.0 && c.mde == 1.0 {
        return mde.clone();
    }
    let base_coeff = {
        let raw = 1.0 - c.vggt - c.mde;
        // The simplex invariant makes the base weight zero up to rounding;
        // snap it so the base tensor cannot leak into the result.
        if raw.abs() <= SIMPLEX_TOL {
            0.0
        } else {
            raw
        }
    };
    let data: Vec<f64> = base
        .data()
        .iter()
        .zip(vggt.data())
        .zip(mde.data())
        .map(|((b, v), m)| base_coeff * b + c.vggt * v + c.mde * m)
        .collect();
    Tensor::new(base.dtype(), base.shape().to_vec(), data)
        .expect("convex combination of finite layers is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn ck(pairs: &[(&str, Vec<f64>)]) -> Checkpoint {
        pairs
            .iter()
            .map(|(n, d)| {
                (
                    n.to_string(),
                    Tensor::f64(vec![d.len()], d.clone()).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn task_vector_is_elementwise_difference() {
        let model = ck(&[("w", vec![3.0, 5.0])]);
        let base = ck(&[("w", vec![1.0, 2.0])]);
        let tv = task_vector(&model, &base).unwrap();
        assert_eq!(tv.get("w").unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn task_vector_rejects_incompatible_inputs() {
        let model = ck(&[("w", vec![1.0])]);
        let base = ck(&[("w", vec![1.0, 2.0])]);
        assert!(matches!(
            task_vector(&model, &base),
            Err(MergeError::Incompatible { .. })
        ));
    }

    #[test]
    fn task_vector_round_trips_through_apply() {
        let model = ck(&[("a", vec![0.3, -1.7, 2.25]), ("b", vec![4.0])]);
        let base = ck(&[("a", vec![1.1, 0.4, -0.5]), ("b", vec![-2.0])]);
        let tv = task_vector(&model, &base).unwrap();
        let back = tv.apply(&base).unwrap();
        for (name, t) in model.iter() {
            for (x, y) in t.data().iter().zip(back.get(name).unwrap().data()) {
                assert!((x - y).abs() <= 1e-15, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn coeffs_enforce_the_simplex() {
        assert!(LayerCoeffs::new(0.25, 0.75).is_ok());
        assert!(LayerCoeffs::new(1.0, 0.0).is_ok());
        assert!(matches!(
            LayerCoeffs::new(-0.1, 1.1),
            Err(MergeError::InvalidCoefficients { .. })
        ));
        assert!(matches!(
            LayerCoeffs::new(0.6, 0.6),
            Err(MergeError::InvalidCoefficients { .. })
        ));
    }

    #[test]
    fn collapsed_pair_copies_the_specialist_bitwise() {
        let base = ck(&[("w", vec![10.0, -0.0])]);
        let vggt = ck(&[("w", vec![-0.0, 7.0])]);
        let mde = ck(&[("w", vec![5.0, 5.0])]);
        let coeffs = MergeCoefficients::uniform(["w"], LayerCoeffs::new(1.0, 0.0).unwrap());
        let merged = apply_merge(&base, &vggt, &mde, &coeffs).unwrap();
        assert_eq!(merged.get("w").unwrap(), vggt.get("w").unwrap());
    }

    #[test]
    fn barycenter_on_identical_inputs_is_identity() {
        let base = ck(&[("w", vec![1.5, -2.25, 0.0])]);
        let coeffs = MergeCoefficients::uniform(["w"], LayerCoeffs::barycenter());
        let merged = apply_merge(&base, &base, &base, &coeffs).unwrap();
        assert_eq!(merged.get("w").unwrap(), base.get("w").unwrap());
    }

    #[test]
    fn merged_layer_is_convex_combination() {
        let base = ck(&[("w", vec![0.0])]);
        let vggt = ck(&[("w", vec![1.0])]);
        let mde = ck(&[("w", vec![3.0])]);
        let coeffs = MergeCoefficients::uniform(["w"], LayerCoeffs::new(0.25, 0.75).unwrap());
        let merged = apply_merge(&base, &vggt, &mde, &coeffs).unwrap();
        assert_eq!(merged.get("w").unwrap().data(), &[0.25 + 2.25]);
    }

    #[test]
    fn base_values_never_leak_when_pair_sums_to_one() {
        // Two different bases, same specialists and coefficients.
        let base1 = ck(&[("w", vec![1000.0])]);
        let base2 = ck(&[("w", vec![-999.0])]);
        let vggt = ck(&[("w", vec![2.0])]);
        let mde = ck(&[("w", vec![4.0])]);
        let coeffs = MergeCoefficients::uniform(["w"], LayerCoeffs::new(0.3, 0.7).unwrap());
        let m1 = apply_merge(&base1, &vggt, &mde, &coeffs).unwrap();
        let m2 = apply_merge(&base2, &vggt, &mde, &coeffs).unwrap();
        assert_eq!(m1.get("w").unwrap(), m2.get("w").unwrap());
    }

    #[test]
    fn strict_merge_requires_full_coverage() {
        let base = ck(&[("w", vec![1.0]), ("x", vec![1.0])]);
        let other = ck(&[("w", vec![1.0])]);
        let coeffs = MergeCoefficients::uniform(["w", "x"], LayerCoeffs::barycenter());
        assert!(matches!(
            apply_merge(&base, &other, &base, &coeffs),
            Err(MergeError::Incompatible { .. })
        ));
        let coeffs_short = MergeCoefficients::uniform(["w"], LayerCoeffs::barycenter());
        assert!(matches!(
            apply_merge(&base, &base, &base, &coeffs_short),
            Err(MergeError::MissingCoefficients { .. })
        ));
    }

    #[test]
    fn partial_merge_copies_uncovered_layers_from_base() {
        let base = ck(&[("w", vec![1.0]), ("x", vec![9.0])]);
        let vggt = ck(&[("w", vec![3.0])]);
        let mde = ck(&[("w", vec![5.0])]);
        let coeffs = MergeCoefficients::uniform(["w"], LayerCoeffs::barycenter());
        let merged = apply_merge_partial(&base, &vggt, &mde, &coeffs).unwrap();
        assert_eq!(merged.get("w").unwrap().data(), &[4.0]);
        assert_eq!(merged.get("x").unwrap(), base.get("x").unwrap());
    }

    #[test]
    fn merged_layer_keeps_base_dtype() {
        let mut base = Checkpoint::new();
        base.insert("w", Tensor::f32(vec![1], vec![1.0]).unwrap());
        let mut v = Checkpoint::new();
        v.insert("w", Tensor::f32(vec![1], vec![2.0]).unwrap());
        let mut m = Checkpoint::new();
        m.insert("w", Tensor::f32(vec![1], vec![3.0]).unwrap());
        let coeffs = MergeCoefficients::uniform(["w"], LayerCoeffs::barycenter());
        let merged = apply_merge(&base, &v, &m, &coeffs).unwrap();
        assert_eq!(merged.get("w").unwrap().dtype(), DType::F32);
    }
}
