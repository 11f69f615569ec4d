//! Toy feature neck: multi-head self-attention over patch tokens with a
//! learned camera token prepended, a small feed-forward stub, and the
//! subtractive modulation that combines the two paths.
//!
//! Patch tokens form an unordered set, so attention must not care about
//! row order. Every reduction over the patch axis (softmax denominators
//! and attention-weighted sums) therefore accumulates its terms in a
//! canonical sorted order, which makes the per-row outputs bit-identical
//! under any permutation of the input rows - not merely close.

use thiserror::Error;

use crate::tensor::{Checkpoint, DType, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NeckError {
    #[error("feature map dimensions must be positive, got {rows}x{cols}")]
    EmptyDims { rows: usize, cols: usize },
    #[error("feature map {rows}x{cols} needs {expected} scalars, got {actual}")]
    LengthMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {context} ({a_rows}x{a_cols} vs {b_rows}x{b_cols})")]
    ShapeMismatch {
        context: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("channel count {channels} is not divisible by {heads} heads")]
    HeadSplit { channels: usize, heads: usize },
    #[error("attention parameters are inconsistent: {reason}")]
    BadParams { reason: String },
    #[error("layer '{layer}' missing from checkpoint")]
    MissingLayer { layer: String },
    #[error("layer '{layer}' has unusable shape {shape:?}: {reason}")]
    BadLayer {
        layer: String,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A dense row-major matrix of finite values; rows are tokens (or matrix
/// rows, when used as a projection weight). Equality is bitwise.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeckError> {
        if rows == 0 || cols == 0 {
            return Err(NeckError::EmptyDims { rows, cols });
        }
        let expected = rows
            .checked_mul(cols)
            .ok_or(NeckError::EmptyDims { rows, cols })?;
        if expected != data.len() {
            return Err(NeckError::LengthMismatch {
                rows,
                cols,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NeckError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(FeatureMap { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMap {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Builds a map from a rank-2 tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self, NeckError> {
        if t.rank() != 2 {
            return Err(NeckError::BadParams {
                reason: format!("expected a rank-2 tensor, got rank {}", t.rank()),
            });
        }
        FeatureMap::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        Tensor::new(dtype, vec![self.rows, self.cols], self.data.clone())
            .expect("feature map invariants imply a valid tensor")
    }

    /// Returns a copy with rows reordered as `perm[new_row] = old_row`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self, NeckError> {
        if perm.len() != self.rows {
            return Err(NeckError::BadParams {
                reason: format!(
                    "permutation length {} does not match {} rows",
                    perm.len(),
                    self.rows
                ),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &old in perm {
            data.extend_from_slice(self.row(old));
        }
        FeatureMap::new(self.rows, self.cols, data)
    }
}

impl PartialEq for FeatureMap {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Eq for FeatureMap {}

/// Weights for one attention block: per-head query/key/value projections
/// (`C x C/h` each), an output projection (`C x C`), and the camera token
/// that is prepended to the patch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    heads: usize,
    query: Vec<FeatureMap>,
    key: Vec<FeatureMap>,
    value: Vec<FeatureMap>,
    output: FeatureMap,
    camera_token: Vec<f64>,
}

impl AttentionParams {
    pub fn new(
        query: Vec<FeatureMap>,
        key: Vec<FeatureMap>,
        value: Vec<FeatureMap>,
        output: FeatureMap,
        camera_token: Vec<f64>,
    ) -> Result<Self, NeckError> {
        let heads = query.len();
        if heads == 0 || key.len() != heads || value.len() != heads {
            return Err(NeckError::BadParams {
                reason: format!(
                    "need equal non-zero head counts, got q={} k={} v={}",
                    query.len(),
                    key.len(),
                    value.len()
                ),
            });
        }
        let channels = camera_token.len();
        if channels == 0 {
            return Err(NeckError::BadParams {
                reason: "camera token must be non-empty".to_string(),
            });
        }
        if let Some(i) = camera_token.iter().position(|v| !v.is_finite()) {
            return Err(NeckError::BadParams {
                reason: format!("camera token entry {i} is not finite"),
            });
        }
        if !channels.is_multiple_of(heads) {
            return Err(NeckError::HeadSplit { channels, heads });
        }
        let head_dim = channels / heads;
        for (kind, mats) in [("query", &query), ("key", &key), ("value", &value)] {
            for (h, m) in mats.iter().enumerate() {
                if m.rows() != channels || m.cols() != head_dim {
                    return Err(NeckError::BadParams {
                        reason: format!(
                            "{kind} projection {h} is {}x{}, expected {channels}x{head_dim}",
                            m.rows(),
                            m.cols()
                        ),
                    });
                }
            }
        }
        if output.rows() != channels || output.cols() != channels {
            return Err(NeckError::BadParams {
                reason: format!(
                    "output projection is {}x{}, expected {channels}x{channels}",
                    output.rows(),
                    output.cols()
                ),
            });
        }
        Ok(AttentionParams {
            heads,
            query,
            key,
            value,
            output,
            camera_token,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn channels(&self) -> usize {
        self.camera_token.len()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn camera_token(&self) -> &[f64] {
        &self.camera_token
    }

    /// Loads block `block` using the layer naming convention
    /// `fa.{block}.{head}.q|k|v`, `fa.{block}.out`, `fa.camera_token`.
    pub fn from_checkpoint(ckpt: &Checkpoint, block: usize) -> Result<Self, NeckError> {
        let matrix = |name: &str| -> Result<FeatureMap, NeckError> {
            let t = ckpt.get(name).ok_or_else(|| NeckError::MissingLayer {
                layer: name.to_string(),
            })?;
            if t.rank() != 2 {
                return Err(NeckError::BadLayer {
                    layer: name.to_string(),
                    shape: t.shape().to_vec(),
                    reason: "expected rank 2",
                });
            }
            FeatureMap::from_tensor(t)
        };

        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value = Vec::new();
        let mut head = 0;
        loop {
            let q_name = format!("fa.{block}.{head}.q");
            if !ckpt.contains(&q_name) {
                break;
            }
            query.push(matrix(&q_name)?);
            key.push(matrix(&format!("fa.{block}.{head}.k"))?);
            value.push(matrix(&format!("fa.{block}.{head}.v"))?);
            head += 1;
        }
        if query.is_empty() {
            return Err(NeckError::MissingLayer {
                layer: format!("fa.{block}.0.q"),
            });
        }
        let output = matrix(&format!("fa.{block}.out"))?;
        let token_name = "fa.camera_token";
        let token = ckpt.get(token_name).ok_or_else(|| NeckError::MissingLayer {
            layer: token_name.to_string(),
        })?;
        if token.rank() != 1 {
            return Err(NeckError::BadLayer {
                layer: token_name.to_string(),
                shape: token.shape().to_vec(),
                reason: "expected rank 1",
            });
        }
        AttentionParams::new(query, key, value, output, token.data().to_vec())
    }

    /// Writes this block into a checkpoint under the standard names.
    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, block: usize, dtype: DType) {
        for (h, (q, (k, v))) in self
            .query
            .iter()
            .zip(self.key.iter().zip(&self.value))
            .enumerate()
        {
            ckpt.insert(format!("fa.{block}.{h}.q"), q.to_tensor(dtype));
            ckpt.insert(format!("fa.{block}.{h}.k"), k.to_tensor(dtype));
            ckpt.insert(format!("fa.{block}.{h}.v"), v.to_tensor(dtype));
        }
        ckpt.insert(format!("fa.{block}.out"), self.output.to_tensor(dtype));
        ckpt.insert(
            "fa.camera_token",
            Tensor::new(dtype, vec![self.channels()], self.camera_token.clone())
                .expect("finite token"),
        );
    }
}

/// Attention output plus the per-head attention matrices (rows include the
/// camera token at index 0), for diagnostics.
#[derive(Debug, Clone)]
pub struct AttentionDetail {
    pub output: FeatureMap,
    pub weights: Vec<FeatureMap>,
}

/// Sums in a canonical order independent of how the terms were produced.
fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

fn matmul_row(row: &[f64], m: &FeatureMap) -> Vec<f64> {
    // Reduction over channels: column order is fixed, no sorting needed.
    (0..m.cols())
        .map(|c| {
            row.iter()
                .enumerate()
                .map(|(r, x)| x * m.get(r, c))
                .sum::<f64>()
        })
        .collect()
}

/// Multi-head self-attention over `tokens` with the camera token
/// prepended. No positional encoding, residual path, or normalization:
/// this is the order-agnostic core only. The camera row is stripped from
/// the returned map, so shapes are preserved.
pub fn frame_attention(
    tokens: &FeatureMap,
    params: &AttentionParams,
) -> Result<FeatureMap, NeckError> {
    frame_attention_detailed(tokens, params).map(|d| d.output)
}

/// [`frame_attention`] that also returns the attention matrices.
pub fn frame_attention_detailed(
    tokens: &FeatureMap,
    params: &AttentionParams,
) -> Result<AttentionDetail, NeckError> {
    let channels = params.channels();
    if tokens.cols() != channels {
        return Err(NeckError::ShapeMismatch {
            context: "tokens vs attention channels",
            a_rows: tokens.rows(),
            a_cols: tokens.cols(),
            b_rows: channels,
            b_cols: channels,
        });
    }
    let t = tokens.rows();
    let n = t + 1;
    let head_dim = params.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    // Row 0 is the camera token; patch rows follow in input order.
    let mut full = Vec::with_capacity(n * channels);
    full.extend_from_slice(params.camera_token());
    full.extend_from_slice(tokens.data());
    let row = |i: usize| &full[i * channels..(i + 1) * channels];

    let mut concat = vec![0.0; n * channels];
    let mut weights = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let q: Vec<Vec<f64>> = (0..n).map(|i| matmul_row(row(i), &params.query[h])).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|i| matmul_row(row(i), &params.key[h])).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|i| matmul_row(row(i), &params.value[h])).collect();

        let mut attn = vec![0.0; n * n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    scale
                        * q[i]
                            .iter()
                            .zip(&k[j])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            // Max is order-independent; the exp-sum is reduced over the
            // token set, so it gets the canonical treatment.
            let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let mut sorted = exps.clone();
            let denom = canonical_sum(&mut sorted);
            for (j, e) in exps.into_iter().enumerate() {
                attn[i * n + j] = e / denom;
            }
            for c in 0..head_dim {
                let mut terms: Vec<f64> =
                    (0..n).map(|j| attn[i * n + j] * v[j][c]).collect();
                concat[i * channels + h * head_dim + c] = canonical_sum(&mut terms);
            }
        }
        weights.push(FeatureMap::new(n, n, attn)?);
    }

    // Output projection, then drop the camera row.
    let mut out = Vec::with_capacity(t * channels);
    for i in 1..n {
        let projected = matmul_row(&concat[i * channels..(i + 1) * channels], &params.output);
        out.extend_from_slice(&projected);
    }
    Ok(AttentionDetail {
        output: FeatureMap::new(t, channels, out)?,
        weights,
    })
}

/// Pointwise nonlinearity for stub layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }
}

/// One affine + activation layer with a square weight, so the stack is
/// shape-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct StubLayer {
    pub weight: FeatureMap,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A stand-in for a monocular depth branch: a deterministic stack of
/// affine + activation layers applied row-wise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MdeNeckStub {
    layers: Vec<StubLayer>,
}

impl MdeNeckStub {
    pub fn new(layers: Vec<StubLayer>) -> Result<Self, NeckError> {
        let mut channels = None;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.rows() != layer.weight.cols() {
                return Err(NeckError::BadParams {
                    reason: format!(
                        "stub layer {i} weight is {}x{}, expected square",
                        layer.weight.rows(),
                        layer.weight.cols()
                    ),
                });
            }
            if layer.bias.len() != layer.weight.cols() {
                return Err(NeckError::BadParams {
                    reason: format!(
                        "stub layer {i} bias has length {}, expected {}",
                        layer.bias.len(),
                        layer.weight.cols()
                    ),
                });
            }
            if let Some(j) = layer.bias.iter().position(|v| !v.is_finite()) {
                return Err(NeckError::BadParams {
                    reason: format!("stub layer {i} bias entry {j} is not finite"),
                });
            }
            match channels {
                None => channels = Some(layer.weight.cols()),
                Some(c) if c == layer.weight.cols() => {}
                Some(c) => {
                    return Err(NeckError::BadParams {
                        reason: format!(
                            "stub layer {i} works on {} channels, expected {c}",
                            layer.weight.cols()
                        ),
                    })
                }
            }
        }
        Ok(MdeNeckStub { layers })
    }

    pub fn layers(&self) -> &[StubLayer] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Loads consecutive layers `mde.{i}.w` / `mde.{i}.b` starting at 0.
    /// Activations are not serialized; loaded layers default to tanh.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NeckError> {
        let mut layers = Vec::new();
        let mut i = 0;
        loop {
            let w_name = format!("mde.{i}.w");
            let Some(w) = ckpt.get(&w_name) else { break };
            if w.rank() != 2 {
                return Err(NeckError::BadLayer {
                    layer: w_name,
                    shape: w.shape().to_vec(),
                    reason: "expected rank 2",
                });
            }
            let b_name = format!("mde.{i}.b");
            let b = ckpt.get(&b_name).ok_or_else(|| NeckError::MissingLayer {
                layer: b_name.clone(),
            })?;
            if b.rank() != 1 {
                return Err(NeckError::BadLayer {
                    layer: b_name,
                    shape: b.shape().to_vec(),
                    reason: "expected rank 1",
                });
            }
            layers.push(StubLayer {
                weight: FeatureMap::from_tensor(w)?,
                bias: b.data().to_vec(),
                activation: Activation::default(),
            });
            i += 1;
        }
        if layers.is_empty() {
            return Err(NeckError::MissingLayer {
                layer: "mde.0.w".to_string(),
            });
        }
        MdeNeckStub::new(layers)
    }

    /// Writes the stack into a checkpoint under the standard names.
    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, dtype: DType) {
        for (i, layer) in self.layers.iter().enumerate() {
            ckpt.insert(format!("mde.{i}.w"), layer.weight.to_tensor(dtype));
            ckpt.insert(
                format!("mde.{i}.b"),
                Tensor::new(dtype, vec![layer.bias.len()], layer.bias.clone())
                    .expect("finite bias"),
            );
        }
    }
}

/// Applies the stub stack row-wise: `x <- act(x W + b)` per layer.
pub fn mde_neck_stub(tokens: &FeatureMap, stub: &MdeNeckStub) -> Result<FeatureMap, NeckError> {
    if let Some(first) = stub.layers.first() {
        if first.weight.cols() != tokens.cols() {
            return Err(NeckError::ShapeMismatch {
                context: "tokens vs stub channels",
                a_rows: tokens.rows(),
                a_cols: tokens.cols(),
                b_rows: first.weight.rows(),
                b_cols: first.weight.cols(),
            });
        }
    }
    let mut current = tokens.clone();
    for layer in &stub.layers {
        let mut next = Vec::with_capacity(current.data().len());
        for i in 0..current.rows() {
            let affine = matmul_row(current.row(i), &layer.weight);
            next.extend(
                affine
                    .iter()
                    .zip(&layer.bias)
                    .map(|(x, b)| layer.activation.apply(x + b)),
            );
        }
        current = FeatureMap::new(current.rows(), current.cols(), next)?;
    }
    Ok(current)
}

/// Subtractive modulation `mde - alpha * fa`, elementwise. With
/// `alpha == 0` the first argument is returned as an exact copy.
pub fn modulate(mde: &FeatureMap, fa: &FeatureMap, alpha: f64) -> Result<FeatureMap, NeckError> {
    if mde.rows() != fa.rows() || mde.cols() != fa.cols() {
        return Err(NeckError::ShapeMismatch {
            context: "modulation operands",
            a_rows: mde.rows(),
            a_cols: mde.cols(),
            b_rows: fa.rows(),
            b_cols: fa.cols(),
        });
    }
    if alpha == 0.0 {
        return Ok(mde.clone());
    }
    let data: Vec<f64> = mde
        .data()
        .iter()
        .zip(fa.data())
        .map(|(m, f)| m - alpha * f)
        .collect();
    FeatureMap::new(mde.rows(), mde.cols(), data)
}

/// Neck composition settings.
#[derive(Debug, Clone, Copy)]
pub struct NeckConfig {
    /// Modulation strength.
    pub alpha: f64,
    /// Number of stacked attention blocks.
    pub fa_depth: usize,
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig {
            alpha: 0.2,
            fa_depth: 1,
        }
    }
}

/// Full neck: run the attention stack and the stub on the same tokens,
/// then modulate the stub output with the attention output.
pub fn neck_forward(
    tokens: &FeatureMap,
    blocks: &[AttentionParams],
    stub: &MdeNeckStub,
    alpha: f64,
) -> Result<FeatureMap, NeckError> {
    let mut fa = tokens.clone();
    for block in blocks {
        fa = frame_attention(&fa, block)?;
    }
    let mde = mde_neck_stub(tokens, stub)?;
    modulate(&mde, &fa, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: usize, cols: usize, data: &[f64]) -> FeatureMap {
        FeatureMap::new(rows, cols, data.to_vec()).unwrap()
    }

    fn identity(c: usize) -> FeatureMap {
        let mut data = vec![0.0; c * c];
        for i in 0..c {
            data[i * c + i] = 1.0;
        }
        FeatureMap::new(c, c, data).unwrap()
    }

    fn simple_params(c: usize) -> AttentionParams {
        AttentionParams::new(
            vec![identity(c)],
            vec![identity(c)],
            vec![identity(c)],
            identity(c),
            vec![0.25; c],
        )
        .unwrap()
    }

    #[test]
    fn feature_map_validates_input() {
        assert!(matches!(
            FeatureMap::new(0, 2, vec![]),
            Err(NeckError::EmptyDims { .. })
        ));
        assert!(matches!(
            FeatureMap::new(2, 2, vec![1.0; 3]),
            Err(NeckError::LengthMismatch { .. })
        ));
        assert!(matches!(
            FeatureMap::new(1, 2, vec![1.0, f64::NAN]),
            Err(NeckError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn attention_preserves_shape_and_rows_sum_to_one() {
        let tokens = fm(3, 2, &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5]);
        let params = simple_params(2);
        let detail = frame_attention_detailed(&tokens, &params).unwrap();
        assert_eq!(detail.output.rows(), 3);
        assert_eq!(detail.output.cols(), 2);
        for w in &detail.weights {
            assert_eq!(w.rows(), 4);
            for i in 0..w.rows() {
                let sum: f64 = w.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
                assert!(w.row(i).iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn attention_is_exactly_permutation_equivariant() {
        let tokens = fm(
            4,
            2,
            &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.125, 0.875],
        );
        let params = simple_params(2);
        let base = frame_attention(&tokens, &params).unwrap();
        let perm = [2usize, 0, 3, 1];
        let shuffled = tokens.permute_rows(&perm).unwrap();
        let out = frame_attention(&shuffled, &params).unwrap();
        let expected = base.permute_rows(&perm).unwrap();
        assert_eq!(out, expected, "permuting rows must permute outputs bitwise");
    }

    #[test]
    fn attention_rejects_channel_mismatch() {
        let tokens = fm(2, 3, &[0.0; 6]);
        let params = simple_params(2);
        assert!(matches!(
            frame_attention(&tokens, &params),
            Err(NeckError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn multi_head_split_must_divide_channels() {
        let q = vec![fm(3, 1, &[1.0, 0.0, 0.0]); 2];
        let err = AttentionParams::new(q.clone(), q.clone(), q, identity(3), vec![0.0; 3]);
        assert!(matches!(err, Err(NeckError::HeadSplit { channels: 3, heads: 2 })));
    }

    #[test]
    fn stub_applies_affine_then_activation() {
        let stub = MdeNeckStub::new(vec![StubLayer {
            weight: fm(2, 2, &[2.0, 0.0, 0.0, 2.0]),
            bias: vec![1.0, -1.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let tokens = fm(1, 2, &[3.0, 4.0]);
        let out = mde_neck_stub(&tokens, &stub).unwrap();
        assert_eq!(out.data(), &[7.0, 7.0]);
    }

    #[test]
    fn empty_stub_is_identity() {
        let tokens = fm(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = mde_neck_stub(&tokens, &MdeNeckStub::default()).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn modulate_with_zero_alpha_is_bitwise_identity() {
        let m = fm(1, 3, &[0.1, -0.0, 5.5]);
        let f = fm(1, 3, &[9.0, 9.0, 9.0]);
        let out = modulate(&m, &f, 0.0).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn modulate_subtracts_scaled_attention() {
        let m = fm(1, 2, &[1.0, 2.0]);
        let f = fm(1, 2, &[0.5, -0.5]);
        let out = modulate(&m, &f, 0.2).unwrap();
        assert_eq!(out.data(), &[0.9, 2.1]);
    }

    #[test]
    fn modulate_is_linear_in_alpha_for_dyadic_inputs() {
        // Dyadic values keep every product and difference exact, so the
        // linearity identity holds bitwise, not just approximately.
        let m = fm(1, 2, &[3.0 / 8.0, -5.0 / 16.0]);
        let f = fm(1, 2, &[7.0 / 4.0, 9.0 / 32.0]);
        let (a1, a2) = (0.25, 1.5);
        let o1 = modulate(&m, &f, a1).unwrap();
        let o2 = modulate(&m, &f, a2).unwrap();
        for ((x1, x2), fv) in o1.data().iter().zip(o2.data()).zip(f.data()) {
            assert_eq!(x1 - x2, (a2 - a1) * fv);
        }
    }

    #[test]
    fn params_round_trip_through_checkpoint() {
        let params = AttentionParams::new(
            vec![fm(2, 1, &[0.5, -0.25]), fm(2, 1, &[1.0, 0.75])],
            vec![fm(2, 1, &[0.125, 2.0]), fm(2, 1, &[-1.5, 0.5])],
            vec![fm(2, 1, &[3.0, -0.5]), fm(2, 1, &[0.25, 0.25])],
            fm(2, 2, &[1.0, 0.5, -0.5, 2.0]),
            vec![0.1, -0.2],
        )
        .unwrap();
        let mut ckpt = Checkpoint::new();
        params.to_checkpoint(&mut ckpt, 0, DType::F64);
        let back = AttentionParams::from_checkpoint(&ckpt, 0).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn stub_round_trips_through_checkpoint() {
        let stub = MdeNeckStub::new(vec![
            StubLayer {
                weight: fm(2, 2, &[1.0, 0.0, 0.0, 1.0]),
                bias: vec![0.5, -0.5],
                activation: Activation::Tanh,
            },
            StubLayer {
                weight: fm(2, 2, &[0.25, 0.5, -0.5, 0.125]),
                bias: vec![0.0, 1.0],
                activation: Activation::Tanh,
            },
        ])
        .unwrap();
        let mut ckpt = Checkpoint::new();
        stub.to_checkpoint(&mut ckpt, DType::F64);
        let back = MdeNeckStub::from_checkpoint(&ckpt).unwrap();
        assert_eq!(stub, back);
    }

    #[test]
    fn missing_layers_are_named_in_errors() {
        let ckpt = Checkpoint::new();
        match AttentionParams::from_checkpoint(&ckpt, 0) {
            Err(NeckError::MissingLayer { layer }) => assert_eq!(layer, "fa.0.0.q"),
            other => panic!("expected MissingLayer, got {other:?}"),
        }
        match MdeNeckStub::from_checkpoint(&ckpt) {
            Err(NeckError::MissingLayer { layer }) => assert_eq!(layer, "mde.0.w"),
            other => panic!("expected MissingLayer, got {other:?}"),
        }
    }

    #[test]
    fn neck_forward_composes_paths() {
        let tokens = fm(2, 2, &[0.5, 0.25, -0.5, 0.75]);
        let params = simple_params(2);
        let stub = MdeNeckStub::new(vec![StubLayer {
            weight: identity(2),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let fused = neck_forward(&tokens, std::slice::from_ref(&params), &stub, 0.2).unwrap();
        let fa = frame_attention(&tokens, &params).unwrap();
        let by_hand = modulate(&tokens, &fa, 0.2).unwrap();
        assert_eq!(fused, by_hand);
    }
}
