//! Stereo evaluation metrics and feature diagnostics: depth/disparity
//! conversion under a calibrated rig, end-point error and bad-pixel
//! rates over validity masks, single-scale SSIM with the standard
//! Gaussian window, and a PCA projection to three channels for feature
//! visualization.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::atomic_write;
use crate::neck::FeatureMap;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grid dimensions must be positive, got {height}x{width}")]
    EmptyDims { height: usize, width: usize },
    #[error("grid {height}x{width} needs {expected} values, got {actual}")]
    LengthMismatch {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at valid pixel ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("grids have different shapes: {a_height}x{a_width} vs {b_height}x{b_width}")]
    ShapeMismatch {
        a_height: usize,
        a_width: usize,
        b_height: usize,
        b_width: usize,
    },
    #[error("no pixel is valid in both grids")]
    EmptyIntersection,
    #[error("non-positive {quantity} at valid pixel ({row}, {col}): {value}")]
    NonPositive {
        quantity: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("rig parameters must be positive: focal = {focal}, baseline = {baseline}")]
    BadRig { focal: f64, baseline: f64 },
    #[error("threshold must be positive, got {value}")]
    BadThreshold { value: f64 },
    #[error("grid {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("dynamic range must be positive, got {value}")]
    BadRange { value: f64 },
    #[error("channel counts differ: {a} vs {b}")]
    ChannelMismatch { a: usize, b: usize },
    #[error("PCA needs at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("feature covariance has rank below 3; component {component} has no variance")]
    RankDeficient { component: usize },
    #[error("csv record {record}: {reason}")]
    BadCsv { record: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A dense grid of values with a per-pixel validity mask. Values are
/// finite everywhere (invalid pixels store 0.0 and are ignored by every
/// metric).
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl GridMap {
    /// All-valid grid.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, MetricsError> {
        let valid = vec![true; values.len()];
        GridMap::with_mask(height, width, values, valid)
    }

    pub fn with_mask(
        height: usize,
        width: usize,
        mut values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, MetricsError> {
        if height == 0 || width == 0 {
            return Err(MetricsError::EmptyDims { height, width });
        }
        let expected = height * width;
        if values.len() != expected || valid.len() != expected {
            return Err(MetricsError::LengthMismatch {
                height,
                width,
                expected,
                actual: if values.len() != expected {
                    values.len()
                } else {
                    valid.len()
                },
            });
        }
        for i in 0..expected {
            if valid[i] {
                if !values[i].is_finite() {
                    return Err(MetricsError::NonFinite {
                        row: i / width,
                        col: i % width,
                    });
                }
            } else {
                values[i] = 0.0;
            }
        }
        Ok(GridMap {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &GridMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Builds an all-valid grid from a rank-2 tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self, MetricsError> {
        if t.rank() != 2 {
            return Err(MetricsError::TooFew {
                what: "tensor axes (expected rank 2)",
                needed: 2,
                got: t.rank(),
            });
        }
        GridMap::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    /// Dense tensor of the values; the mask is not representable in the
    /// container format, so callers should only round-trip fully valid
    /// grids.
    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        Tensor::new(dtype, vec![self.height, self.width], self.values.clone())
            .expect("grid invariants imply a valid tensor")
    }

    /// Parses a headerless CSV grid. Cells spelling `nan` (any case) or
    /// left empty mark invalid pixels.
    pub fn from_csv(reader: impl Read) -> Result<Self, MetricsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_reader(reader);
        let mut values = Vec::new();
        let mut valid = Vec::new();
        let mut width = 0;
        let mut height = 0;
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| MetricsError::BadCsv {
                record: i + 1,
                reason: e.to_string(),
            })?;
            if i == 0 {
                width = row.len();
            }
            height += 1;
            for cell in row.iter() {
                let cell = cell.trim();
                if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                    values.push(0.0);
                    valid.push(false);
                    continue;
                }
                let v: f64 = cell.parse().map_err(|e| MetricsError::BadCsv {
                    record: i + 1,
                    reason: format!("bad number '{cell}': {e}"),
                })?;
                if v.is_nan() {
                    values.push(0.0);
                    valid.push(false);
                } else {
                    values.push(v);
                    valid.push(true);
                }
            }
        }
        GridMap::with_mask(height, width, values, valid)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, MetricsError> {
        let file = std::fs::File::open(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        GridMap::from_csv(file)
    }

    /// Writes the grid as headerless CSV; invalid pixels become `nan`.
    pub fn to_csv(&self, mut writer: impl Write) -> Result<(), MetricsError> {
        let io_err = |source| MetricsError::Io {
            path: "<writer>".to_string(),
            source,
        };
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|c| {
                    if self.is_valid(r, c) {
                        format!("{}", self.get(r, c))
                    } else {
                        "nan".to_string()
                    }
                })
                .collect();
            writeln!(writer, "{}", row.join(",")).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<(), MetricsError> {
        let mut buf = Vec::new();
        self.to_csv(&mut buf)?;
        atomic_write(path, &buf).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// A calibrated stereo rig: focal length in pixels and baseline in the
/// depth unit, both positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub focal: f64,
    pub baseline: f64,
}

impl StereoRig {
    pub fn new(focal: f64, baseline: f64) -> Result<Self, MetricsError> {
        if !(focal > 0.0 && focal.is_finite() && baseline > 0.0 && baseline.is_finite()) {
            return Err(MetricsError::BadRig { focal, baseline });
        }
        Ok(StereoRig { focal, baseline })
    }
}

fn convert_grid(
    input: &GridMap,
    rig: StereoRig,
    quantity: &'static str,
) -> Result<GridMap, MetricsError> {
    let mut values = Vec::with_capacity(input.values().len());
    for i in 0..input.values().len() {
        if !input.valid()[i] {
            values.push(0.0);
            continue;
        }
        let v = input.values()[i];
        if v <= 0.0 {
            return Err(MetricsError::NonPositive {
                quantity,
                row: i / input.width(),
                col: i % input.width(),
                value: v,
            });
        }
        values.push(rig.focal * rig.baseline / v);
    }
    GridMap::with_mask(
        input.height(),
        input.width(),
        values,
        input.valid().to_vec(),
    )
}

/// Converts depth to disparity via `d = f b / z`. Valid depths must be
/// strictly positive; invalid pixels stay invalid.
pub fn disparity_from_depth(depth: &GridMap, rig: StereoRig) -> Result<GridMap, MetricsError> {
    convert_grid(depth, rig, "depth")
}

/// Converts disparity to depth via `z = f b / d`; the same reciprocal
/// relation, so the two functions are mutually inverse on valid pixels.
pub fn depth_from_disparity(disparity: &GridMap, rig: StereoRig) -> Result<GridMap, MetricsError> {
    convert_grid(disparity, rig, "disparity")
}

fn joint_errors(pred: &GridMap, gt: &GridMap) -> Result<Vec<(f64, f64)>, MetricsError> {
    if !pred.same_shape(gt) {
        return Err(MetricsError::ShapeMismatch {
            a_height: pred.height(),
            a_width: pred.width(),
            b_height: gt.height(),
            b_width: gt.width(),
        });
    }
    let pairs: Vec<(f64, f64)> = pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(pred.valid().iter().zip(gt.valid()))
        .filter(|(_, (pv, gv))| **pv && **gv)
        .map(|((p, g), _)| ((p - g).abs(), *g))
        .collect();
    if pairs.is_empty() {
        return Err(MetricsError::EmptyIntersection);
    }
    Ok(pairs)
}

/// End-point error: mean absolute difference over pixels valid in both
/// grids.
pub fn epe(pred: &GridMap, gt: &GridMap) -> Result<f64, MetricsError> {
    let errors = joint_errors(pred, gt)?;
    Ok(errors.iter().map(|(e, _)| e).sum::<f64>() / errors.len() as f64)
}

/// Percentage (0-100) of jointly valid pixels whose absolute error
/// exceeds `threshold`.
pub fn bad_pixel_rate(pred: &GridMap, gt: &GridMap, threshold: f64) -> Result<f64, MetricsError> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(MetricsError::BadThreshold { value: threshold });
    }
    let errors = joint_errors(pred, gt)?;
    let bad = errors.iter().filter(|(e, _)| *e > threshold).count();
    Ok(100.0 * bad as f64 / errors.len() as f64)
}

/// D1-style rate: a pixel is bad only when its error exceeds `threshold`
/// *and* `relative` times the ground-truth magnitude.
pub fn bad_pixel_rate_d1(
    pred: &GridMap,
    gt: &GridMap,
    threshold: f64,
    relative: f64,
) -> Result<f64, MetricsError> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(MetricsError::BadThreshold { value: threshold });
    }
    if !(relative > 0.0 && relative.is_finite()) {
        return Err(MetricsError::BadThreshold { value: relative });
    }
    let errors = joint_errors(pred, gt)?;
    let bad = errors
        .iter()
        .filter(|(e, g)| *e > threshold && *e > relative * g.abs())
        .count();
    Ok(100.0 * bad as f64 / errors.len() as f64)
}

/// SSIM settings: stabilization constants as fractions of the dynamic
/// range, plus the Gaussian window.
#[derive(Debug, Clone, Copy)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the inputs.
    pub range: f64,
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimConfig {
    pub fn with_range(range: f64) -> Self {
        SsimConfig {
            range,
            ..SsimConfig::default()
        }
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(MetricsError::BadRange { value: self.range });
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(MetricsError::BadThreshold {
                value: self.window as f64,
            });
        }
        if !(self.sigma > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(MetricsError::BadThreshold { value: self.sigma });
        }
        Ok(())
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter: output is
/// `(h - window + 1) x (w - window + 1)`.
fn gaussian_filter(values: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let out_w = w - k + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; h * out_w];
    for r in 0..h {
        for c in 0..out_w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * values[r * w + c + i];
            }
            tmp[r * out_w + c] = acc;
        }
    }
    // Vertical pass.
    let out_h = h - k + 1;
    let mut out = vec![0.0; out_h * out_w];
    for r in 0..out_h {
        for c in 0..out_w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(r + i) * out_w + c];
            }
            out[r * out_w + c] = acc;
        }
    }
    out
}

/// Single-scale SSIM over two equally shaped grids (masks are ignored;
/// SSIM is defined on dense images). Local statistics use a Gaussian
/// window in valid mode, and the result is the mean local score, in
/// [-1, 1] with 1 reserved for identical inputs.
pub fn ssim(a: &GridMap, b: &GridMap, config: &SsimConfig) -> Result<f64, MetricsError> {
    config.validate()?;
    if !a.same_shape(b) {
        return Err(MetricsError::ShapeMismatch {
            a_height: a.height(),
            a_width: a.width(),
            b_height: b.height(),
            b_width: b.width(),
        });
    }
    let (h, w) = (a.height(), a.width());
    if h < config.window || w < config.window {
        return Err(MetricsError::TooSmall {
            height: h,
            width: w,
            window: config.window,
        });
    }
    let kernel = gaussian_kernel(config.window, config.sigma);
    let av = a.values();
    let bv = b.values();
    let aa: Vec<f64> = av.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bv.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = av.iter().zip(bv).map(|(x, y)| x * y).collect();

    let mu_a = gaussian_filter(av, h, w, &kernel);
    let mu_b = gaussian_filter(bv, h, w, &kernel);
    let m_aa = gaussian_filter(&aa, h, w, &kernel);
    let m_bb = gaussian_filter(&bb, h, w, &kernel);
    let m_ab = gaussian_filter(&ab, h, w, &kernel);

    let c1 = (config.k1 * config.range) * (config.k1 * config.range);
    let c2 = (config.k2 * config.range) * (config.k2 * config.range);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = m_aa[i] - ma * ma;
        let var_b = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM across channels; channel counts must match.
pub fn ssim_multichannel(
    a: &[GridMap],
    b: &[GridMap],
    config: &SsimConfig,
) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricsError::ChannelMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut total = 0.0;
    for (ca, cb) in a.iter().zip(b) {
        total += ssim(ca, cb, config)?;
    }
    Ok(total / a.len() as f64)
}

/// PCA projection to three channels.
#[derive(Debug, Clone)]
pub struct Pca3 {
    /// `T x 3` component scores of the centered rows.
    pub scores: FeatureMap,
    /// `3 x C`; row `k` is the k-th principal axis, unit length, signed so
    /// its largest-magnitude loading is positive.
    pub components: FeatureMap,
    /// Descending covariance eigenvalues of the three axes.
    pub eigenvalues: [f64; 3],
}

/// Projects `T x C` features onto their top three principal axes via
/// orthogonally deflated power iteration on the covariance matrix.
/// Requires `T >= 4` samples, `C >= 3` channels, and covariance rank of
/// at least 3.
pub fn pca_project3(features: &FeatureMap) -> Result<Pca3, MetricsError> {
    let t = features.rows();
    let c = features.cols();
    if t < 4 {
        return Err(MetricsError::TooFew {
            what: "feature rows",
            needed: 4,
            got: t,
        });
    }
    if c < 3 {
        return Err(MetricsError::TooFew {
            what: "feature channels",
            needed: 3,
            got: c,
        });
    }

    // Column means, then centered data.
    let mut mean = vec![0.0; c];
    for r in 0..t {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += features.get(r, j);
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    let centered: Vec<f64> = (0..t)
        .flat_map(|r| {
            let mean = &mean;
            (0..c).map(move |j| features.get(r, j) - mean[j])
        })
        .collect();

    // Covariance S = X^T X / (T - 1), C x C.
    let mut cov = vec![0.0; c * c];
    for r in 0..t {
        let row = &centered[r * c..(r + 1) * c];
        for i in 0..c {
            for j in i..c {
                cov[i * c + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[i * c + j] / (t - 1) as f64;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }

    let mat_vec = |v: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|i| (0..c).map(|j| cov[i * c + j] * v[j]).sum::<f64>())
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut eigenvalues = [0.0; 3];
    for k in 0..3 {
        let mut v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Deflate the start against found components and normalize.
        for prev in &components {
            let p = dot(&v, prev);
            for (x, y) in v.iter_mut().zip(prev) {
                *x -= p * y;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            return Err(MetricsError::RankDeficient { component: k });
        }
        for x in &mut v {
            *x /= norm;
        }

        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let mut next = mat_vec(&v);
            for prev in &components {
                let p = dot(&next, prev);
                for (x, y) in next.iter_mut().zip(prev) {
                    *x -= p * y;
                }
            }
            let norm = dot(&next, &next).sqrt();
            if norm < 1e-300 {
                return Err(MetricsError::RankDeficient { component: k });
            }
            for x in &mut next {
                *x /= norm;
            }
            let alignment = dot(&next, &v).abs();
            v = next;
            lambda = dot(&v, &mat_vec(&v));
            if 1.0 - alignment < 1e-14 {
                break;
            }
        }
        if lambda <= 0.0 || (k > 0 && lambda <= 1e-12 * eigenvalues[0]) {
            return Err(MetricsError::RankDeficient { component: k });
        }
        eigenvalues[k] = lambda;
        components.push(v);
    }

    // Deterministic sign: the largest-magnitude loading (first on ties)
    // points positive.
    for v in &mut components {
        let mut arg = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[arg].abs() {
                arg = i;
            }
        }
        if v[arg] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }

    // Keep eigenvalues descending (power iteration already orders them up
    // to numerical ties).
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let eigenvalues = [
        eigenvalues[order[0]],
        eigenvalues[order[1]],
        eigenvalues[order[2]],
    ];
    let components: Vec<Vec<f64>> = order.iter().map(|&i| components[i].clone()).collect();

    let mut scores = Vec::with_capacity(t * 3);
    for r in 0..t {
        let row = &centered[r * c..(r + 1) * c];
        for v in &components {
            scores.push(dot(row, v));
        }
    }
    let components_flat: Vec<f64> = components.into_iter().flatten().collect();
    Ok(Pca3 {
        scores: FeatureMap::new(t, 3, scores).map_err(|_| MetricsError::RankDeficient {
            component: 0,
        })?,
        components: FeatureMap::new(3, c, components_flat)
            .map_err(|_| MetricsError::RankDeficient { component: 0 })?,
        eigenvalues,
    })
}
